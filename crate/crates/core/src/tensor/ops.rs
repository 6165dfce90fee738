use rayon::prelude::*;

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// Rows per GEMM task. Fixed so that the work decomposition, and therefore
/// every rounding, is independent of the thread pool size.
const GEMM_ROW_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Transpose {
    No,
    Yes,
}

/// `c (m x n, row-major) = op(a) op(b) + beta * c` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. With `Transpose::Yes` the operand is stored as
/// its transpose (`a` as `k x m`, `b` as `n x k`), both row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    let run = |block: usize, c_block: &mut [T]| {
        let r0 = block * GEMM_ROW_BLOCK;
        let rows = c_block.len() / n;
        let a_off = match ta {
            Transpose::No => r0 * k,
            Transpose::Yes => r0,
        };
        // SAFETY: the row block [r0, r0 + rows) lies inside `a` for both
        // layouts, `b` is read whole, and `c_block` is an exclusive slice of
        // `rows * n` elements.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * n * k >= 1 << 18 {
        c.par_chunks_mut(GEMM_ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, cb)| run(i, cb));
    } else {
        c.chunks_mut(GEMM_ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, cb)| run(i, cb));
    }
}

/// Plain triple loop matrix product, accumulating in `f64`. Used as the
/// reference the GEMM path is checked against.
pub fn matmul_naive<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a, b)?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a.data[i * k + p].as_f64() * b.data[p * n + j].as_f64();
            }
            out[i * n + j] = T::of_f64(acc);
        }
    }
    Tensor::from_data(&[m, n], out)
}

fn matmul_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {} and {}",
            a.shape, b.shape
        )));
    }
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {} x {}",
            a.shape, b.shape
        )));
    }
    Ok((m, k, n))
}

/// Axis reductions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    /// Standard deviation with divisor `n` (not `n - 1`).
    StdPopulation,
    Max,
}

/// Splits `dims` around `axis` into (outer, len, inner) element counts.
fn around(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

fn check_axis<T: Real>(t: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {}",
            t.shape
        )));
    }
    Ok(())
}

/// Shape with `axis` removed; a rank-1 input collapses to `[1]`.
fn without_axis(dims: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = dims.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<T: Real> Tensor<T> {
    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise operands differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn tanh(&self) -> Self {
        self.map(|v| v.tanh())
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn ln(&self) -> Self {
        self.map(|v| v.ln())
    }

    /// In-place `self += other`; crate-internal accumulation helper.
    pub(crate) fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate shapes differ: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k, n) = matmul_dims(self, other)?;
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            Transpose::No,
            &other.data,
            Transpose::No,
            T::zero(),
            &mut out,
        );
        Tensor::from_data(&[m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "transpose2 needs rank 2, got {}",
                self.shape
            )));
        }
        self.permute(&[1, 0])
    }

    /// Sequential left-to-right sum of the whole buffer.
    /// Neumaier-compensated, so finite-difference checks on large scalar
    /// losses are not swamped by the reduction's own rounding.
    pub fn sum_all(&self) -> T {
        let (mut s, mut c) = (T::zero(), T::zero());
        for &v in &self.data {
            let t = s + v;
            c = c + if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
            s = t;
        }
        s + c
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of_usize(self.numel())
    }

    /// Reduces along `axis`, removing it from the shape.
    pub fn reduce(&self, op: Reduction, axis: usize) -> Result<Self> {
        check_axis(self, axis)?;
        let (outer, len, inner) = around(self.dims(), axis);
        let n = T::of_usize(len);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|l| self.data[(o * len + l) * inner + i]);
                let v = match op {
                    Reduction::Sum => lane.fold(T::zero(), |a, b| a + b),
                    Reduction::Mean => lane.fold(T::zero(), |a, b| a + b) / n,
                    Reduction::Max => lane.fold(T::neg_infinity(), |a, b| a.max(b)),
                    Reduction::StdPopulation => {
                        let mean = lane.clone().fold(T::zero(), |a, b| a + b) / n;
                        let var = lane.fold(T::zero(), |a, b| a + (b - mean) * (b - mean)) / n;
                        var.sqrt()
                    }
                };
                out.push(v);
            }
        }
        Tensor::from_data(&without_axis(self.dims(), axis), out)
    }

    /// Zero padding: `amounts[i] = (lo, hi)` elements added before/after axis `i`.
    pub fn pad(&self, amounts: &[(usize, usize)]) -> Result<Self> {
        if amounts.len() != self.rank() {
            return Err(Error::shape(format!(
                "pad needs {} (lo, hi) pairs, got {}",
                self.rank(),
                amounts.len()
            )));
        }
        let dims: Vec<usize> = self
            .dims()
            .iter()
            .zip(amounts)
            .map(|(&d, &(lo, hi))| d + lo + hi)
            .collect();
        let mut out = Tensor::zeros(&dims)?;
        let offsets: Vec<usize> = amounts.iter().map(|&(lo, _)| lo).collect();
        copy_block(
            self,
            &vec![0; self.rank()],
            self.dims(),
            &mut out,
            &offsets,
        );
        Ok(out)
    }

    /// Removes `lo` leading and `hi` trailing elements from every axis.
    pub fn crop(&self, amounts: &[(usize, usize)]) -> Result<Self> {
        if amounts.len() != self.rank() {
            return Err(Error::shape(format!(
                "crop needs {} (lo, hi) pairs, got {}",
                self.rank(),
                amounts.len()
            )));
        }
        let mut starts = Vec::with_capacity(self.rank());
        let mut extents = Vec::with_capacity(self.rank());
        for (axis, (&d, &(lo, hi))) in self.dims().iter().zip(amounts).enumerate() {
            if lo + hi >= d {
                return Err(Error::shape(format!(
                    "crop ({lo}, {hi}) leaves nothing of axis {axis} (extent {d})"
                )));
            }
            starts.push(lo);
            extents.push(d - lo - hi);
        }
        let mut out = Tensor::zeros(&extents)?;
        copy_block(self, &starts, &extents, &mut out, &vec![0; self.rank()]);
        Ok(out)
    }

    /// The sub-range `[start, start + len)` of one axis.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        check_axis(self, axis)?;
        let d = self.dims()[axis];
        if len == 0 || start + len > d {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) outside axis {axis} of extent {d}",
                start + len
            )));
        }
        let (outer, _, inner) = around(self.dims(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims().to_vec();
        dims[axis] = len;
        Tensor::from_data(&dims, data)
    }

    /// Picks one index of `axis` and drops the axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape("select needs rank >= 2"));
        }
        let t = self.narrow(axis, index, 1)?;
        Ok(Tensor {
            shape: Shape::new(without_axis(self.dims(), axis))?,
            data: t.data,
        })
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        check_axis(first, axis)?;
        for p in parts {
            let same = p.rank() == first.rank()
                && p.dims()
                    .iter()
                    .zip(first.dims())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape(format!(
                    "concat along {axis}: {} incompatible with {}",
                    p.shape, first.shape
                )));
            }
        }
        let (outer, _, inner) = around(first.dims(), axis);
        let total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let run = p.dims()[axis] * inner;
                data.extend_from_slice(&p.data[o * run..(o + 1) * run]);
            }
        }
        let mut dims = first.dims().to_vec();
        dims[axis] = total;
        Tensor::from_data(&dims, data)
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        if axis > first.rank() {
            return Err(Error::shape(format!("stack axis {axis} out of range")));
        }
        let mut dims = first.dims().to_vec();
        dims.insert(axis, 1);
        let expanded: Vec<Tensor<T>> = parts
            .iter()
            .map(|p| {
                if p.shape != first.shape {
                    Err(Error::shape(format!(
                        "stack operands differ: {} vs {}",
                        p.shape, first.shape
                    )))
                } else {
                    p.reshape(&dims)
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = expanded.iter().collect();
        Tensor::concat(&refs, axis)
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let in_strides = self.shape.strides();
        let dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[src]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += strides[ax];
                if idx[ax] < dims[ax] {
                    break;
                }
                src -= strides[ax] * dims[ax];
                idx[ax] = 0;
            }
        }
        Tensor::from_data(&dims, data)
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Copies the block `src[starts .. starts + extents]` into `dst` at `offsets`.
fn copy_block<T: Real>(
    src: &Tensor<T>,
    starts: &[usize],
    extents: &[usize],
    dst: &mut Tensor<T>,
    offsets: &[usize],
) {
    let rank = src.rank();
    let s_str = src.shape.strides();
    let d_str = dst.shape.strides();
    let run = extents[rank - 1];
    let rows: usize = extents[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..rows {
        let mut s = starts[rank - 1];
        let mut d = offsets[rank - 1];
        for ax in 0..rank - 1 {
            s += (starts[ax] + idx[ax]) * s_str[ax];
            d += (offsets[ax] + idx[ax]) * d_str[ax];
        }
        dst.data[d..d + run].copy_from_slice(&src.data[s..s + run]);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < extents[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_data(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn activations() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.sigmoid().data()[1], 0.5);
        assert_eq!(x.tanh().data()[1], 0.0);
        let big = t(&[2], &[-800.0, 800.0]).sigmoid();
        assert!(big.all_finite());
        assert_eq!(big.data(), &[0.0, 1.0]);
        assert!(x.add(&t(&[2], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn matmul_small_cases() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let r = t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(m.matmul(&t(&[3, 1], &[1.0; 3])).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let a = rng.normal_tensor::<f64>(&[7, 5], 0.0, 1.0).unwrap();
        let b = rng.normal_tensor::<f64>(&[5, 3], 0.0, 1.0).unwrap();
        let fast = a.matmul(&b).unwrap();
        let slow = matmul_naive(&a, &b).unwrap();
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn reductions() {
        let v = t(&[2], &[1.0, 3.0]);
        assert_eq!(v.reduce(Reduction::Mean, 0).unwrap().data(), &[2.0]);
        assert_eq!(v.reduce(Reduction::StdPopulation, 0).unwrap().data(), &[1.0]);
        let c = t(&[4], &[2.5; 4]);
        assert_eq!(c.reduce(Reduction::StdPopulation, 0).unwrap().data(), &[0.0]);
        let m = t(&[2, 3], &[1.0, 5.0, 2.0, 4.0, 0.0, 9.0]);
        assert_eq!(m.reduce(Reduction::Max, 1).unwrap().data(), &[5.0, 9.0]);
        assert_eq!(m.reduce(Reduction::Sum, 0).unwrap().data(), &[5.0, 5.0, 11.0]);
        assert!(m.reduce(Reduction::Sum, 2).is_err());
    }

    #[test]
    fn pad_and_crop() {
        let v = t(&[1], &[5.0]);
        assert_eq!(v.pad(&[(1, 1)]).unwrap().data(), &[0.0, 5.0, 0.0]);
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor::<f64>(&[3, 4, 5], 0.0, 1.0).unwrap();
        let amounts = [(1, 0), (0, 2), (2, 1)];
        assert_eq!(x.pad(&amounts).unwrap().crop(&amounts).unwrap(), x);
        assert!(x.crop(&[(2, 1), (0, 0), (0, 0)]).is_err());
    }

    #[test]
    fn temporal_crop_of_full_sequence() {
        let img = Tensor::<f32>::zeros(&[32, 32, 32, 176]).unwrap();
        let crop = img.narrow(3, 0, 15).unwrap();
        assert_eq!(crop.dims(), &[32, 32, 32, 15]);
    }

    #[test]
    fn permute_select_concat() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64).unwrap();
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.dims(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]).unwrap(), x.at(&[1, 2, 3]).unwrap());
        let s = x.select(1, 2).unwrap();
        assert_eq!(s.dims(), &[2, 4]);
        assert_eq!(s.at(&[1, 3]).unwrap(), x.at(&[1, 2, 3]).unwrap());
        let a = x.narrow(1, 0, 1).unwrap();
        let b = x.narrow(1, 1, 2).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        let st = Tensor::stack(&[&s, &s], 0).unwrap();
        assert_eq!(st.dims(), &[2, 2, 4]);
        assert!(x.permute(&[0, 0, 1]).is_err());
    }
}
