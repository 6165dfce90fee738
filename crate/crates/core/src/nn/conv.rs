//! 3D and 4D convolution.
//!
//! Convention is cross-correlation (the kernel is not flipped):
//!
//! ```text
//! out[n, co, o] = b[co] + sum_{ci, k} w[co, ci, k] * x[n, ci, o * stride + k - pad]
//! ```
//!
//! with out-of-range input positions reading zero. Rank-3 convolutions act on
//! `[N, C, X, Y, Z]`, rank-4 on `[N, C, X, Y, Z, T]`. Internally both are
//! handled as rank 4, a rank-3 problem being one with a unit temporal axis.
//!
//! Two forward paths exist. [`ConvPath::Direct`] is the nested-loop
//! reference. [`ConvPath::Im2col`] lowers each block of output positions to
//! a `(Cin * prod(k)) x positions` patch matrix and multiplies it by the
//! `Cout x (Cin * prod(k))` weight matrix.

use rayon::prelude::*;

use crate::autodiff::{BackwardContext, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Transpose};

/// Upper bound on patch-matrix elements per block of output positions.
const PATCH_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvPath {
    Direct,
    Im2col,
}

/// Shape parameters of one convolution layer.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    /// Number of convolved axes: 3 (`X, Y, Z`) or 4 (`X, Y, Z, T`).
    pub rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub bias: bool,
}

impl ConvSpec {
    /// Same kernel, stride and padding on every convolved axis.
    pub fn cubic(
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        ConvSpec {
            rank,
            in_channels,
            out_channels,
            kernel: vec![kernel; rank],
            stride: vec![stride; rank],
            padding: vec![padding; rank],
            bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank != 3 && self.rank != 4 {
            return Err(Error::invalid(format!(
                "convolution rank must be 3 or 4, got {}",
                self.rank
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution channel counts must be >= 1"));
        }
        for (name, v) in [("kernel", &self.kernel), ("stride", &self.stride), ("padding", &self.padding)] {
            if v.len() != self.rank {
                return Err(Error::invalid(format!(
                    "{name} has {} entries for a rank-{} convolution",
                    v.len(),
                    self.rank
                )));
            }
        }
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::invalid("kernel extents and strides must be >= 1"));
        }
        Ok(())
    }

    /// Output extents `floor((in + 2 pad - k) / stride) + 1` per axis.
    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        if input.len() != self.rank {
            return Err(Error::shape(format!(
                "rank-{} convolution given {} spatial extents",
                self.rank,
                input.len()
            )));
        }
        (0..self.rank)
            .map(|a| {
                let span = input[a] + 2 * self.padding[a];
                if span < self.kernel[a] {
                    Err(Error::shape(format!(
                        "axis {a}: kernel {} exceeds padded extent {span}",
                        self.kernel[a]
                    )))
                } else {
                    Ok((span - self.kernel[a]) / self.stride[a] + 1)
                }
            })
            .collect()
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        let mut d = vec![self.out_channels, self.in_channels];
        d.extend(&self.kernel);
        d
    }

    pub fn weight_numel(&self) -> usize {
        self.weight_dims().iter().product()
    }
}

/// Problem dimensions normalised to four spatial axes.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    cout: usize,
    input: [usize; 4],
    out: [usize; 4],
    kernel: [usize; 4],
    stride: [usize; 4],
    pad: [usize; 4],
}

fn widen(v: &[usize], fill: usize) -> [usize; 4] {
    let mut out = [fill; 4];
    out[..v.len()].copy_from_slice(v);
    out
}

impl Geometry {
    fn new<T: Real>(spec: &ConvSpec, x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        if x.rank() != spec.rank + 2 {
            return Err(Error::shape(format!(
                "rank-{} convolution needs a rank-{} input, got {}",
                spec.rank,
                spec.rank + 2,
                x.shape()
            )));
        }
        if x.dims()[1] != spec.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, convolution expects {}",
                x.dims()[1],
                spec.in_channels
            )));
        }
        if w.dims() != spec.weight_dims().as_slice() {
            return Err(Error::shape(format!(
                "weight shape {} does not match {:?}",
                w.shape(),
                spec.weight_dims()
            )));
        }
        match (spec.bias, b) {
            (true, Some(b)) if b.dims() == [spec.out_channels] => {}
            (false, None) => {}
            (true, Some(b)) => {
                return Err(Error::shape(format!(
                    "bias shape {} should be [{}]",
                    b.shape(),
                    spec.out_channels
                )))
            }
            (true, None) => return Err(Error::invalid("convolution spec has bias but none given")),
            (false, Some(_)) => return Err(Error::invalid("bias given to a bias-free convolution")),
        }
        let spatial = &x.dims()[2..];
        let out = spec.output_extents(spatial)?;
        Ok(Geometry {
            n: x.dims()[0],
            cin: spec.in_channels,
            cout: spec.out_channels,
            input: widen(spatial, 1),
            out: widen(&out, 1),
            kernel: widen(&spec.kernel, 1),
            stride: widen(&spec.stride, 1),
            pad: widen(&spec.padding, 0),
        })
    }

    fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    fn out_positions(&self) -> usize {
        self.out.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn padded(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|a| self.input[a] + 2 * self.pad[a])
    }

    fn out_dims(&self, rank: usize) -> Vec<usize> {
        let mut d = vec![self.n, self.cout];
        d.extend(&self.out[..rank]);
        d
    }

    fn chunk(&self) -> usize {
        let rows = self.cin * self.taps();
        (PATCH_BUDGET / rows).clamp(64, self.out_positions().max(64))
    }
}

fn linear4(idx: [usize; 4], dims: [usize; 4]) -> usize {
    ((idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]) * dims[3] + idx[3]
}

fn unlinear4(mut flat: usize, dims: [usize; 4]) -> [usize; 4] {
    let mut idx = [0; 4];
    for a in (0..4).rev() {
        idx[a] = flat % dims[a];
        flat /= dims[a];
    }
    idx
}

/// Forward convolution.
pub fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
    path: ConvPath,
) -> Result<Tensor<T>> {
    let geo = Geometry::new(spec, x, w, b)?;
    let data = match path {
        ConvPath::Direct => direct_forward(&geo, x.data(), w.data(), b.map(|b| b.data())),
        ConvPath::Im2col => im2col_forward(&geo, x.data(), w.data(), b.map(|b| b.data())),
    };
    Tensor::from_data(&geo.out_dims(spec.rank), data)
}

fn direct_forward<T: Real>(geo: &Geometry, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let in_pos = geo.in_positions();
    let out_pos = geo.out_positions();
    let taps = geo.taps();
    let mut out = vec![T::zero(); geo.n * geo.cout * out_pos];
    for n in 0..geo.n {
        for co in 0..geo.cout {
            for o in 0..out_pos {
                let oi = unlinear4(o, geo.out);
                let mut acc = b.map_or(T::zero(), |b| b[co]);
                for ci in 0..geo.cin {
                    let xbase = (n * geo.cin + ci) * in_pos;
                    let wbase = (co * geo.cin + ci) * taps;
                    for k in 0..taps {
                        let ki = unlinear4(k, geo.kernel);
                        let mut src = [0usize; 4];
                        let mut inside = true;
                        for a in 0..4 {
                            let p = (oi[a] * geo.stride[a] + ki[a]) as isize - geo.pad[a] as isize;
                            if p < 0 || p >= geo.input[a] as isize {
                                inside = false;
                                break;
                            }
                            src[a] = p as usize;
                        }
                        if inside {
                            acc = acc + w[wbase + k] * x[xbase + linear4(src, geo.input)];
                        }
                    }
                }
                out[(n * geo.cout + co) * out_pos + o] = acc;
            }
        }
    }
    out
}

/// One sample's input copied into a zero-padded buffer `[Cin, padded...]`.
fn pad_sample<T: Real>(geo: &Geometry, x: &[T], n: usize) -> Vec<T> {
    let pd = geo.padded();
    let pp: usize = pd.iter().product();
    let in_pos = geo.in_positions();
    let mut out = vec![T::zero(); geo.cin * pp];
    let run = geo.input[3];
    for ci in 0..geo.cin {
        let src = &x[(n * geo.cin + ci) * in_pos..][..in_pos];
        for i0 in 0..geo.input[0] {
            for i1 in 0..geo.input[1] {
                for i2 in 0..geo.input[2] {
                    let s = linear4([i0, i1, i2, 0], geo.input);
                    let d = ci * pp
                        + linear4(
                            [i0 + geo.pad[0], i1 + geo.pad[1], i2 + geo.pad[2], geo.pad[3]],
                            pd,
                        );
                    out[d..d + run].copy_from_slice(&src[s..s + run]);
                }
            }
        }
    }
    out
}

/// Offsets into the padded sample for every patch row `(ci, k)`.
fn row_offsets(geo: &Geometry) -> Vec<usize> {
    let pd = geo.padded();
    let pp: usize = pd.iter().product();
    let taps = geo.taps();
    let mut rows = Vec::with_capacity(geo.cin * taps);
    for ci in 0..geo.cin {
        for k in 0..taps {
            rows.push(ci * pp + linear4(unlinear4(k, geo.kernel), pd));
        }
    }
    rows
}

/// Padded-buffer offset of the window corner for output positions `[p0, p1)`.
fn column_bases(geo: &Geometry, p0: usize, p1: usize) -> Vec<usize> {
    let pd = geo.padded();
    (p0..p1)
        .map(|o| {
            let oi = unlinear4(o, geo.out);
            linear4([0, 1, 2, 3].map(|a| oi[a] * geo.stride[a]), pd)
        })
        .collect()
}

fn fill_patches<T: Real>(padded: &[T], rows: &[usize], cols: &[usize], patches: &mut [T]) {
    let width = cols.len();
    for (r, &off) in rows.iter().enumerate() {
        let dst = &mut patches[r * width..(r + 1) * width];
        for (d, &base) in dst.iter_mut().zip(cols) {
            *d = padded[base + off];
        }
    }
}

fn im2col_forward<T: Real>(geo: &Geometry, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let out_pos = geo.out_positions();
    let chunk = geo.chunk();
    let rows = row_offsets(geo);
    let r = rows.len();
    let mut out = vec![T::zero(); geo.n * geo.cout * out_pos];
    out.par_chunks_mut(geo.cout * out_pos)
        .enumerate()
        .for_each(|(n, out_n)| {
            let padded = pad_sample(geo, x, n);
            let blocks: Vec<(usize, Vec<T>)> = (0..out_pos)
                .step_by(chunk)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|p0| {
                    let p1 = (p0 + chunk).min(out_pos);
                    let width = p1 - p0;
                    let cols = column_bases(geo, p0, p1);
                    let mut patches = vec![T::zero(); r * width];
                    fill_patches(&padded, &rows, &cols, &mut patches);
                    let mut block = vec![T::zero(); geo.cout * width];
                    gemm(geo.cout, r, width, w, Transpose::No, &patches, Transpose::No, T::zero(), &mut block);
                    (p0, block)
                })
                .collect();
            for (p0, block) in blocks {
                let width = block.len() / geo.cout;
                for co in 0..geo.cout {
                    let bias = b.map_or(T::zero(), |b| b[co]);
                    let dst = &mut out_n[co * out_pos + p0..][..width];
                    for (d, &s) in dst.iter_mut().zip(&block[co * width..(co + 1) * width]) {
                        *d = s + bias;
                    }
                }
            }
        });
    out
}

/// Gradients of a convolution with respect to its input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Backward pass. `db` is returned exactly when the spec has a bias.
pub fn conv_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    conv_backward_selected(upstream, x, w, spec, [true, true, spec.bias])
}

pub(crate) fn conv_backward_selected<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    want: [bool; 3],
) -> Result<ConvGrads<T>> {
    let bias_stub;
    let b = if spec.bias {
        bias_stub = Tensor::zeros(&[spec.out_channels])?;
        Some(&bias_stub)
    } else {
        None
    };
    let geo = Geometry::new(spec, x, w, b)?;
    if upstream.dims() != geo.out_dims(spec.rank).as_slice() {
        return Err(Error::shape(format!(
            "upstream gradient {} does not match convolution output {:?}",
            upstream.shape(),
            geo.out_dims(spec.rank)
        )));
    }
    let out_pos = geo.out_positions();
    let in_pos = geo.in_positions();
    let chunk = geo.chunk();
    let rows = row_offsets(&geo);
    let r = rows.len();
    let pd = geo.padded();
    let pp: usize = pd.iter().product();
    let (want_dx, want_dw, want_db) = (want[0], want[1], want[2] && spec.bias);
    let dy = upstream.data();

    // Per-sample partial results, reduced in sample order afterwards so the
    // sums do not depend on scheduling.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..geo.n)
        .into_par_iter()
        .map(|n| {
            let dy_n = &dy[n * geo.cout * out_pos..(n + 1) * geo.cout * out_pos];
            let padded = if want_dw { pad_sample(&geo, x.data(), n) } else { Vec::new() };
            let mut dw = if want_dw { vec![T::zero(); geo.cout * r] } else { Vec::new() };
            let mut dpadded = if want_dx { vec![T::zero(); geo.cin * pp] } else { Vec::new() };
            let mut p0 = 0;
            while p0 < out_pos {
                let p1 = (p0 + chunk).min(out_pos);
                let width = p1 - p0;
                let mut g = vec![T::zero(); geo.cout * width];
                for co in 0..geo.cout {
                    g[co * width..(co + 1) * width].copy_from_slice(&dy_n[co * out_pos + p0..][..width]);
                }
                let cols = column_bases(&geo, p0, p1);
                if want_dw {
                    let mut patches = vec![T::zero(); r * width];
                    fill_patches(&padded, &rows, &cols, &mut patches);
                    // dw (cout x r) += g (cout x width) * patches^T (width x r)
                    gemm(geo.cout, width, r, &g, Transpose::No, &patches, Transpose::Yes, T::one(), &mut dw);
                }
                if want_dx {
                    // dpatches (r x width) = w^T (r x cout) * g (cout x width)
                    let mut dpatches = vec![T::zero(); r * width];
                    gemm(r, geo.cout, width, w.data(), Transpose::Yes, &g, Transpose::No, T::zero(), &mut dpatches);
                    for (ri, &off) in rows.iter().enumerate() {
                        for (j, &base) in cols.iter().enumerate() {
                            let v = dpatches[ri * width + j];
                            dpadded[base + off] = dpadded[base + off] + v;
                        }
                    }
                }
                p0 = p1;
            }
            let dx_n = if want_dx { unpad_sample(&geo, &dpadded) } else { Vec::new() };
            (dx_n, dw)
        })
        .collect();

    let dx = if want_dx {
        let mut data = Vec::with_capacity(geo.n * geo.cin * in_pos);
        for (dx_n, _) in &per_sample {
            data.extend_from_slice(dx_n);
        }
        Some(Tensor::from_data(x.dims(), data)?)
    } else {
        None
    };
    let dw = if want_dw {
        let mut acc = vec![T::zero(); geo.cout * r];
        for (_, dw_n) in &per_sample {
            for (a, &v) in acc.iter_mut().zip(dw_n) {
                *a = *a + v;
            }
        }
        Some(Tensor::from_data(w.dims(), acc)?)
    } else {
        None
    };
    let db = if want_db {
        let mut acc = vec![T::zero(); geo.cout];
        for n in 0..geo.n {
            for (co, a) in acc.iter_mut().enumerate() {
                let lane = &dy[(n * geo.cout + co) * out_pos..][..out_pos];
                *a = *a + lane.iter().fold(T::zero(), |s, &v| s + v);
            }
        }
        Some(Tensor::from_data(&[geo.cout], acc)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

/// Inverse of [`pad_sample`]: drops the padding border.
fn unpad_sample<T: Real>(geo: &Geometry, padded: &[T]) -> Vec<T> {
    let pd = geo.padded();
    let pp: usize = pd.iter().product();
    let in_pos = geo.in_positions();
    let run = geo.input[3];
    let mut out = vec![T::zero(); geo.cin * in_pos];
    for ci in 0..geo.cin {
        for i0 in 0..geo.input[0] {
            for i1 in 0..geo.input[1] {
                for i2 in 0..geo.input[2] {
                    let d = ci * in_pos + linear4([i0, i1, i2, 0], geo.input);
                    let s = ci * pp
                        + linear4(
                            [i0 + geo.pad[0], i1 + geo.pad[1], i2 + geo.pad[2], geo.pad[3]],
                            pd,
                        );
                    out[d..d + run].copy_from_slice(&padded[s..s + run]);
                }
            }
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// Differentiable convolution. `b` must be present exactly when
    /// `spec.bias` is set.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec, path: ConvPath) -> Result<Var> {
        let value = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec, path)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let spec = spec.clone();
        Ok(self.record("conv", &inputs, value, move |cx: &BackwardContext<'_, T>| {
            let want = [cx.needs[0], cx.needs[1], cx.needs.get(2).copied().unwrap_or(false)];
            let grads = conv_backward_selected(cx.grad, cx.inputs[0], cx.inputs[1], &spec, want)?;
            let mut out = vec![grads.dx, grads.dw];
            if spec.bias {
                out.push(grads.db);
            }
            Ok(out)
        }))
    }
}
