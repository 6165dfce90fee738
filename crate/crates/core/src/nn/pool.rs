use crate::autodiff::{BackwardContext, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Window geometry for average pooling over the trailing `rank` axes of
/// `[N, C, spatial...]`. Windows tile with floor semantics: a trailing
/// remainder shorter than the stride is dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
}

impl PoolSpec {
    pub fn uniform(rank: usize, window: usize, stride: usize) -> Self {
        PoolSpec {
            window: vec![window; rank],
            stride: vec![stride; rank],
        }
    }

    pub fn output_extents(&self, input: &[usize]) -> Result<Vec<usize>> {
        if self.window.len() != input.len() || self.stride.len() != input.len() {
            return Err(Error::shape(format!(
                "pooling over {} axes given window {:?}, stride {:?}",
                input.len(),
                self.window,
                self.stride
            )));
        }
        input
            .iter()
            .zip(self.window.iter().zip(&self.stride))
            .enumerate()
            .map(|(a, (&d, (&w, &s)))| {
                if w == 0 || s == 0 {
                    Err(Error::invalid("pooling window and stride must be >= 1"))
                } else if w > d {
                    Err(Error::shape(format!("axis {a}: window {w} exceeds extent {d}")))
                } else {
                    Ok((d - w) / s + 1)
                }
            })
            .collect()
    }
}

struct PoolGeo {
    planes: usize,
    input: [usize; 4],
    out: [usize; 4],
    window: [usize; 4],
    stride: [usize; 4],
}

fn pad4(v: &[usize], fill: usize) -> [usize; 4] {
    let mut out = [fill; 4];
    out[..v.len()].copy_from_slice(v);
    out
}

fn pool_geo(dims: &[usize], spec: &PoolSpec) -> Result<(PoolGeo, Vec<usize>)> {
    if dims.len() < 3 || dims.len() > 6 {
        return Err(Error::shape(format!(
            "pooling needs [N, C, 1..4 spatial axes], got {dims:?}"
        )));
    }
    let spatial = &dims[2..];
    let out = spec.output_extents(spatial)?;
    let mut out_dims = dims[..2].to_vec();
    out_dims.extend(&out);
    Ok((
        PoolGeo {
            planes: dims[0] * dims[1],
            input: pad4(spatial, 1),
            out: pad4(&out, 1),
            window: pad4(&spec.window, 1),
            stride: pad4(&spec.stride, 1),
        },
        out_dims,
    ))
}

/// Calls `f(out_flat, in_flat)` for every (output, window element) pair.
fn for_each_tap(geo: &PoolGeo, mut f: impl FnMut(usize, usize)) {
    let in_pos: usize = geo.input.iter().product();
    let out_pos: usize = geo.out.iter().product();
    let [_, i1, i2, i3] = geo.input;
    for p in 0..geo.planes {
        let mut o = p * out_pos;
        for a in 0..geo.out[0] {
            for b in 0..geo.out[1] {
                for c in 0..geo.out[2] {
                    for d in 0..geo.out[3] {
                        for wa in 0..geo.window[0] {
                            for wb in 0..geo.window[1] {
                                for wc in 0..geo.window[2] {
                                    let row = ((a * geo.stride[0] + wa) * i1 + b * geo.stride[1] + wb) * i2
                                        + c * geo.stride[2]
                                        + wc;
                                    let base = p * in_pos + row * i3 + d * geo.stride[3];
                                    for wd in 0..geo.window[3] {
                                        f(o, base + wd);
                                    }
                                }
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
    }
}

pub fn avg_pool<T: Real>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    let (geo, out_dims) = pool_geo(x.dims(), spec)?;
    let count = T::of_usize(spec.window.iter().product());
    let mut out = vec![T::zero(); out_dims.iter().product()];
    let src = x.data();
    for_each_tap(&geo, |o, i| out[o] = out[o] + src[i]);
    for v in &mut out {
        *v = *v / count;
    }
    Tensor::from_data(&out_dims, out)
}

pub fn avg_pool_backward<T: Real>(upstream: &Tensor<T>, input_dims: &[usize], spec: &PoolSpec) -> Result<Tensor<T>> {
    let (geo, out_dims) = pool_geo(input_dims, spec)?;
    if upstream.dims() != out_dims.as_slice() {
        return Err(Error::shape(format!(
            "pool upstream {} does not match output {out_dims:?}",
            upstream.shape()
        )));
    }
    let count = T::of_usize(spec.window.iter().product());
    let mut dx = vec![T::zero(); input_dims.iter().product()];
    let g = upstream.data();
    for_each_tap(&geo, |o, i| dx[i] = dx[i] + g[o] / count);
    Tensor::from_data(input_dims, dx)
}

/// Mean over every axis after batch and channel: `[N, C, ...] -> [N, C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 3 {
        return Err(Error::shape(format!(
            "global average pooling needs rank >= 3, got {}",
            x.shape()
        )));
    }
    let (n, c) = (x.dims()[0], x.dims()[1]);
    let inner: usize = x.dims()[2..].iter().product();
    let count = T::of_usize(inner);
    let data = x
        .data()
        .chunks(inner)
        .map(|lane| lane.iter().fold(T::zero(), |a, &b| a + b) / count)
        .collect();
    Tensor::from_data(&[n, c], data)
}

impl<T: Real> Graph<T> {
    pub fn avg_pool(&mut self, x: Var, spec: &PoolSpec) -> Result<Var> {
        let value = avg_pool(self.value(x), spec)?;
        let spec = spec.clone();
        Ok(self.record("avg_pool", &[x], value, move |cx: &BackwardContext<'_, T>| {
            Ok(vec![Some(avg_pool_backward(cx.grad, cx.inputs[0].dims(), &spec)?)])
        }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = global_avg_pool(self.value(x))?;
        Ok(self.record("global_avg_pool", &[x], value, |cx: &BackwardContext<'_, T>| {
            let dims = cx.inputs[0].dims();
            let inner: usize = dims[2..].iter().product();
            let count = T::of_usize(inner);
            let g = cx.grad.data();
            let dx = Tensor::from_fn(dims, |i| g[i / inner] / count)?;
            Ok(vec![Some(dx)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Reduction, Rng};

    #[test]
    fn constant_input_constant_output() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 6, 5], 1.25).unwrap();
        let y = avg_pool(&x, &PoolSpec::uniform(3, 2, 2)).unwrap();
        assert_eq!(y.dims(), &[2, 3, 2, 3, 2]);
        assert!(y.data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn pairs_average() {
        let x = Tensor::<f64>::from_data(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool(&x, &PoolSpec::uniform(1, 2, 2)).unwrap();
        assert_eq!(y.data(), &[1.5, 3.5]);
    }

    #[test]
    fn odd_extent_drops_remainder() {
        let spec = PoolSpec::uniform(1, 2, 2);
        assert_eq!(spec.output_extents(&[15]).unwrap(), vec![7]);
        assert!(PoolSpec::uniform(1, 3, 1).output_extents(&[2]).is_err());
    }

    #[test]
    fn global_pool_means() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 2, 2], |i| if i < 8 { 3.0 } else { (i - 8) as f64 }).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.data(), &[3.0, 3.5]);
        assert!(global_avg_pool(&Tensor::<f64>::zeros(&[2, 2]).unwrap()).is_err());
    }

    #[test]
    fn global_pool_matches_axis_means() {
        let mut rng = Rng::new(5);
        let x = rng.normal_tensor::<f64>(&[2, 3, 4, 3, 2, 5], 0.0, 1.0).unwrap();
        let mut r = x.clone();
        for _ in 0..4 {
            r = r.reduce(Reduction::Mean, 2).unwrap();
        }
        let g = global_avg_pool(&x).unwrap();
        for (a, b) in g.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn backward_spreads_evenly() {
        let up = Tensor::<f64>::from_data(&[1, 1, 2], vec![2.0, 4.0]).unwrap();
        let dx = avg_pool_backward(&up, &[1, 1, 5], &PoolSpec::uniform(1, 2, 2)).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 2.0, 2.0, 0.0]);
    }
}
