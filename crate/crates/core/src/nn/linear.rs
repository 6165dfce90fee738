use crate::autodiff::{BackwardContext, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Transpose};

/// `y = x w + b` for `x: [N, F]`, `w: [F, O]`, `b: [O]`.
pub fn fully_connected<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, o) = fc_dims(x, w, b)?;
    let mut out = Vec::with_capacity(n * o);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, f, o, x.data(), Transpose::No, w.data(), Transpose::No, T::one(), &mut out);
    Tensor::from_data(&[n, o], out)
}

fn fc_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
        return Err(Error::shape(format!(
            "fully connected needs x [N, F], w [F, O], b [O]; got {}, {}, {}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (n, f) = (x.dims()[0], x.dims()[1]);
    let o = w.dims()[1];
    if w.dims()[0] != f || b.dims()[0] != o {
        return Err(Error::shape(format!(
            "fully connected mismatch: x {}, w {}, b {}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    Ok((n, f, o))
}

impl<T: Real> Graph<T> {
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = fully_connected(self.value(x), self.value(w), self.value(b))?;
        Ok(self.record("fully_connected", &[x, w, b], value, |cx: &BackwardContext<'_, T>| {
            let (x, w) = (cx.inputs[0], cx.inputs[1]);
            let (n, f, o) = fc_dims(x, w, cx.inputs[2])?;
            let g = cx.grad.data();
            let dx = if cx.needs[0] {
                let mut dx = vec![T::zero(); n * f];
                gemm(n, o, f, g, Transpose::No, w.data(), Transpose::Yes, T::zero(), &mut dx);
                Some(Tensor::from_data(&[n, f], dx)?)
            } else {
                None
            };
            let dw = if cx.needs[1] {
                let mut dw = vec![T::zero(); f * o];
                gemm(f, n, o, x.data(), Transpose::Yes, g, Transpose::No, T::zero(), &mut dw);
                Some(Tensor::from_data(&[f, o], dw)?)
            } else {
                None
            };
            let mut db = vec![T::zero(); o];
            for row in g.chunks(o) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            Ok(vec![dx, dw, Some(Tensor::from_data(&[o], db)?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_hand_computation() {
        let x = Tensor::<f64>::from_data(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_data(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 2.0, 1.0]).unwrap();
        let b = Tensor::from_data(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = fully_connected(&x, &w, &b).unwrap();
        let want = [2.1, 4.2, 1.3, 5.1, 8.2, 1.3];
        for (a, e) in y.data().iter().zip(want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let w = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        assert!(fully_connected(&x, &w, &b).is_err());
    }
}
