use super::{BackwardContext, Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record("add", &[a, b], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.clone()), Some(cx.grad.clone())])
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record("sub", &[a, b], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.clone()), Some(cx.grad.scale(-T::one()))])
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record("mul", &[a, b], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            let da = if cx.needs[0] {
                Some(cx.grad.mul(cx.inputs[1])?)
            } else {
                None
            };
            let db = if cx.needs[1] {
                Some(cx.grad.mul(cx.inputs[0])?)
            } else {
                None
            };
            Ok(vec![da, db])
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of_f64(s);
        let v = self.value(a).scale(s);
        self.record("scale", &[a], v, move |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.scale(s))])
        })
    }

    /// `a + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let v = self.value(a).map(|x| x + c);
        self.record("add_scalar", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.clone())])
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.relu();
        let active: Vec<bool> = x.data().iter().map(|&e| e > T::zero()).collect();
        self.note_kinks(active.iter().copied());
        self.record("relu", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.zip_map(cx.inputs[0], |g, x| {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.record("sigmoid", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(
                cx.grad.zip_map(cx.output, |g, s| g * s * (T::one() - s))?,
            )])
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.record("tanh", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(
                cx.grad.zip_map(cx.output, |g, y| g * (T::one() - y * y))?,
            )])
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.record("exp", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.mul(cx.output)?)])
        })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).ln();
        self.record("ln", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.zip_map(cx.inputs[0], |g, x| g / x)?)])
        })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum_all());
        self.record("sum", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            let g = cx.grad.data()[0];
            Ok(vec![Some(Tensor::full(cx.inputs[0].dims(), g)?)])
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean_all());
        self.record("mean", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            let n = T::of_usize(cx.inputs[0].numel());
            Ok(vec![Some(Tensor::full(cx.inputs[0].dims(), cx.grad.data()[0] / n)?)])
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record("matmul", &[a, b], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            let da = if cx.needs[0] {
                Some(cx.grad.matmul(&cx.inputs[1].transpose2()?)?)
            } else {
                None
            };
            let db = if cx.needs[1] {
                Some(cx.inputs[0].transpose2()?.matmul(cx.grad)?)
            } else {
                None
            };
            Ok(vec![da, db])
        }))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(dims)?;
        Ok(self.record("reshape", &[a], v, |cx: &BackwardContext<'_, T>| -> Grads<T> {
            Ok(vec![Some(cx.grad.reshape(cx.inputs[0].dims())?)])
        }))
    }

    /// Concatenation along `axis`; the backward pass splits the gradient.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&refs, axis)?;
        Ok(self.record("concat", parts, v, move |cx: &BackwardContext<'_, T>| -> Grads<T> {
            let mut start = 0;
            let mut out = Vec::with_capacity(cx.inputs.len());
            for (input, &need) in cx.inputs.iter().zip(&cx.needs) {
                let len = input.dims()[axis];
                out.push(if need {
                    Some(cx.grad.narrow(axis, start, len)?)
                } else {
                    None
                });
                start += len;
            }
            Ok(out)
        }))
    }

    /// Slice `[start, start + len)` of `axis`; the gradient is zero-padded back.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(axis, start, len)?;
        Ok(self.record("narrow", &[a], v, move |cx: &BackwardContext<'_, T>| -> Grads<T> {
            let dims = cx.inputs[0].dims();
            let mut amounts = vec![(0, 0); dims.len()];
            amounts[axis] = (start, dims[axis] - start - len);
            Ok(vec![Some(cx.grad.pad(&amounts)?)])
        }))
    }

    /// Index `axis` at `index`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(a, axis, index, 1)?;
        if self.value(n).rank() < 2 {
            return Err(crate::error::Error::shape("select needs rank >= 2"));
        }
        let mut dims = self.value(n).dims().to_vec();
        dims.remove(axis);
        self.reshape(n, &dims)
    }

    /// Sum over elements of `a * weights` with constant weights, shape `[1]`.
    /// Gives a well-conditioned scalar for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<T>) -> Result<Var> {
        let w = self.constant(weights.clone());
        let p = self.mul(a, w)?;
        Ok(self.sum(p))
    }
}
