use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr.is_finite();
        if !ok {
            return Err(Error::invalid(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for every parameter slot (non-trainable slots
/// keep zeros) plus the number of updates applied.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Result<Self> {
        let zeros = || -> Result<Vec<Tensor<T>>> { params.iter().map(|p| Tensor::zeros(p.value.dims())).collect() };
        Ok(AdamState {
            m: zeros()?,
            v: zeros()?,
            step: 0,
        })
    }
}

/// One bias-corrected Adam update. `grads` is indexed by parameter slot;
/// `None` entries (and non-trainable slots) are left untouched.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient for '{}' has shape {}, parameter {}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if p.trainable && !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of '{}'", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of_f64(config.beta1), T::of_f64(config.beta2));
    let c1 = T::of_f64(1.0 - config.beta1.powi(t));
    let c2 = T::of_f64(1.0 - config.beta2.powi(t));
    let lr = T::of_f64(config.lr);
    let eps = T::of_f64(config.eps);
    let one = T::one();
    for (slot, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if !params.at(slot).trainable {
            continue;
        }
        let m = state.m[slot].data_mut();
        let v = state.v[slot].data_mut();
        let theta = params.at_mut(slot).value.data_mut();
        for i in 0..theta.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            theta[i] = theta[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], v).unwrap(), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_store(0.5);
        let mut st = AdamState::new(&p).unwrap();
        adam_step(&mut p, &[Some(Tensor::zeros(&[1]).unwrap())], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.at(0).value.data(), &[0.5]);
        assert_eq!(st.m[0].data(), &[0.0]);
        assert_eq!(st.v[0].data(), &[0.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        for g in [3.0, -0.02] {
            let mut p = scalar_store(1.0);
            let mut st = AdamState::new(&p).unwrap();
            adam_step(&mut p, &[Some(Tensor::full(&[1], g).unwrap())], &mut st, &cfg).unwrap();
            let delta = p.at(0).value.data()[0] - 1.0;
            // |g| / (|g| + eps) differs from 1 by at most eps / |g|.
            assert!((delta + cfg.lr * g.signum()).abs() <= cfg.lr * cfg.eps / g.abs() + 1e-15);
        }
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // loss = 0.5 * a * (w - c)^2
        let (a, c) = (3.0, -0.7);
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        let mut p = scalar_store(2.0);
        let mut st = AdamState::new(&p).unwrap();
        let (mut w, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let g = a * (p.at(0).value.data()[0] - c);
            adam_step(&mut p, &[Some(Tensor::full(&[1], g).unwrap())], &mut st, &cfg).unwrap();

            let gr = a * (w - c);
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.05 * mh / (vh.sqrt() + 1e-8);
            assert!((p.at(0).value.data()[0] - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p).unwrap();
        let err = adam_step(&mut p, &[Some(Tensor::full(&[1], f64::NAN).unwrap())], &mut st, &AdamConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(p.at(0).value.data(), &[1.0]);
    }
}
