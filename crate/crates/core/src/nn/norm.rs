//! Per-channel batch normalization over `[N, C, ...]`.
//!
//! Training mode normalizes with the batch mean and population variance
//! taken over every axis except the channel axis, and reports the updated
//! running statistics
//! `running = (1 - momentum) * running + momentum * batch`.
//! Evaluation mode normalizes with the running statistics.

use crate::autodiff::{BackwardContext, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

/// Result of a batch-norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormOutput<T: Real> {
    pub y: Tensor<T>,
    /// Updated `(running_mean, running_var)`; `None` in eval mode.
    pub running: Option<(Tensor<T>, Tensor<T>)>,
}

fn layout<T: Real>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "batch norm needs [N, C, ...], got {}",
            x.shape()
        )));
    }
    let c = x.dims()[1];
    if c != channels {
        return Err(Error::shape(format!(
            "batch norm parameters have {channels} channels, input has {c}"
        )));
    }
    let inner: usize = x.dims()[2..].iter().product();
    Ok((x.dims()[0], c, inner))
}

fn channel_stats<T: Real>(x: &Tensor<T>, n: usize, c: usize, inner: usize) -> (Vec<T>, Vec<T>) {
    let count = T::of_usize(n * inner);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &data[(b * c + ch) * inner..][..inner] {
                s = s + v;
            }
        }
        let m = s / count;
        let mut q = T::zero();
        for b in 0..n {
            for &v in &data[(b * c + ch) * inner..][..inner] {
                q = q + (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: Mode,
    config: BatchNormConfig,
) -> Result<BatchNormOutput<T>> {
    let channels = gamma.numel();
    for (name, t) in [("beta", beta), ("running_mean", running_mean), ("running_var", running_var)] {
        if t.numel() != channels {
            return Err(Error::shape(format!(
                "batch norm {name} has {} entries, gamma has {channels}",
                t.numel()
            )));
        }
    }
    let (n, c, inner) = layout(x, channels)?;
    let eps = T::of_f64(config.epsilon);
    let (mean, var, running) = match mode {
        Mode::Train => {
            let (mean, var) = channel_stats(x, n, c, inner);
            let mom = T::of_f64(config.momentum);
            let keep = T::one() - mom;
            let rm: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &m)| keep * r + mom * m)
                .collect();
            let rv: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &v)| keep * r + mom * v)
                .collect();
            let running = (
                Tensor::from_data(running_mean.dims(), rm)?,
                Tensor::from_data(running_var.dims(), rv)?,
            );
            (mean, var, Some(running))
        }
        Mode::Eval => (running_mean.to_buffer(), running_var.to_buffer(), None),
    };
    let g = gamma.data();
    let b = beta.data();
    let y = Tensor::from_fn(x.dims(), |i| {
        let ch = (i / inner) % c;
        g[ch] * (x.data()[i] - mean[ch]) / (var[ch] + eps).sqrt() + b[ch]
    })?;
    Ok(BatchNormOutput { y, running })
}

impl<T: Real> Graph<T> {
    /// Differentiable batch norm. Inputs are `[x, gamma, beta, running_mean,
    /// running_var]`; the running statistics never receive gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: Var,
        running_var: Var,
        mode: Mode,
        config: BatchNormConfig,
    ) -> Result<(Var, Option<(Tensor<T>, Tensor<T>)>)> {
        let out = batch_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            self.value(running_mean),
            self.value(running_var),
            mode,
            config,
        )?;
        let eps = T::of_f64(config.epsilon);
        let var = self.record(
            "batch_norm",
            &[x, gamma, beta, running_mean, running_var],
            out.y,
            move |cx: &BackwardContext<'_, T>| {
                let x = cx.inputs[0];
                let gamma = cx.inputs[1].data();
                let (n, c, inner) = layout(x, gamma.len())?;
                let (mean, var) = match mode {
                    Mode::Train => channel_stats(x, n, c, inner),
                    Mode::Eval => (cx.inputs[3].to_buffer(), cx.inputs[4].to_buffer()),
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let dy = cx.grad.data();
                let xd = x.data();
                let count = T::of_usize(n * inner);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                            dbeta[ch] = dbeta[ch] + dy[i];
                            dgamma[ch] = dgamma[ch] + dy[i] * xhat;
                        }
                    }
                }
                let dx = if cx.needs[0] {
                    let v = Tensor::from_fn(x.dims(), |i| {
                        let ch = (i / inner) % c;
                        let scale = gamma[ch] * inv_std[ch];
                        match mode {
                            Mode::Eval => scale * dy[i],
                            Mode::Train => {
                                let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                                scale * (dy[i] - dbeta[ch] / count - xhat * dgamma[ch] / count)
                            }
                        }
                    })?;
                    Some(v)
                } else {
                    None
                };
                Ok(vec![
                    dx,
                    Some(Tensor::from_data(cx.inputs[1].dims(), dgamma)?),
                    Some(Tensor::from_data(cx.inputs[2].dims(), dbeta)?),
                    None,
                    None,
                ])
            },
        );
        Ok((var, out.running))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn params(c: usize) -> [Tensor<f64>; 4] {
        [
            Tensor::ones(&[c]).unwrap(),
            Tensor::zeros(&[c]).unwrap(),
            Tensor::zeros(&[c]).unwrap(),
            Tensor::ones(&[c]).unwrap(),
        ]
    }

    #[test]
    fn standardized_input_is_nearly_unchanged() {
        // Exactly zero-mean, unit-variance channel: y = x / sqrt(1 + eps).
        let x = Tensor::<f64>::from_data(&[2, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let [g, b, rm, rv] = params(1);
        let out = batch_norm(&x, &g, &b, &rm, &rv, Mode::Train, BatchNormConfig::default()).unwrap();
        let bound = 1.0 - 1.0 / (1.0f64 + BN_EPSILON).sqrt() + 1e-15;
        for (y, x) in out.y.data().iter().zip(x.data()) {
            assert!((y - x).abs() <= bound);
        }
    }

    #[test]
    fn constant_input_maps_to_beta() {
        let x = Tensor::<f64>::full(&[3, 2, 4], 7.0).unwrap();
        let g = Tensor::from_data(&[2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::from_data(&[2], vec![0.5, -0.25]).unwrap();
        let [_, _, rm, rv] = params(2);
        let out = batch_norm(&x, &g, &b, &rm, &rv, Mode::Train, BatchNormConfig::default()).unwrap();
        for (i, &y) in out.y.data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert!((y - b.data()[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = Rng::new(12);
        let x = rng.normal_tensor::<f64>(&[4, 3, 5, 5], 2.0, 3.0).unwrap();
        let [g, b, _, _] = params(3);
        let [_, _, rm, rv] = params(3);
        let out = batch_norm(&x, &g, &b, &rm, &rv, Mode::Train, BatchNormConfig::default()).unwrap();
        let (mean, var) = channel_stats(&out.y, 4, 3, 25);
        for ch in 0..3 {
            assert!(mean[ch].abs() < 1e-4);
            assert!((var[ch] - 1.0).abs() < 1e-4);
        }
        let (rm, rv) = out.running.unwrap();
        let (bm, bv) = channel_stats(&x, 4, 3, 25);
        for ch in 0..3 {
            assert!((rm.data()[ch] - 0.1 * bm[ch]).abs() < 1e-12);
            assert!((rv.data()[ch] - (0.9 + 0.1 * bv[ch])).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::<f64>::from_data(&[1, 1, 2], vec![3.0, 5.0]).unwrap();
        let g = Tensor::ones(&[1]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let rm = Tensor::full(&[1], 1.0).unwrap();
        let rv = Tensor::full(&[1], 4.0).unwrap();
        let cfg = BatchNormConfig {
            epsilon: 0.0,
            momentum: 0.1,
        };
        let out = batch_norm(&x, &g, &b, &rm, &rv, Mode::Eval, cfg).unwrap();
        assert_eq!(out.y.data(), &[1.0, 2.0]);
        assert!(out.running.is_none());
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2]).unwrap();
        let [g, b, rm, rv] = params(2);
        assert!(batch_norm(&x, &g, &b, &rm, &rv, Mode::Train, BatchNormConfig::default()).is_err());
    }
}
