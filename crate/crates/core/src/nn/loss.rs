use crate::autodiff::{BackwardContext, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Row-wise softmax of `[N, K]` logits, shifted by the row max.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("softmax needs [N, K], got {}", logits.shape())));
    }
    let k = logits.dims()[1];
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::from_data(logits.dims(), out)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let p = softmax(logits)?;
    let (n, k) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
    }
    let nt = T::of_usize(n);
    let mut loss = T::zero();
    let mut grad = p.into_data();
    for (i, (&label, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        loss = loss + (lse - row[label]);
        grad[i * k + label] = grad[i * k + label] - T::one();
    }
    for g in &mut grad {
        *g = *g / nt;
    }
    Ok((loss / nt, Tensor::from_data(&[n, k], grad)?))
}

impl<T: Real> Graph<T> {
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, dlogits) = softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.record(
            "softmax_cross_entropy",
            &[logits],
            Tensor::scalar(loss),
            move |cx: &BackwardContext<'_, T>| Ok(vec![Some(dlogits.scale(cx.grad.item()?))]),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ce(logits: Vec<f64>, labels: &[usize]) -> Result<f64> {
        let n = labels.len();
        let k = logits.len() / n;
        Ok(softmax_cross_entropy(&Tensor::from_data(&[n, k], logits)?, labels)?.0)
    }

    #[test]
    fn equal_logits_give_ln2() {
        assert!((ce(vec![0.3, 0.3], &[1]).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn known_value() {
        let want = (1.0 + (-2f64).exp()).ln();
        assert!((ce(vec![2.0, 0.0], &[0]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn huge_logits_stay_finite() {
        let l = ce(vec![1000.0, 0.0, 0.0, 1000.0], &[0, 0]).unwrap();
        assert!(l.is_finite());
        assert!((l - 500.0).abs() < 1e-9);
        let (_, g) = softmax_cross_entropy(&Tensor::from_data(&[1, 2], vec![1000.0f32, 0.0]).unwrap(), &[1]).unwrap();
        assert!(g.all_finite());
    }

    #[test]
    fn bad_labels_error() {
        assert!(ce(vec![0.0, 0.0], &[2]).is_err());
        let t = Tensor::<f64>::zeros(&[2, 2]).unwrap();
        assert!(softmax_cross_entropy(&t, &[0]).is_err());
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let t = Tensor::<f64>::from_data(&[2, 3], vec![0.1, -2.0, 3.0, 0.0, 0.5, 0.2]).unwrap();
        let (_, g) = softmax_cross_entropy(&t, &[2, 0]).unwrap();
        for row in g.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
