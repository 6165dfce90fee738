use crate::error::{Error, Result};

/// Subject-level classification metrics; the positive class is 1 (ASD).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub subjects: Vec<SubjectResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectResult {
    pub id: String,
    pub label: usize,
    /// Mean softmax probability of class 1 over the subject's crops.
    pub p_asd: f64,
    pub predicted: usize,
    pub crops: usize,
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Accuracy `(TP + TN) / n` and F1 `2TP / (2TP + FP + FN)`, with F1 = 0 when
/// the denominator is 0.
pub fn f1_and_accuracy(predictions: &[usize], labels: &[usize]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        if p > 1 || l > 1 {
            return Err(Error::invalid(format!("non-binary prediction {p} or label {l}")));
        }
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(MetricsReport {
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
        f1: if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
        tp,
        fp,
        tn,
        fn_,
        subjects: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_inverted() {
        let labels = [0, 1, 1, 0, 1];
        let r = f1_and_accuracy(&labels, &labels).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
        let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
        let r = f1_and_accuracy(&flipped, &labels).unwrap();
        assert_eq!((r.accuracy, r.f1), (0.0, 0.0));
    }

    #[test]
    fn mixed_counts() {
        let pred = [1, 1, 1, 0, 0, 0];
        let lab = [1, 1, 0, 1, 0, 0];
        let r = f1_and_accuracy(&pred, &lab).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (2, 1, 1, 2));
        assert!((r.accuracy - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_positives_anywhere() {
        let r = f1_and_accuracy(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn errors() {
        assert!(f1_and_accuracy(&[0], &[0, 1]).is_err());
        assert!(f1_and_accuracy(&[], &[]).is_err());
        assert!(f1_and_accuracy(&[2], &[1]).is_err());
    }
}
