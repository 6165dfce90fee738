use rayon::prelude::*;

use super::metrics::{f1_and_accuracy, MetricsReport, SubjectResult};
use crate::data::{sliding_window_crops, FmriRecord};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::softmax;
use crate::tensor::{Real, Tensor};

/// Crops evaluated per forward pass.
const EVAL_BATCH: usize = 8;

/// Class decision from mean probabilities: class 1 only when it is strictly
/// more probable, so exact ties go to class 0.
pub fn predicted_class(mean: [f64; 2]) -> usize {
    usize::from(mean[1] > mean[0])
}

/// Mean of per-crop probability pairs, summed in the given order.
pub fn mean_probabilities(probs: &[[f64; 2]]) -> Result<[f64; 2]> {
    if probs.is_empty() {
        return Err(Error::invalid("no crop predictions to average"));
    }
    let n = probs.len() as f64;
    let s = probs.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    Ok([s[0] / n, s[1] / n])
}

/// Eval-mode class probabilities for every sliding-window crop of `image`.
pub fn crop_probabilities<T: Real>(model: &Model<T>, image: &Tensor<T>, w: usize, stride: usize) -> Result<Vec<[f64; 2]>> {
    let crops = sliding_window_crops(image, w, stride)?;
    let mut out = Vec::with_capacity(crops.len());
    for chunk in crops.chunks(EVAL_BATCH) {
        let refs: Vec<&Tensor<T>> = chunk.iter().collect();
        let batch = Tensor::concat(&refs, 0)?;
        let p = softmax(&model.predict(&batch)?)?;
        out.extend(p.data().chunks(2).map(|r| [r[0].as_f64(), r[1].as_f64()]));
    }
    Ok(out)
}

/// Subject-level evaluation: each subject's prediction is the argmax of its
/// crops' mean softmax probabilities. Subjects are processed in parallel and
/// results kept in input order.
pub fn evaluate_subjects<T: Real>(
    model: &Model<T>,
    records: &[FmriRecord<T>],
    w: usize,
    stride: usize,
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::invalid("no subjects to evaluate"));
    }
    let subjects: Vec<SubjectResult> = records
        .par_iter()
        .map(|r| {
            let probs = crop_probabilities(model, &r.image, w, stride)?;
            let mean = mean_probabilities(&probs)?;
            Ok(SubjectResult {
                id: r.id.clone(),
                label: r.label,
                p_asd: mean[1],
                predicted: predicted_class(mean),
                crops: probs.len(),
            })
        })
        .collect::<Result<_>>()?;
    let preds: Vec<usize> = subjects.iter().map(|s| s.predicted).collect();
    let labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    let mut report = f1_and_accuracy(&preds, &labels)?;
    report.subjects = subjects;
    Ok(report)
}

/// Mean negative log-probability of the true class over subjects.
pub fn subject_loss(report: &MetricsReport) -> f64 {
    let n = report.subjects.len().max(1) as f64;
    report
        .subjects
        .iter()
        .map(|s| {
            let p = if s.label == 1 { s.p_asd } else { 1.0 - s.p_asd };
            -p.max(1e-300).ln()
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::models::{build, micro_spec, Variant};
    use crate::tensor::Rng;

    #[test]
    fn averaging_and_ties() {
        assert_eq!(mean_probabilities(&[[0.2, 0.8]; 4]).unwrap(), [0.2, 0.8]);
        let m = mean_probabilities(&[[0.6, 0.4], [0.2, 0.8]]).unwrap();
        assert!((m[1] - 0.6).abs() < 1e-15);
        assert_eq!(predicted_class(m), 1);
        assert_eq!(predicted_class([0.5, 0.5]), 0);
        assert!(mean_probabilities(&[]).is_err());
    }

    fn records(n: usize) -> Vec<FmriRecord<f64>> {
        let mut rng = Rng::new(4);
        (0..n)
            .map(|i| FmriRecord {
                id: format!("s{i}"),
                image: rng.normal_tensor(&[1, 1, 6, 6, 6, 9], 0.0, 1.0).unwrap(),
                label: i % 2,
                split: Split::Val,
            })
            .collect()
    }

    #[test]
    fn evaluation_is_pure_and_order_free() {
        let m = build::<f64>(&micro_spec(Variant::Cnn3dMs, 2)).unwrap();
        let before = m.params.clone();
        let recs = records(4);
        let r = evaluate_subjects(&m, &recs, 3, 2).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(r.total(), 4);
        assert!(r.subjects.iter().all(|s| s.crops == 4));
        // Crop order does not change a subject's mean.
        let probs = crop_probabilities(&m, &recs[0].image, 3, 2).unwrap();
        let mut rev = probs.clone();
        rev.reverse();
        let (a, b) = (mean_probabilities(&probs).unwrap(), mean_probabilities(&rev).unwrap());
        assert!((a[1] - b[1]).abs() < 1e-15);
        assert!(evaluate_subjects(&m, &[], 3, 2).is_err());
    }
}
