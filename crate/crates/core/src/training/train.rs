use std::fmt;
use std::str::FromStr;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::eval::{evaluate_subjects, subject_loss};
use super::metrics::{f1_and_accuracy, MetricsReport};
use crate::autodiff::{Graph, ParamStore};
use crate::data::{random_temporal_crop, FmriRecord, CROP_LEN, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::{softmax, Mode};
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectBy {
    F1,
    Accuracy,
}

impl FromStr for SelectBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(SelectBy::F1),
            "accuracy" => Ok(SelectBy::Accuracy),
            _ => Err(Error::invalid(format!("unknown selection metric '{s}'; expected f1 or accuracy"))),
        }
    }
}

impl fmt::Display for SelectBy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectBy::F1 => "f1",
            SelectBy::Accuracy => "accuracy",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub val_interval: usize,
    pub crop_len: usize,
    /// Sliding-window stride for validation.
    pub eval_stride: usize,
    pub select_by: SelectBy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 10,
            adam: AdamConfig::default(),
            val_interval: 5,
            crop_len: CROP_LEN,
            eval_stride: DEFAULT_STRIDE,
            select_by: SelectBy::F1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("val_interval", self.val_interval),
            ("crop_len", self.crop_len),
            ("eval_stride", self.eval_stride),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("train.{name} must be >= 1")));
            }
        }
        if self.val_interval > self.epochs {
            return Err(Error::invalid(format!(
                "train.val_interval ({}) exceeds train.epochs ({})",
                self.val_interval, self.epochs
            )));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot<T: Real> {
    pub epoch: usize,
    pub metric: f64,
    /// Subject-level validation cross-entropy; the lower one wins a metric tie.
    pub loss: f64,
    pub params: ParamStore<T>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub adam: AdamState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Option<BestSnapshot<T>>,
    pub rng: Rng,
}

impl<T: Real> TrainState<T> {
    pub fn new(params: &ParamStore<T>, seed: u64) -> Result<Self> {
        Ok(TrainState {
            adam: AdamState::new(params)?,
            epoch: 0,
            best: None,
            rng: Rng::new(seed),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
    pub f1: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} split={} loss={:.6} accuracy={:.4} f1={:.4}",
            self.epoch, self.split, self.loss, self.accuracy, self.f1
        )
    }
}

pub struct Trainer<'a, T: Real> {
    pub model: Model<T>,
    pub state: TrainState<T>,
    pub config: TrainConfig,
    pub log: Vec<LogRecord>,
    /// Per-step training losses, in order.
    pub losses: Vec<f64>,
    observer: Option<Box<dyn FnMut(&LogRecord) + 'a>>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(&model.params, config.seed)?;
        Ok(Self::resume(model, state, config))
    }

    pub fn resume(model: Model<T>, state: TrainState<T>, config: TrainConfig) -> Self {
        Trainer {
            model,
            state,
            config,
            log: Vec::new(),
            losses: Vec::new(),
            observer: None,
        }
    }

    /// Called with each log record as it is produced.
    pub fn on_log(mut self, f: impl FnMut(&LogRecord) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    fn emit(&mut self, rec: LogRecord) {
        if let Some(f) = self.observer.as_mut() {
            f(&rec);
        }
        self.log.push(rec);
    }

    fn check_inputs(&self, train: &[FmriRecord<T>], val: &[FmriRecord<T>]) -> Result<()> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid(format!(
                "training needs nonempty train and val splits, got {} and {}",
                train.len(),
                val.len()
            )));
        }
        let crop = self.model.spec.crop;
        if crop[3] != self.config.crop_len {
            return Err(Error::shape(format!(
                "model expects {}-step crops, training uses {}",
                crop[3], self.config.crop_len
            )));
        }
        for r in train.iter().chain(val) {
            let d = r.image.dims();
            if d.len() != 6 || d[..5] != [1, 1, crop[0], crop[1], crop[2]] || d[5] < crop[3] {
                return Err(Error::shape(format!(
                    "subject {} has image {}, model needs [1, 1, {}, {}, {}, >= {}]",
                    r.id,
                    r.image.shape(),
                    crop[0],
                    crop[1],
                    crop[2],
                    crop[3]
                )));
            }
            if r.label > 1 {
                return Err(Error::invalid(format!("subject {} has label {}", r.id, r.label)));
            }
        }
        Ok(())
    }

    /// One optimization step on a stacked crop batch; returns the loss and
    /// the training-mode predictions.
    pub fn step(&mut self, batch: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<usize>)> {
        let mut g = Graph::new();
        let vars = self.model.params.bind(&mut g);
        let out = self.model.forward(&mut g, &vars, batch, Mode::Train)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        let loss_value = g.value(loss).item()?.as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.state.adam.step + 1)));
        }
        let p = softmax(g.value(out.logits))?;
        let preds = p.data().chunks(2).map(|r| usize::from(r[1] > r[0])).collect();
        let mut grads = g.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.take(v)).collect();
        adam_step(&mut self.model.params, &grads, &mut self.state.adam, &self.config.adam)?;
        self.model.apply_running_updates(out.running_updates)?;
        Ok((loss_value, preds))
    }

    fn train_epoch(&mut self, train: &[FmriRecord<T>]) -> Result<LogRecord> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.state.rng.shuffle(&mut order);
        let mut crops = Vec::with_capacity(order.len());
        for &i in &order {
            crops.push(random_temporal_crop(&train[i].image, &mut self.state.rng, self.config.crop_len)?);
        }
        let (mut loss_sum, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        for (chunk, idx) in crops.chunks(self.config.batch_size).zip(order.chunks(self.config.batch_size)) {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let batch = Tensor::concat(&refs, 0)?;
            let y: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let (loss, p) = self.step(&batch, &y)?;
            self.losses.push(loss);
            loss_sum += loss * y.len() as f64;
            preds.extend(p);
            labels.extend(y);
        }
        let m = f1_and_accuracy(&preds, &labels)?;
        self.state.epoch += 1;
        Ok(LogRecord {
            epoch: self.state.epoch,
            split: "train",
            loss: loss_sum / labels.len() as f64,
            accuracy: m.accuracy,
            f1: m.f1,
        })
    }

    pub fn validate(&self, val: &[FmriRecord<T>]) -> Result<MetricsReport> {
        evaluate_subjects(&self.model, val, self.config.crop_len, self.config.eval_stride)
    }

    /// Trains until `self.config.epochs` epochs are complete (counting
    /// epochs already done by a resumed state).
    pub fn run(&mut self, train: &[FmriRecord<T>], val: &[FmriRecord<T>]) -> Result<()> {
        self.run_until(train, val, self.config.epochs)
    }

    /// Trains until `epoch` epochs are complete.
    pub fn run_until(&mut self, train: &[FmriRecord<T>], val: &[FmriRecord<T>], epoch: usize) -> Result<()> {
        self.check_inputs(train, val)?;
        while self.state.epoch < epoch.min(self.config.epochs) {
            let rec = self.train_epoch(train)?;
            self.emit(rec);
            if self.state.epoch % self.config.val_interval == 0 {
                let report = self.validate(val)?;
                let metric = match self.config.select_by {
                    SelectBy::F1 => report.f1,
                    SelectBy::Accuracy => report.accuracy,
                };
                let loss = subject_loss(&report);
                let better = self
                    .state
                    .best
                    .as_ref()
                    .is_none_or(|b| metric > b.metric || (metric == b.metric && loss < b.loss));
                if better {
                    self.state.best = Some(BestSnapshot {
                        epoch: self.state.epoch,
                        metric,
                        loss,
                        params: self.model.params.clone(),
                    });
                }
                let rec = LogRecord {
                    epoch: self.state.epoch,
                    split: "val",
                    loss,
                    accuracy: report.accuracy,
                    f1: report.f1,
                };
                self.emit(rec);
            }
        }
        Ok(())
    }

    /// The model carrying the best validated parameters (or the current
    /// ones if no validation has run).
    pub fn best_model(&self) -> Model<T> {
        let mut m = self.model.clone();
        if let Some(b) = &self.state.best {
            m.params = b.params.clone();
        }
        m
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|r| format!("{r}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::models::{build, micro_spec, Variant};

    fn records(n: usize, t: usize, seed: u64) -> Vec<FmriRecord<f64>> {
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| FmriRecord {
                id: format!("s{i}"),
                image: rng.normal_tensor(&[1, 1, 6, 6, 6, t], 0.0, 1.0).unwrap(),
                label: i % 2,
                split: Split::Train,
            })
            .collect()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            val_interval: 1,
            crop_len: 3,
            eval_stride: 2,
            ..Default::default()
        }
    }

    #[test]
    fn one_epoch_twenty_subjects_two_steps() {
        let m = build::<f64>(&micro_spec(Variant::Cnn3dMs, 1)).unwrap();
        let mut t = Trainer::new(m, cfg(1)).unwrap();
        t.run(&records(20, 5, 1), &records(2, 5, 2)).unwrap();
        assert_eq!(t.state.adam.step, 2);
        assert_eq!(t.losses.len(), 2);
        assert_eq!(t.log.iter().filter(|r| r.split == "train").count(), 1);
    }

    #[test]
    fn empty_splits_rejected_before_any_step() {
        let m = build::<f64>(&micro_spec(Variant::Cnn3dMs, 1)).unwrap();
        let mut t = Trainer::new(m, cfg(1)).unwrap();
        assert!(t.run(&records(4, 5, 1), &[]).is_err());
        assert!(t.run(&[], &records(4, 5, 1)).is_err());
        assert!(t.run(&records(4, 2, 1), &records(2, 5, 1)).is_err());
        assert_eq!(t.state.adam.step, 0);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let m = build::<f64>(&micro_spec(Variant::Cnn4d, 3)).unwrap();
            let mut t = Trainer::new(m, cfg(2)).unwrap();
            t.run(&records(6, 5, 1), &records(2, 5, 2)).unwrap();
            (t.losses, t.model.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(pa, pb);
    }

    #[test]
    fn best_snapshot_dominates_logged_validation() {
        let m = build::<f64>(&micro_spec(Variant::Cnn3dTc, 3)).unwrap();
        let mut t = Trainer::new(m, cfg(4)).unwrap();
        t.run(&records(6, 5, 1), &records(4, 5, 2)).unwrap();
        let best = t.state.best.as_ref().unwrap();
        for r in t.log.iter().filter(|r| r.split == "val") {
            assert!(best.metric >= r.f1);
            // Ties go to the lower validation loss, then the earlier epoch.
            assert!(r.f1 < best.metric || r.loss >= best.loss);
            if r.epoch < best.epoch {
                assert!(r.f1 < best.metric || r.loss > best.loss);
            }
            if r.epoch == best.epoch {
                assert_eq!(r.loss, best.loss);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.val_interval = 600;
        assert!(c.validate().is_err());
        c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
