//! Seeded synthetic 4D datasets standing in for real resting-state scans.
//!
//! Every image is unit Gaussian noise. Inside a centred ellipsoid the
//! subject additionally carries a sinusoid with a per-subject random phase:
//!
//! * [`SignalMode::Amplitude`]: class 1 gets `amplitude * sin(2 pi f t + phi)`,
//!   class 0 gets nothing. Temporal variance separates the classes.
//! * [`SignalMode::PhaseScrambled`]: both classes get the same amplitude, class
//!   0 at one cycle and class 1 at two cycles per crop window. Every window
//!   then holds whole cycles, so the voxel-wise temporal mean and standard
//!   deviation have the same distribution in both classes; only the temporal
//!   structure differs.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::crops::CROP_LEN;
use super::manifest::{Entry, FmriRecord, Manifest, Split};
use super::t4df::save_tensor;
use crate::error::{Error, Result};
use crate::tensor::{Real, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalMode {
    Amplitude,
    PhaseScrambled,
}

impl SignalMode {
    pub fn name(self) -> &'static str {
        match self {
            SignalMode::Amplitude => "amplitude",
            SignalMode::PhaseScrambled => "phase-scrambled",
        }
    }
}

impl fmt::Display for SignalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(SignalMode::Amplitude),
            "phase-scrambled" => Ok(SignalMode::PhaseScrambled),
            _ => Err(Error::invalid(format!(
                "unknown signal mode '{s}'; expected amplitude or phase-scrambled"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Subjects per class in each of train, val and test.
    pub per_class: [usize; 3],
    /// `[X, Y, Z, T]`.
    pub extents: [usize; 4],
    pub period: f64,
    pub mode: SignalMode,
    pub amplitude: f64,
    /// Signal frequency in Hz for [`SignalMode::Amplitude`].
    pub frequency: f64,
    pub noise_std: f64,
    /// Ellipsoid semi-axes as a fraction of each spatial extent.
    pub region: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class: [8, 4, 4],
            extents: [16, 16, 16, 64],
            period: 2.0,
            mode: SignalMode::Amplitude,
            amplitude: 1.5,
            frequency: 0.05,
            noise_std: 1.0,
            region: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class.contains(&0) {
            return Err(Error::invalid(format!(
                "subjects per class must be >= 1 in every split, got {:?}",
                self.per_class
            )));
        }
        if self.extents.contains(&0) {
            return Err(Error::invalid(format!("extents must be >= 1, got {:?}", self.extents)));
        }
        if self.extents[3] < CROP_LEN {
            return Err(Error::invalid(format!(
                "need at least {CROP_LEN} time points, got {}",
                self.extents[3]
            )));
        }
        let finite_nonneg = [
            ("amplitude", self.amplitude),
            ("noise_std", self.noise_std),
            ("frequency", self.frequency),
        ];
        for (name, v) in finite_nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::invalid(format!("period must be positive, got {}", self.period)));
        }
        if !(self.region > 0.0 && self.region <= 0.5) {
            return Err(Error::invalid(format!("region must be in (0, 0.5], got {}", self.region)));
        }
        Ok(())
    }

    /// Frequencies in Hz carried by class 0 and class 1.
    pub fn class_frequencies(&self) -> [Option<f64>; 2] {
        match self.mode {
            SignalMode::Amplitude => [None, Some(self.frequency)],
            SignalMode::PhaseScrambled => {
                let window = CROP_LEN as f64 * self.period;
                [Some(1.0 / window), Some(2.0 / window)]
            }
        }
    }

    pub fn subject_count(&self) -> usize {
        2 * self.per_class.iter().sum::<usize>()
    }
}

/// In-region statistics gathered while generating.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub region_voxels: usize,
    /// Mean in-region temporal variance per class.
    pub region_variance: [f64; 2],
}

impl SynthReport {
    pub fn variance_margin(&self) -> f64 {
        self.region_variance[1] - self.region_variance[0]
    }
}

/// Row-major mask over `X, Y, Z`.
pub fn region_mask(extents: [usize; 4], region: f64) -> Vec<bool> {
    let [x, y, z, _] = extents;
    let mut mask = Vec::with_capacity(x * y * z);
    let axis = |i: usize, d: usize| ((i as f64 + 0.5) - d as f64 / 2.0) / (region * d as f64);
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let r = axis(i, x).powi(2) + axis(j, y).powi(2) + axis(k, z).powi(2);
                mask.push(r <= 1.0);
            }
        }
    }
    mask
}

fn subject_plan(config: &SynthConfig) -> Vec<(String, usize, Split)> {
    let mut out = Vec::new();
    for (split, &n) in Split::ALL.iter().zip(&config.per_class) {
        for _ in 0..n {
            for label in 0..2 {
                out.push((format!("sub{:04}", out.len()), label, *split));
            }
        }
    }
    out
}

fn subject_image<T: Real>(config: &SynthConfig, mask: &[bool], label: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    let [x, y, z, t] = config.extents;
    let mut data = Vec::with_capacity(x * y * z * t);
    let phase = 2.0 * PI * rng.uniform();
    let signal: Option<Vec<f64>> = config.class_frequencies()[label].map(|f| {
        (0..t)
            .map(|s| config.amplitude * (2.0 * PI * f * s as f64 * config.period + phase).sin())
            .collect()
    });
    for &inside in mask {
        for s in 0..t {
            let mut v = config.noise_std * rng.normal();
            if inside {
                if let Some(sig) = &signal {
                    v += sig[s];
                }
            }
            data.push(T::of_f64(v));
        }
    }
    Tensor::from_data(&[1, 1, x, y, z, t], data)
}

fn region_variance<T: Real>(img: &Tensor<T>, mask: &[bool], t: usize) -> f64 {
    let mut total = 0.0;
    for (series, _) in img.data().chunks(t).zip(mask).filter(|(_, &m)| m) {
        let mean = series.iter().map(|v| v.as_f64()).sum::<f64>() / t as f64;
        total += series.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / t as f64;
    }
    total
}

/// Generates every subject in memory, in manifest order.
pub fn generate_records<T: Real>(config: &SynthConfig) -> Result<(Vec<FmriRecord<T>>, SynthReport)> {
    config.validate()?;
    let mask = region_mask(config.extents, config.region);
    let region_voxels = mask.iter().filter(|&&m| m).count();
    let root = Rng::new(config.seed);
    let mut records = Vec::new();
    let mut var = [0.0; 2];
    let mut n = [0usize; 2];
    for (i, (id, label, split)) in subject_plan(config).into_iter().enumerate() {
        let mut rng = root.fork(i as u64);
        let image = subject_image::<T>(config, &mask, label, &mut rng)?;
        if region_voxels > 0 {
            var[label] += region_variance(&image, &mask, config.extents[3]) / region_voxels as f64;
            n[label] += 1;
        }
        records.push(FmriRecord { id, image, label, split });
    }
    let report = SynthReport {
        region_voxels,
        region_variance: [var[0] / n[0].max(1) as f64, var[1] / n[1].max(1) as f64],
    };
    Ok((records, report))
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `manifest.tsv` and one f32 T4DF file per subject under `dir`.
pub fn generate_synthetic(config: &SynthConfig, dir: impl AsRef<Path>) -> Result<(Manifest, SynthReport)> {
    let dir = dir.as_ref();
    let (records, report) = generate_records::<f32>(config)?;
    let sub = dir.join("subjects");
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let [x, y, z, t] = config.extents;
    let mut manifest = Manifest::new(Some(vec![1, 1, x, y, z, t]), config.period);
    for r in &records {
        let rel = PathBuf::from("subjects").join(format!("{}.t4df", r.id));
        save_tensor(dir.join(&rel), &r.image)?;
        manifest.entries.push(Entry {
            path: rel,
            id: r.id.clone(),
            label: r.label,
            split: r.split,
        });
    }
    manifest.save(dir.join(MANIFEST_NAME))?;
    manifest.base = dir.to_path_buf();
    Ok((manifest, report))
}
