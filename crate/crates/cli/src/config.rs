//! Run configuration: flat dotted keys, loaded from a TOML file and then
//! overridden by `--set key=value` and command flags, in that order.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use st4d::data::{SignalMode, Split, SynthConfig};
use st4d::models::{ModelSpec, Variant};
use st4d::training::{SelectBy, TrainConfig};
use st4d::DType;

use crate::CliError;

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("data.manifest", "dataset manifest read by train and eval"),
    ("data.stride", "sliding-window stride for validation and eval"),
    ("synth.out", "output directory for synth"),
    ("synth.train_per_class", "synthetic train subjects per class"),
    ("synth.val_per_class", "synthetic val subjects per class"),
    ("synth.test_per_class", "synthetic test subjects per class"),
    ("synth.extents", "synthetic volume extents XxYxZxT"),
    ("synth.period", "sampling period in seconds"),
    ("synth.mode", "class signal: amplitude or phase-scrambled"),
    ("synth.amplitude", "class signal amplitude (SNR knob)"),
    ("synth.frequency", "class-1 frequency in Hz for amplitude mode"),
    ("synth.noise_std", "Gaussian noise standard deviation"),
    ("synth.region", "signal ellipsoid semi-axis, fraction of extent"),
    ("synth.seed", "generator seed"),
    ("model.variant", "cnn3d-tc, cnn3d-ms, convgru-cnn3d or cnn4d"),
    ("model.initial_filters", "filters of the initial convolution"),
    ("model.growth_rate", "channels added per dense layer"),
    ("model.layers_per_block", "composite layers per dense block"),
    ("model.blocks", "dense blocks"),
    ("model.compression", "transition channel compression in (0, 1]"),
    ("model.batch_norm", "batch norm in composite and transition layers"),
    ("model.gru_hidden", "convGRU hidden channels"),
    ("model.kernel", "odd kernel extent per axis"),
    ("model.initial_stride", "stride of the initial convolution"),
    ("model.spatial", "crop spatial extents XxYxZ, or auto to follow the data"),
    ("model.seed", "parameter init seed"),
    ("train.dtype", "f32 or f64"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "crops per optimization step"),
    ("train.lr", "Adam learning rate"),
    ("train.beta1", "Adam beta1"),
    ("train.beta2", "Adam beta2"),
    ("train.eps", "Adam epsilon"),
    ("train.val_interval", "epochs between validations"),
    ("train.crop_len", "temporal crop length"),
    ("train.select_by", "best-model metric: f1 or accuracy"),
    ("train.seed", "shuffling and cropping seed"),
    ("train.out", "output directory for checkpoints, log and metrics"),
    ("eval.checkpoint", "checkpoint evaluated by eval"),
    ("eval.split", "split evaluated by eval: train, val or test"),
    ("gradcheck.max_entries", "entries checked per parameter, 0 for all"),
    ("gradcheck.tolerance", "largest accepted relative error"),
    ("gradcheck.extrapolate", "Richardson-extrapolate the finite differences (true/false)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub synth_out: PathBuf,
    pub synth: SynthConfig,
    /// `crop` is filled in from `spatial` and `train.crop_len` by [`RunConfig::model_spec`].
    pub model: ModelSpec,
    pub spatial: Option<[usize; 3]>,
    pub dtype: DType,
    pub train: TrainConfig,
    pub train_out: PathBuf,
    pub checkpoint: PathBuf,
    pub split: Split,
    pub max_entries: usize,
    pub tolerance: f64,
    pub extrapolate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::from("data/manifest.tsv"),
            synth_out: PathBuf::from("data"),
            synth: SynthConfig::default(),
            model: ModelSpec::new(Variant::ConvGruCnn3d),
            spatial: None,
            dtype: DType::F32,
            train: TrainConfig::default(),
            train_out: PathBuf::from("run"),
            checkpoint: PathBuf::from("run/best.ckpt"),
            split: Split::Test,
            max_entries: 8,
            tolerance: 1e-6,
            extrapolate: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse '{v}'")))
}

fn extents<const N: usize>(key: &str, v: &str) -> Result<[usize; N], CliError> {
    let parts: Vec<usize> = v.split('x').map(|p| parse(key, p)).collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| CliError::Usage(format!("{key}: expected {N} extents separated by 'x', got '{v}'")))
}

fn join(e: &[usize]) -> String {
    e.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn core<T, E: Display>(r: Result<T, E>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "data.manifest" => self.manifest = PathBuf::from(v),
            "data.stride" => self.train.eval_stride = parse(key, v)?,
            "synth.out" => self.synth_out = PathBuf::from(v),
            "synth.train_per_class" => self.synth.per_class[0] = parse(key, v)?,
            "synth.val_per_class" => self.synth.per_class[1] = parse(key, v)?,
            "synth.test_per_class" => self.synth.per_class[2] = parse(key, v)?,
            "synth.extents" => self.synth.extents = extents(key, v)?,
            "synth.period" => self.synth.period = parse(key, v)?,
            "synth.mode" => self.synth.mode = core(v.parse::<SignalMode>())?,
            "synth.amplitude" => self.synth.amplitude = parse(key, v)?,
            "synth.frequency" => self.synth.frequency = parse(key, v)?,
            "synth.noise_std" => self.synth.noise_std = parse(key, v)?,
            "synth.region" => self.synth.region = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "model.variant" => self.model.variant = core(v.parse::<Variant>())?,
            "model.initial_filters" => self.model.initial_filters = parse(key, v)?,
            "model.growth_rate" => self.model.growth_rate = parse(key, v)?,
            "model.layers_per_block" => self.model.layers_per_block = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.compression" => self.model.compression = parse(key, v)?,
            "model.batch_norm" => self.model.batch_norm = parse(key, v)?,
            "model.gru_hidden" => self.model.gru_hidden = parse(key, v)?,
            "model.kernel" => self.model.kernel = parse(key, v)?,
            "model.initial_stride" => self.model.initial_stride = parse(key, v)?,
            "model.spatial" => self.spatial = if v == "auto" { None } else { Some(extents(key, v)?) },
            "model.seed" => self.model.seed = parse(key, v)?,
            "train.dtype" => {
                self.dtype = match v {
                    "f32" => DType::F32,
                    "f64" => DType::F64,
                    _ => return Err(CliError::Usage(format!("{key}: expected f32 or f64, got '{v}'"))),
                }
            }
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.adam.lr = parse(key, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(key, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(key, v)?,
            "train.eps" => self.train.adam.eps = parse(key, v)?,
            "train.val_interval" => self.train.val_interval = parse(key, v)?,
            "train.crop_len" => self.train.crop_len = parse(key, v)?,
            "train.select_by" => self.train.select_by = core(v.parse::<SelectBy>())?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.out" => self.train_out = PathBuf::from(v),
            "eval.checkpoint" => self.checkpoint = PathBuf::from(v),
            "eval.split" => self.split = core(v.parse::<Split>())?,
            "gradcheck.max_entries" => self.max_entries = parse(key, v)?,
            "gradcheck.tolerance" => self.tolerance = parse(key, v)?,
            "gradcheck.extrapolate" => self.extrapolate = parse(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data.manifest" => self.manifest.display().to_string(),
            "data.stride" => self.train.eval_stride.to_string(),
            "synth.out" => self.synth_out.display().to_string(),
            "synth.train_per_class" => self.synth.per_class[0].to_string(),
            "synth.val_per_class" => self.synth.per_class[1].to_string(),
            "synth.test_per_class" => self.synth.per_class[2].to_string(),
            "synth.extents" => join(&self.synth.extents),
            "synth.period" => self.synth.period.to_string(),
            "synth.mode" => self.synth.mode.to_string(),
            "synth.amplitude" => self.synth.amplitude.to_string(),
            "synth.frequency" => self.synth.frequency.to_string(),
            "synth.noise_std" => self.synth.noise_std.to_string(),
            "synth.region" => self.synth.region.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "model.initial_filters" => self.model.initial_filters.to_string(),
            "model.growth_rate" => self.model.growth_rate.to_string(),
            "model.layers_per_block" => self.model.layers_per_block.to_string(),
            "model.blocks" => self.model.blocks.to_string(),
            "model.compression" => self.model.compression.to_string(),
            "model.batch_norm" => self.model.batch_norm.to_string(),
            "model.gru_hidden" => self.model.gru_hidden.to_string(),
            "model.kernel" => self.model.kernel.to_string(),
            "model.initial_stride" => self.model.initial_stride.to_string(),
            "model.spatial" => self.spatial.map_or("auto".to_string(), |s| join(&s)),
            "model.seed" => self.model.seed.to_string(),
            "train.dtype" => self.dtype.name().to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.adam.lr.to_string(),
            "train.beta1" => self.train.adam.beta1.to_string(),
            "train.beta2" => self.train.adam.beta2.to_string(),
            "train.eps" => self.train.adam.eps.to_string(),
            "train.val_interval" => self.train.val_interval.to_string(),
            "train.crop_len" => self.train.crop_len.to_string(),
            "train.select_by" => self.train.select_by.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.out" => self.train_out.display().to_string(),
            "eval.checkpoint" => self.checkpoint.display().to_string(),
            "eval.split" => self.split.to_string(),
            "gradcheck.max_entries" => self.max_entries.to_string(),
            "gradcheck.tolerance" => self.tolerance.to_string(),
            "gradcheck.extrapolate" => self.extrapolate.to_string(),
            _ => return None,
        })
    }

    /// Applies every key of a TOML document. Dotted keys and tables are
    /// equivalent: `model.kernel = 3` and `[model]\nkernel = 3` both work.
    pub fn apply_toml(&mut self, text: &str) -> Result<(), CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (k, v) in flat {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_toml(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_assignment(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got '{kv}'")))?;
        self.set(k.trim(), v.trim())
    }

    /// The model spec with its crop resolved against the data's spatial
    /// extents (used when `model.spatial` is auto).
    pub fn model_spec(&self, data_spatial: Option<[usize; 3]>) -> Result<ModelSpec, CliError> {
        let s = self.spatial.or(data_spatial).ok_or_else(|| {
            CliError::Usage("model.spatial is auto but the data extents are unknown".to_string())
        })?;
        let mut spec = self.model.clone();
        spec.crop = [s[0], s[1], s[2], self.train.crop_len];
        core(spec.validate())?;
        Ok(spec)
    }

    /// `key = value` for every key, in documented order.
    pub fn dump(&self) -> String {
        KEYS.iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("every key has a getter")))
            .collect()
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<(), CliError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let value = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => return Err(CliError::Usage(format!("{key}: unsupported value {other}"))),
        };
        out.push((key, value));
    }
    Ok(())
}

/// Help text listing every key with its default.
pub fn keys_help() -> String {
    let d = RunConfig::default();
    let mut s = String::from("Config keys (file < --set < flags), with defaults:\n");
    for (k, help) in KEYS {
        s.push_str(&format!("  {k:<24} {help} [default: {}]\n", d.get(k).expect("getter")));
    }
    s.push_str(
        "\nEnvironment:\n  ST4D_CONFIG            config file used when --config is absent\n  RAYON_NUM_THREADS      worker threads for kernels and evaluation\n",
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let d = RunConfig::default();
        for (k, _) in KEYS {
            let mut c = RunConfig::default();
            c.set(k, &d.get(k).unwrap()).unwrap();
            assert_eq!(c, d, "{k}");
        }
    }

    #[test]
    fn toml_tables_and_dotted_keys_agree() {
        let mut a = RunConfig::default();
        a.apply_toml("model.growth_rate = 4\ntrain.lr = 0.001\nsynth.extents = \"8x8x8x32\"").unwrap();
        let mut b = RunConfig::default();
        b.apply_toml("[model]\ngrowth_rate = 4\n[train]\nlr = 1e-3\n[synth]\nextents = \"8x8x8x32\"").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.growth_rate, 4);
        assert_eq!(a.synth.extents, [8, 8, 8, 32]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_toml("model.growth = 4").is_err());
        assert!(c.apply_assignment("nope=1").is_err());
        assert!(c.apply_assignment("model.variant=cnn5d").is_err());
        assert!(c.apply_assignment("train.epochs").is_err());
    }

    #[test]
    fn spatial_resolution() {
        let mut c = RunConfig::default();
        assert!(c.model_spec(None).is_err());
        assert_eq!(c.model_spec(Some([16, 16, 16])).unwrap().crop, [16, 16, 16, 15]);
        c.set("model.spatial", "8x8x8").unwrap();
        assert_eq!(c.model_spec(Some([16, 16, 16])).unwrap().crop, [8, 8, 8, 15]);
    }
}
