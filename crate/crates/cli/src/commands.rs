use std::fs;
use std::io::Read;
use std::path::Path;

use st4d::autodiff::{GradFault, GradcheckConfig};
use st4d::data::{generate_synthetic, read_header, FmriRecord, Manifest, Split, MANIFEST_NAME};
use st4d::models::{build, gradcheck_model, micro_spec, Model, Variant};
use st4d::training::{
    evaluate_subjects, inspect_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, MetricsReport,
    Trainer,
};
use st4d::{DType, Real};

use crate::config::RunConfig;
use crate::CliError;

/// Op tags accepted by `gradcheck --inject-fault`.
const FAULT_TAGS: &[&str] = &[
    "add",
    "add_scalar",
    "avg_pool",
    "batch_norm",
    "concat",
    "conv",
    "fully_connected",
    "global_avg_pool",
    "mul",
    "narrow",
    "relu",
    "reshape",
    "sigmoid",
    "softmax_cross_entropy",
    "sub",
    "tanh",
];

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(st4d::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let (manifest, report) = generate_synthetic(&cfg.synth, &cfg.synth_out)?;
    println!("manifest={}", cfg.synth_out.join(MANIFEST_NAME).display());
    for split in Split::ALL {
        let c = manifest.counts(split);
        println!("split={split} control={} asd={}", c.control, c.asd);
    }
    println!(
        "region_voxels={} region_variance_control={:.6} region_variance_asd={:.6}",
        report.region_voxels, report.region_variance[0], report.region_variance[1]
    );
    Ok(())
}

fn data_spatial<T: Real>(manifest: &Manifest, records: &[FmriRecord<T>]) -> Option<[usize; 3]> {
    let dims = manifest
        .shape
        .clone()
        .or_else(|| records.first().map(|r| r.image.dims().to_vec()))?;
    (dims.len() == 6).then(|| [dims[2], dims[3], dims[4]])
}

fn print_report(split: Split, report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{split}: {} subjects, accuracy {:.4}, F1 {:.4} (TP {} FP {} TN {} FN {})\n",
        report.total(),
        report.accuracy,
        report.f1,
        report.tp,
        report.fp,
        report.tn,
        report.fn_
    ));
    for s in &report.subjects {
        out.push_str(&format!(
            "subject id={} label={} predicted={} p_asd={:.6} crops={}\n",
            s.id, s.label, s.predicted, s.p_asd, s.crops
        ));
    }
    out.push_str(&format!(
        "metrics split={split} subjects={} accuracy={} f1={} tp={} fp={} tn={} fn={}\n",
        report.total(),
        report.accuracy,
        report.f1,
        report.tp,
        report.fp,
        report.tn,
        report.fn_
    ));
    out
}

fn train_typed<T: Real>(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let manifest = Manifest::load(&cfg.manifest)?;
    let train = manifest.load_split::<T>(Split::Train)?;
    let val = manifest.load_split::<T>(Split::Val)?;
    let test = manifest.load_split::<T>(Split::Test)?;
    let spec = cfg.model_spec(data_spatial(&manifest, &train))?;
    let trainer = match resume {
        Some(p) => {
            let ck = load_checkpoint_for::<T>(p, &spec)?;
            Trainer::resume(ck.model, ck.state, cfg.train.clone())
        }
        None => Trainer::new(build::<T>(&spec)?, cfg.train.clone())?,
    };
    println!(
        "variant={} params={} dtype={} epochs={}",
        spec.variant,
        trainer.model.param_count(),
        T::DTYPE.name(),
        cfg.train.epochs
    );
    let mut trainer = trainer.on_log(|r| println!("{r}"));
    trainer.run(&train, &val)?;

    let out = &cfg.train_out;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let best = trainer.best_model();
    save_checkpoint(out.join("last.ckpt"), &trainer.model, &trainer.state)?;
    save_checkpoint(out.join("best.ckpt"), &best, &trainer.state)?;
    let log = trainer.log_text();
    fs::write(out.join("train.log"), log).map_err(|e| io(out, e))?;
    if let Some(b) = &trainer.state.best {
        println!("best epoch={} {}={}", b.epoch, cfg.train.select_by, b.metric);
    }
    if test.is_empty() {
        println!("no test subjects; skipping test evaluation");
        return Ok(());
    }
    let report = evaluate_subjects(&best, &test, cfg.train.crop_len, cfg.train.eval_stride)?;
    let text = print_report(Split::Test, &report);
    print!("{text}");
    fs::write(out.join("metrics.txt"), text).map_err(|e| io(out, e))?;
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, resume),
        DType::F64 => train_typed::<f64>(cfg, resume),
    }
}

fn eval_model<T: Real>(model: &Model<T>, cfg: &RunConfig) -> Result<(), CliError> {
    let manifest = Manifest::load(&cfg.manifest)?;
    let records = manifest.load_split::<T>(cfg.split)?;
    let c = model.spec.crop;
    for r in &records {
        let d = r.image.dims();
        if d.len() != 6 || d[2..5] != c[..3] || d[5] < c[3] {
            return Err(CliError::Core(st4d::Error::Shape(format!(
                "subject {} has image {}, the checkpoint model needs spatial {}x{}x{} and >= {} time points",
                r.id,
                r.image.shape(),
                c[0],
                c[1],
                c[2],
                c[3]
            ))));
        }
    }
    let report = evaluate_subjects(model, &records, c[3], cfg.train.eval_stride)?;
    println!("variant={} window={} stride={}", model.spec.variant, c[3], cfg.train.eval_stride);
    print!("{}", print_report(cfg.split, &report));
    Ok(())
}

pub fn eval(cfg: &RunConfig, variant: Option<&str>) -> Result<(), CliError> {
    let info = inspect_checkpoint(&cfg.checkpoint)?;
    let get = |k: &str| info.header.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    if let Some(v) = variant {
        let want: Variant = v.parse()?;
        let have = get("spec.variant").unwrap_or("?");
        if have != want.to_string() {
            return Err(CliError::Core(st4d::Error::CheckpointMismatch(format!(
                "{} holds a {have} model, not {want}",
                cfg.checkpoint.display()
            ))));
        }
    }
    match get("dtype") {
        Some("f64") => eval_model(&load_checkpoint::<f64>(&cfg.checkpoint)?.model, cfg),
        _ => eval_model(&load_checkpoint::<f32>(&cfg.checkpoint)?.model, cfg),
    }
}

pub fn gradcheck(cfg: &RunConfig, variant: Option<&str>, fault: Option<&str>) -> Result<(), CliError> {
    let variants = match variant {
        Some(v) => vec![v.parse::<Variant>()?],
        None => Variant::ALL.to_vec(),
    };
    let fault = match fault {
        None => None,
        Some(tag) => {
            let tag = FAULT_TAGS.iter().find(|t| **t == tag).ok_or_else(|| {
                CliError::Usage(format!("unknown op tag '{tag}'; expected one of {}", FAULT_TAGS.join(", ")))
            })?;
            Some(GradFault { tag, factor: 1.5 })
        }
    };
    let config = GradcheckConfig {
        tolerance: cfg.tolerance,
        max_entries: (cfg.max_entries > 0).then_some(cfg.max_entries),
        seed: cfg.model.seed,
        fault,
        extrapolate: cfg.extrapolate,
    };
    let mut failed = Vec::new();
    for v in variants {
        let spec = micro_spec(v, cfg.model.seed);
        let report = gradcheck_model(&spec, &config)?;
        let checked: usize = report.params.iter().map(|p| p.checked).sum();
        println!(
            "variant={v} crop={}x{}x{}x{} params={} entries={checked} extrapolate={} max_rel_err={:.3e} tolerance={:e} passed={}",
            spec.crop[0],
            spec.crop[1],
            spec.crop[2],
            spec.crop[3],
            report.params.len(),
            config.extrapolate,
            report.max_rel_err(),
            report.tolerance,
            report.passed()
        );
        for p in report.failures() {
            println!("  failed param={} max_rel_err={:.3e} non_finite={}", p.name, p.max_rel_err, p.non_finite);
        }
        if !report.passed() {
            failed.push(v.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn join(dims: &[usize]) -> String {
    dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn inspect(paths: &[std::path::PathBuf]) -> Result<(), CliError> {
    for path in paths {
        let mut magic = [0u8; 4];
        let mut f = fs::File::open(path).map_err(|e| io(path, e))?;
        let n = f.read(&mut magic).map_err(|e| io(path, e))?;
        match &magic[..n] {
            b"T4DF" => {
                let h = read_header(path)?;
                println!(
                    "t4df path={} version={} dtype={} rank={} dims={} payload_bytes={}",
                    path.display(),
                    h.version,
                    h.dtype.name(),
                    h.dims.len(),
                    join(&h.dims),
                    h.payload_len()
                );
            }
            b"T4CK" => {
                let info = inspect_checkpoint(path)?;
                println!("checkpoint path={}", path.display());
                for (k, v) in &info.header {
                    println!("{k}={v}");
                }
                for (name, dtype, dims) in &info.tensors {
                    println!("tensor name={name} dtype={} dims={}", dtype.name(), join(dims));
                }
            }
            _ => {
                let m = Manifest::load(path)?;
                println!(
                    "manifest path={} entries={} period={} shape={}",
                    path.display(),
                    m.entries.len(),
                    m.period,
                    m.shape.as_deref().map_or("unspecified".to_string(), join)
                );
                for split in Split::ALL {
                    let c = m.counts(split);
                    println!("split={split} control={} asd={}", c.control, c.asd);
                }
            }
        }
    }
    Ok(())
}
