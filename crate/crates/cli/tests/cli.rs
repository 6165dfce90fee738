use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn st4d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_st4d"))
        .current_dir(dir)
        .env_remove("ST4D_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MICRO: &[&str] = &[
    "--set",
    "model.initial_filters=3",
    "--set",
    "model.growth_rate=2",
    "--set",
    "model.layers_per_block=2",
    "--set",
    "model.blocks=2",
    "--set",
    "model.gru_hidden=2",
    "--set",
    "train.val_interval=1",
];

fn tiny_data(dir: &Path, t: usize) {
    let extents = format!("6x6x6x{t}");
    let o = st4d(
        dir,
        &["synth", "--out", "d", "--extents", &extents, "--subjects-per-class", "2", "--val-per-class", "1", "--test-per-class", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--manifest", "d/manifest.tsv"];
    args.extend_from_slice(MICRO);
    args.extend_from_slice(extra);
    st4d(dir, &args)
}

#[test]
fn synth_default_splits_are_balanced() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["synth", "--out", "d", "--extents", "4x4x4x16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("split=train control=8 asd=8"), "{out}");
    assert!(out.contains("split=val control=4 asd=4"));
    assert!(out.contains("split=test control=4 asd=4"));
}

#[test]
fn synth_same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = st4d(tmp.path(), &["synth", "--out", out, "--seed", "7", "--extents", "4x4x4x16"]);
        assert!(o.status.success());
    }
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(fs::read(a.join("manifest.tsv")).unwrap(), fs::read(b.join("manifest.tsv")).unwrap());
    let mut n = 0;
    for e in fs::read_dir(a.join("subjects")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("subjects").join(&name)).unwrap(),
            fs::read(b.join("subjects").join(&name)).unwrap()
        );
        n += 1;
    }
    assert_eq!(n, 32);
}

#[test]
fn synth_zero_subjects_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["synth", "--out", "d", "--subjects-per-class", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("subjects per class"), "{}", stderr(&o));
}

#[test]
fn train_one_epoch_then_eval_and_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_data(dir, 40);
    let o = train(dir, &["--epochs", "1", "--out", "r"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(dir.join("r/train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("split=train")).count(), 1);
    let metrics = fs::read_to_string(dir.join("r/metrics.txt")).unwrap();
    let line = metrics.lines().find(|l| l.starts_with("metrics ")).unwrap();
    let f1: f64 = line.split(' ').find_map(|kv| kv.strip_prefix("f1=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    // T = 40, w = 15: 26 crops at stride 1, 4 at stride 8.
    for (stride, crops) in [("1", "crops=26"), ("8", "crops=4")] {
        let o = st4d(
            dir,
            &["eval", "--checkpoint", "r/best.ckpt", "--manifest", "d/manifest.tsv", "--split", "val", "--stride", stride],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).lines().filter(|l| l.starts_with("subject ")).all(|l| l.ends_with(crops)));
    }

    let o = st4d(dir, &["eval", "--checkpoint", "r/best.ckpt", "--manifest", "d/manifest.tsv", "--variant", "cnn4d"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));

    let o = st4d(dir, &["inspect", "r/last.ckpt", "d/subjects/sub0000.t4df", "d/manifest.tsv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("spec.variant=convgru-cnn3d"));
    assert!(out.contains("tensor name=param.head.fc.weight"));
    assert!(out.contains("dims=1x1x6x6x6x40"));
    assert!(out.contains("split=val control=1 asd=1"));
}

#[test]
fn resume_requires_matching_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_data(dir, 20);
    assert!(train(dir, &["--epochs", "1", "--out", "r"]).status.success());
    let o = train(dir, &["--epochs", "2", "--out", "r2", "--resume", "r/last.ckpt", "--set", "model.growth_rate=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("growth_rate"), "{}", stderr(&o));
    let o = train(dir, &["--epochs", "2", "--out", "r2", "--resume", "r/last.ckpt"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch=2 split=train"));
    assert!(!stdout(&o).contains("epoch=1 split=train"));
}

#[test]
fn f64_runs_are_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_data(dir, 20);
    for out in ["a", "b"] {
        let o = train(dir, &["--epochs", "2", "--dtype", "f64", "--out", out, "--variant", "cnn4d"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(dir.join("a/last.ckpt")).unwrap(), fs::read(dir.join("b/last.ckpt")).unwrap());
}

#[test]
fn unknown_variant_lists_all_four() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["train", "--variant", "cnn5d"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for v in ["cnn3d-tc", "cnn3d-ms", "convgru-cnn3d", "cnn4d"] {
        assert!(err.contains(v), "{err}");
    }
}

#[test]
fn missing_manifest_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["train", "--manifest", "nope.tsv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_every_variant_and_fault_hook() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["gradcheck", "--max-entries", "4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with("passed=true")).count(), 4);

    let o = st4d(tmp.path(), &["gradcheck", "--variant", "cnn4d", "--max-entries", "4", "--inject-fault", "conv"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("passed=false"));

    let o = st4d(tmp.path(), &["gradcheck", "--variant", "cnn2d"]);
    assert_eq!(o.status.code(), Some(1));
    let o = st4d(tmp.path(), &["gradcheck", "--inject-fault", "bogus"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bench_rows_and_empty_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["bench", "--spec", "rank=4 in=1 out=4 input=4x4x4x4 kernel=1 pad=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("exact=true") && out.contains("pass=true"), "{out}");

    fs::write(tmp.path().join("empty.txt"), "# nothing\n").unwrap();
    let o = st4d(tmp.path(), &["bench", "--sweep", "empty.txt"]);
    assert!(o.status.success());
    assert!(stdout(&o).is_empty());

    let o = st4d(tmp.path(), &["bench", "--spec", "rank=4 input=4x4x4"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn flags_override_set_overrides_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("c.toml"), "train.epochs = 7\ntrain.lr = 0.01\n[model]\ngrowth_rate = 5\n").unwrap();
    let o = st4d(dir, &["--config", "c.toml", "--set", "train.lr=0.02", "show-config"]);
    let out = stdout(&o);
    assert!(out.contains("train.epochs = 7"), "{out}");
    assert!(out.contains("train.lr = 0.02"));
    assert!(out.contains("model.growth_rate = 5"));

    // Flags beat --set, which beats the file; ST4D_CONFIG stands in for --config.
    let o = Command::new(env!("CARGO_BIN_EXE_st4d"))
        .current_dir(dir)
        .env("ST4D_CONFIG", "c.toml")
        .args(["train", "--set", "train.epochs=9", "--epochs", "0", "--manifest", "nope.tsv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_st4d"))
        .current_dir(dir)
        .env("ST4D_CONFIG", "c.toml")
        .args(["--set", "train.epochs=9", "show-config"])
        .output()
        .unwrap();
    assert!(stdout(&o).contains("train.epochs = 9"));

    fs::write(dir.join("bad.toml"), "train.epoch = 7\n").unwrap();
    let o = st4d(dir, &["--config", "bad.toml", "show-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key 'train.epoch'"));
}

#[test]
fn help_lists_every_key_with_default() {
    let tmp = tempfile::tempdir().unwrap();
    let o = st4d(tmp.path(), &["train", "--help"]);
    assert!(o.status.success());
    let out = stdout(&o);
    for key in ["model.growth_rate", "train.lr", "data.stride", "synth.extents", "ST4D_CONFIG"] {
        assert!(out.contains(key), "{key} missing from help");
    }
    assert!(out.contains("[default: 0.0001]"));
    assert_eq!(st4d(tmp.path(), &["frobnicate"]).status.code(), Some(1));
}
