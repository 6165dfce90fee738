//! Checkpoint archive.
//!
//! ```text
//! "T4CK" | version u8 | header length u64 LE | header (UTF-8 key=value lines)
//! then per tensor: name length u32 LE | name (UTF-8) | T4DF blob
//! ```
//!
//! Tensor names are `param.<name>`, `adam.m.<name>`, `adam.v.<name>` (trainable
//! parameters only) and `best.<name>` when a best snapshot exists.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::train::{BestSnapshot, TrainState};
use crate::autodiff::ParamStore;
use crate::data::t4df::{decode_header, decode_prefix, encode};
use crate::error::{Error, FormatError, Result};
use crate::models::{build, Model, ModelSpec};
use crate::tensor::{DType, Real, Rng, RngState, Tensor, RNG_ALGORITHM};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"T4CK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn header_text<T: Real>(model: &Model<T>, state: &TrainState<T>, tensors: usize) -> String {
    let rs = state.rng.state();
    let mut h = String::new();
    let mut kv = |k: &str, v: String| h.push_str(&format!("{k}={v}\n"));
    kv("format", "st4d-checkpoint".into());
    kv("dtype", T::DTYPE.name().into());
    kv("spec_digest", model.spec.digest());
    kv("step", state.adam.step.to_string());
    kv("epoch", state.epoch.to_string());
    kv("rng_algorithm", RNG_ALGORITHM.into());
    kv("rng_seed", rs.seed.to_string());
    kv("rng_word_pos", rs.word_pos.to_string());
    match &state.best {
        Some(b) => {
            kv("best_epoch", b.epoch.to_string());
            kv("best_metric_bits", format!("{:016x}", b.metric.to_bits()));
            kv("best_loss_bits", format!("{:016x}", b.loss.to_bits()));
        }
        None => kv("best_epoch", "none".into()),
    }
    kv("tensors", tensors.to_string());
    for line in model.spec.canonical().lines() {
        h.push_str(&format!("spec.{line}\n"));
    }
    h
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>, state: &TrainState<T>) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor<T>)> = Vec::new();
    for (i, p) in model.params.iter().enumerate() {
        named.push((format!("param.{}", p.name), &p.value));
        if p.trainable {
            named.push((format!("adam.m.{}", p.name), &state.adam.m[i]));
            named.push((format!("adam.v.{}", p.name), &state.adam.v[i]));
        }
    }
    if let Some(b) = &state.best {
        for p in b.params.iter() {
            named.push((format!("best.{}", p.name), &p.value));
        }
    }
    let header = header_text(model, state, named.len());
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode(t));
    }
    out
}

pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, model: &Model<T>, state: &TrainState<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, state)).map_err(|e| Error::io(path, e))
}

/// Raw archive contents: header pairs and named tensor blobs.
struct Archive<'a> {
    header: Vec<(String, String)>,
    tensors: Vec<(String, &'a [u8])>,
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], FormatError> {
    if bytes.len() < n {
        return Err(FormatError::Truncated {
            expected: n,
            found: bytes.len(),
        });
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn parse_archive(mut bytes: &[u8]) -> Result<Archive<'_>, FormatError> {
    let magic: [u8; 4] = take(&mut bytes, 4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = take(&mut bytes, 1)?[0];
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
    let hlen = usize::try_from(hlen).map_err(|_| FormatError::Malformed("header too large".into()))?;
    let text = std::str::from_utf8(take(&mut bytes, hlen)?)
        .map_err(|_| FormatError::Malformed("header is not UTF-8".into()))?;
    let header = text
        .lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| FormatError::Malformed(format!("header line '{l}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut tensors = Vec::new();
    while !bytes.is_empty() {
        let n = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize;
        let name = std::str::from_utf8(take(&mut bytes, n)?)
            .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let h = decode_header(bytes)?;
        let len = h.header_len() + h.payload_len();
        let blob = take(&mut bytes, len)?;
        tensors.push((name, blob));
    }
    Ok(Archive { header, tensors })
}

fn lookup<'a>(header: &'a [(String, String)], key: &str) -> Result<&'a str, FormatError> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| FormatError::Malformed(format!("missing header key '{key}'")))
}

fn number<N: std::str::FromStr>(header: &[(String, String)], key: &str) -> Result<N, FormatError> {
    let v = lookup(header, key)?;
    v.parse()
        .map_err(|_| FormatError::Malformed(format!("header '{key}' has bad value '{v}'")))
}

/// Decoded checkpoint, not yet matched against a model.
pub struct Checkpoint<T: Real> {
    pub spec: ModelSpec,
    pub model: Model<T>,
    pub state: TrainState<T>,
}

fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let fmt = |e: FormatError| Error::Format {
        path: "<checkpoint>".into(),
        source: e,
    };
    let archive = parse_archive(bytes).map_err(fmt)?;
    let h = &archive.header;
    let dtype = lookup(h, "dtype").map_err(fmt)?;
    if dtype != T::DTYPE.name() {
        return Err(fmt(FormatError::DTypeMismatch {
            expected: T::DTYPE.name(),
            found: if dtype == DType::F64.name() { "f64" } else { "f32" },
        }));
    }
    let spec_text: String = h
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("spec.").map(|k| format!("{k}={v}\n")))
        .collect();
    let spec = ModelSpec::from_canonical(&spec_text)?;
    let digest = lookup(h, "spec_digest").map_err(fmt)?;
    if digest != spec.digest() {
        return Err(Error::CheckpointMismatch(format!(
            "stored digest {digest} does not match its own model spec ({})",
            spec.digest()
        )));
    }
    let mut model: Model<T> = build(&spec)?;
    let mut adam = AdamState::new(&model.params)?;
    let mut best: Option<ParamStore<T>> = match lookup(h, "best_epoch").map_err(fmt)? {
        "none" => None,
        _ => Some(model.params.clone()),
    };
    let mut seen = vec![[false; 4]; model.params.len()];
    let mut problems = Vec::new();
    for (name, blob) in &archive.tensors {
        let (kind, pname) = if let Some(p) = name.strip_prefix("param.") {
            (0, p)
        } else if let Some(p) = name.strip_prefix("adam.m.") {
            (1, p)
        } else if let Some(p) = name.strip_prefix("adam.v.") {
            (2, p)
        } else if let Some(p) = name.strip_prefix("best.") {
            (3, p)
        } else {
            problems.push(format!("{name} (unknown section)"));
            continue;
        };
        let Some(slot) = model.params.index_of(pname) else {
            problems.push(format!("{pname} (not in model)"));
            continue;
        };
        let (t, _) = decode_prefix::<T>(blob).map_err(fmt)?;
        if t.shape() != model.params.at(slot).value.shape() {
            problems.push(format!(
                "{pname} (stored {}, model {})",
                t.shape(),
                model.params.at(slot).value.shape()
            ));
            continue;
        }
        seen[slot][kind] = true;
        match kind {
            0 => model.params.set(slot, t)?,
            1 => adam.m[slot] = t,
            2 => adam.v[slot] = t,
            _ => match best.as_mut() {
                Some(b) => b.set(slot, t)?,
                None => problems.push(format!("{pname} (best tensor without best snapshot)")),
            },
        }
    }
    for (slot, s) in seen.iter().enumerate() {
        let p = model.params.at(slot);
        let need_moments = p.trainable;
        if !s[0] || (need_moments && !(s[1] && s[2])) || (best.is_some() && !s[3]) {
            problems.push(format!("{} (missing)", p.name));
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(format!(
            "parameters do not match the model: {}",
            problems.join(", ")
        )));
    }
    adam.step = number(h, "step").map_err(fmt)?;
    let rng_alg = lookup(h, "rng_algorithm").map_err(fmt)?;
    if rng_alg != RNG_ALGORITHM {
        return Err(Error::CheckpointMismatch(format!("rng algorithm '{rng_alg}', expected '{RNG_ALGORITHM}'")));
    }
    let rng = Rng::from_state(RngState {
        seed: number(h, "rng_seed").map_err(fmt)?,
        word_pos: number(h, "rng_word_pos").map_err(fmt)?,
    });
    let best = match best {
        None => None,
        Some(params) => {
            let float = |key: &str| -> Result<f64> {
                let bits = lookup(h, key).map_err(fmt)?;
                u64::from_str_radix(bits, 16)
                    .map(f64::from_bits)
                    .map_err(|_| fmt(FormatError::Malformed(format!("bad {key} '{bits}'"))))
            };
            Some(BestSnapshot {
                epoch: number(h, "best_epoch").map_err(fmt)?,
                metric: float("best_metric_bits")?,
                loss: float("best_loss_bits")?,
                params,
            })
        }
    };
    let state = TrainState {
        adam,
        epoch: number(h, "epoch").map_err(fmt)?,
        best,
        rng,
    };
    Ok(Checkpoint { spec, model, state })
}

/// Loads a checkpoint, rebuilding the model from the spec it carries.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format { source, .. } => Error::Format {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Loads a checkpoint that must have been written for `expected`.
pub fn load_checkpoint_for<T: Real>(path: impl AsRef<Path>, expected: &ModelSpec) -> Result<Checkpoint<T>> {
    let ck = load_checkpoint(path)?;
    if ck.spec != *expected {
        let want = expected.canonical();
        let diffs: Vec<String> = ck
            .spec
            .canonical()
            .lines()
            .zip(want.lines())
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("{a} (expected {b})"))
            .collect();
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint was written for a different model: {}",
            diffs.join(", ")
        )));
    }
    Ok(ck)
}

/// Header pairs and `(name, dtype, dims)` of every stored tensor.
pub struct CheckpointInfo {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<(String, DType, Vec<usize>)>,
}

pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tag = |source| Error::Format {
        path: path.to_path_buf(),
        source,
    };
    let a = parse_archive(&bytes).map_err(tag)?;
    let tensors = a
        .tensors
        .iter()
        .map(|(n, blob)| decode_header(blob).map(|h| (n.clone(), h.dtype, h.dims)))
        .collect::<Result<_, _>>()
        .map_err(tag)?;
    Ok(CheckpointInfo {
        header: a.header,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{micro_spec, Variant};

    fn trained_state(model: &Model<f64>) -> TrainState<f64> {
        let mut st = TrainState::new(&model.params, 9).unwrap();
        st.adam.step = 7;
        st.epoch = 3;
        st.rng.next_u64();
        st.adam.m[0] = Rng::new(1).normal_tensor(st.adam.m[0].dims(), 0.0, 1.0).unwrap();
        st.best = Some(BestSnapshot {
            epoch: 2,
            metric: 0.75,
            loss: 0.4,
            params: model.params.clone(),
        });
        st
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let m = build::<f64>(&micro_spec(Variant::ConvGruCnn3d, 4)).unwrap();
        let st = trained_state(&m);
        save_checkpoint(&p, &m, &st).unwrap();
        let ck = load_checkpoint::<f64>(&p).unwrap();
        assert_eq!(ck.model.params, m.params);
        assert_eq!(ck.state.adam, st.adam);
        assert_eq!(ck.state.epoch, 3);
        assert_eq!(ck.state.rng.state(), st.rng.state());
        assert_eq!(ck.state.best, st.best);
        assert_eq!(encode_checkpoint(&ck.model, &ck.state), fs::read(&p).unwrap());
    }

    #[test]
    fn mismatches_are_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let spec = micro_spec(Variant::Cnn3dMs, 4);
        let m = build::<f64>(&spec).unwrap();
        save_checkpoint(&p, &m, &TrainState::new(&m.params, 0).unwrap()).unwrap();
        let mut other = spec.clone();
        other.growth_rate = 3;
        let e = load_checkpoint_for::<f64>(&p, &other).err().unwrap();
        assert!(matches!(e, Error::CheckpointMismatch(_)));
        assert!(e.to_string().contains("growth_rate"), "{e}");
        assert!(load_checkpoint::<f32>(&p).is_err());
    }

    #[test]
    fn foreign_tensor_names_are_listed() {
        let m = build::<f64>(&micro_spec(Variant::Cnn3dMs, 4)).unwrap();
        let mut bytes = encode_checkpoint(&m, &TrainState::new(&m.params, 0).unwrap());
        let name = b"param.ghost.weight";
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.extend_from_slice(&encode(&Tensor::<f64>::zeros(&[2]).unwrap()));
        let e = decode_checkpoint::<f64>(&bytes).err().unwrap();
        assert!(e.to_string().contains("ghost.weight"), "{e}");
    }

    #[test]
    fn truncated_archive() {
        let m = build::<f64>(&micro_spec(Variant::Cnn3dMs, 4)).unwrap();
        let bytes = encode_checkpoint(&m, &TrainState::new(&m.params, 0).unwrap());
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint::<f64>(b"T4DF").is_err());
    }
}
