//! Dataset manifest: UTF-8 text, one tab-separated record per line.
//!
//! ```text
//! # comment
//! #@shape=1x1x16x16x16x64
//! #@period=2
//! subjects/s000.t4df	s000	1	train
//! ```
//!
//! `#@key=value` lines form the global header; other `#` lines and blank
//! lines are ignored. Record paths are relative to the manifest's directory
//! unless absolute.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::t4df::load_tensor_as;
use crate::error::{Error, FormatError, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_PERIOD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split '{s}'; expected train, val or test")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: PathBuf,
    pub id: String,
    /// 0 = control, 1 = ASD.
    pub label: usize,
    pub split: Split,
}

/// One subject's image with its metadata.
#[derive(Clone, Debug)]
pub struct FmriRecord<T: Real> {
    pub id: String,
    pub image: Tensor<T>,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Expected image extents, if declared.
    pub shape: Option<Vec<usize>>,
    /// Sampling period in seconds.
    pub period: f64,
    pub entries: Vec<Entry>,
    /// Directory that relative entry paths resolve against.
    pub base: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplitCounts {
    pub control: usize,
    pub asd: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.control + self.asd
    }

    pub fn balanced(&self) -> bool {
        self.control == self.asd
    }
}

fn malformed(line: usize, msg: impl fmt::Display) -> Error {
    Error::Format {
        path: PathBuf::from("<manifest>"),
        source: FormatError::Malformed(format!("line {line}: {msg}")),
    }
}

impl Manifest {
    pub fn new(shape: Option<Vec<usize>>, period: f64) -> Self {
        Manifest {
            shape,
            period,
            entries: Vec::new(),
            base: PathBuf::new(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::new(None, DEFAULT_PERIOD);
        let mut ids = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.trim_end_matches('\r');
            if let Some(kv) = line.strip_prefix("#@") {
                let (k, v) = kv.split_once('=').ok_or_else(|| malformed(n, "header needs key=value"))?;
                match k.trim() {
                    "shape" => {
                        let dims = v
                            .trim()
                            .split('x')
                            .map(|d| d.parse::<usize>().map_err(|_| malformed(n, format!("bad extent '{d}'"))))
                            .collect::<Result<Vec<_>>>()?;
                        m.shape = Some(dims);
                    }
                    "period" => {
                        let p: f64 = v.trim().parse().map_err(|_| malformed(n, format!("bad period '{v}'")))?;
                        if !(p > 0.0 && p.is_finite()) {
                            return Err(malformed(n, "period must be positive"));
                        }
                        m.period = p;
                    }
                    other => return Err(malformed(n, format!("unknown header key '{other}'"))),
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(malformed(n, format!("expected 4 tab-separated fields, got {}", cols.len())));
            }
            let label = match cols[2] {
                "0" => 0,
                "1" => 1,
                l => return Err(malformed(n, format!("label must be 0 or 1, got '{l}'"))),
            };
            let split: Split = cols[3].parse().map_err(|e| malformed(n, e))?;
            let id = cols[1].to_string();
            if id.is_empty() || !ids.insert(id.clone()) {
                return Err(malformed(n, format!("duplicate or empty subject id '{id}'")));
            }
            m.entries.push(Entry {
                path: PathBuf::from(cols[0]),
                id,
                label,
                split,
            });
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# path\tid\tlabel\tsplit\n");
        if let Some(shape) = &self.shape {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("#@shape={}\n", dims.join("x")));
        }
        s.push_str(&format!("#@period={}\n", self.period));
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", e.path.display(), e.id, e.label, e.split));
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Manifest::parse(&text).map_err(|e| match e {
            Error::Format { source, .. } => Error::Format {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in self.split(split) {
            if e.label == 1 {
                c.asd += 1;
            } else {
                c.control += 1;
            }
        }
        c
    }

    pub fn resolve(&self, entry: &Entry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base.join(&entry.path)
        }
    }

    /// Loads an entry's image, converting from the stored dtype and checking
    /// the declared shape and finiteness.
    pub fn load_record<T: Real>(&self, entry: &Entry) -> Result<FmriRecord<T>> {
        let path = self.resolve(entry);
        let image: Tensor<T> = load_tensor_as(&path)?;
        if let Some(shape) = &self.shape {
            if image.dims() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{}: image {} does not match manifest shape {shape:?}",
                    path.display(),
                    image.shape()
                )));
            }
        }
        if !image.all_finite() {
            return Err(Error::NonFinite(path.display().to_string()));
        }
        Ok(FmriRecord {
            id: entry.id.clone(),
            image,
            label: entry.label,
            split: entry.split,
        })
    }

    pub fn load_split<T: Real>(&self, split: Split) -> Result<Vec<FmriRecord<T>>> {
        self.split(split).map(|e| self.load_record(e)).collect()
    }
}
