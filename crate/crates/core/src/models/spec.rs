use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// 3D CNN with the 15 time steps stacked as input channels.
    Cnn3dTc,
    /// 3D CNN on voxel-wise temporal mean and standard deviation.
    Cnn3dMs,
    /// Convolutional GRU front end followed by a 3D CNN.
    ConvGruCnn3d,
    /// Rank-4 convolutions and pooling throughout.
    Cnn4d,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cnn3dTc, Variant::Cnn3dMs, Variant::ConvGruCnn3d, Variant::Cnn4d];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnn3dTc => "cnn3d-tc",
            Variant::Cnn3dMs => "cnn3d-ms",
            Variant::ConvGruCnn3d => "convgru-cnn3d",
            Variant::Cnn4d => "cnn4d",
        }
    }

    /// Rank of the convolutions in the dense core.
    pub fn core_rank(self) -> usize {
        if self == Variant::Cnn4d {
            4
        } else {
            3
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL.into_iter().find(|v| v.name() == key).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::invalid(format!("unknown variant '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub initial_filters: usize,
    pub growth_rate: usize,
    pub layers_per_block: usize,
    pub blocks: usize,
    /// Fraction of channels kept by each transition convolution.
    pub compression: f64,
    pub batch_norm: bool,
    /// Hidden channels of the GRU front end; ignored by other variants.
    pub gru_hidden: usize,
    pub kernel: usize,
    /// Spatial stride of the first convolution (time is never strided).
    pub initial_stride: usize,
    /// Expected crop extents `[X, Y, Z, T]`.
    pub crop: [usize; 4],
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        ModelSpec {
            variant,
            initial_filters: 16,
            growth_rate: 8,
            layers_per_block: 5,
            blocks: 3,
            compression: 0.5,
            batch_norm: true,
            gru_hidden: 16,
            kernel: 3,
            initial_stride: 1,
            crop: [32, 32, 32, 15],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_filters", self.initial_filters),
            ("growth_rate", self.growth_rate),
            ("layers_per_block", self.layers_per_block),
            ("blocks", self.blocks),
            ("gru_hidden", self.gru_hidden),
            ("kernel", self.kernel),
            ("initial_stride", self.initial_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("model.{name} must be >= 1")));
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("model.kernel must be odd, got {}", self.kernel)));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::invalid(format!(
                "model.compression must be in (0, 1], got {}",
                self.compression
            )));
        }
        if self.crop.contains(&0) {
            return Err(Error::invalid(format!("crop extents must be >= 1, got {:?}", self.crop)));
        }
        Ok(())
    }

    /// One `key=value` line per field, in a fixed order.
    pub fn canonical(&self) -> String {
        format!(
            "variant={}\ninitial_filters={}\ngrowth_rate={}\nlayers_per_block={}\nblocks={}\ncompression={:?}\nbatch_norm={}\ngru_hidden={}\nkernel={}\ninitial_stride={}\ncrop={}x{}x{}x{}\nseed={}\n",
            self.variant,
            self.initial_filters,
            self.growth_rate,
            self.layers_per_block,
            self.blocks,
            self.compression,
            self.batch_norm,
            self.gru_hidden,
            self.kernel,
            self.initial_stride,
            self.crop[0],
            self.crop[1],
            self.crop[2],
            self.crop[3],
            self.seed
        )
    }

    /// Parses the output of [`ModelSpec::canonical`].
    pub fn from_canonical(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid(format!("model spec: {msg}"));
        let mut spec = ModelSpec::new(Variant::Cnn3dTc);
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("malformed line '{line}'")))?;
            let num = || v.parse::<usize>().map_err(|_| bad(format!("{k}: bad value '{v}'")));
            match k {
                "variant" => spec.variant = v.parse()?,
                "initial_filters" => spec.initial_filters = num()?,
                "growth_rate" => spec.growth_rate = num()?,
                "layers_per_block" => spec.layers_per_block = num()?,
                "blocks" => spec.blocks = num()?,
                "compression" => spec.compression = v.parse().map_err(|_| bad(format!("bad compression '{v}'")))?,
                "batch_norm" => spec.batch_norm = v.parse().map_err(|_| bad(format!("bad batch_norm '{v}'")))?,
                "gru_hidden" => spec.gru_hidden = num()?,
                "kernel" => spec.kernel = num()?,
                "initial_stride" => spec.initial_stride = num()?,
                "crop" => {
                    let parts: Vec<usize> = v
                        .split('x')
                        .map(|p| p.parse().map_err(|_| bad(format!("bad crop '{v}'"))))
                        .collect::<Result<_>>()?;
                    spec.crop = parts.try_into().map_err(|_| bad(format!("crop needs 4 extents, got '{v}'")))?;
                }
                "seed" => spec.seed = v.parse().map_err(|_| bad(format!("bad seed '{v}'")))?,
                _ => return Err(bad(format!("unknown key '{k}'"))),
            }
            seen += 1;
        }
        if seen != 12 {
            return Err(bad(format!("expected 12 fields, found {seen}")));
        }
        Ok(spec)
    }

    /// SHA-256 of [`ModelSpec::canonical`], hex encoded.
    pub fn digest(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Channels entering the first convolution.
    pub fn core_input_channels(&self) -> usize {
        match self.variant {
            Variant::Cnn3dTc => self.crop[3],
            Variant::Cnn3dMs => 2,
            Variant::ConvGruCnn3d => self.gru_hidden,
            Variant::Cnn4d => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let err = "cnn5d".parse::<Variant>().unwrap_err().to_string();
        for v in Variant::ALL {
            assert!(err.contains(v.name()), "{err}");
        }
    }

    #[test]
    fn canonical_round_trip_and_digest() {
        let mut s = ModelSpec::new(Variant::Cnn4d);
        s.compression = 0.3;
        s.seed = 99;
        s.crop = [6, 6, 6, 3];
        let back = ModelSpec::from_canonical(&s.canonical()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.digest(), s.digest());
        assert_eq!(s.digest().len(), 64);
        let mut t = s.clone();
        t.growth_rate += 1;
        assert_ne!(t.digest(), s.digest());
    }

    #[test]
    fn invalid_specs() {
        let mut s = ModelSpec::new(Variant::Cnn3dMs);
        s.blocks = 0;
        assert!(s.validate().is_err());
        s = ModelSpec::new(Variant::Cnn3dMs);
        s.compression = 1.5;
        assert!(s.validate().is_err());
        s.compression = 0.0;
        assert!(s.validate().is_err());
        s = ModelSpec::new(Variant::Cnn3dMs);
        s.kernel = 2;
        assert!(s.validate().is_err());
        assert!(ModelSpec::new(Variant::Cnn3dMs).validate().is_ok());
    }
}
