//! Run configuration (JSON). Every field has a default, so `{}` is a valid
//! config; synthesis and PTQ defaults follow the published settings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::{CHANNELS, IMAGE_SIZE, NUM_CLASSES};
use crate::ptq::PtqConfig;
use crate::synth::{Method, SynthesisConfig};
use crate::vit::{TrainConfig, ViTConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibration {
    /// Real training images.
    Real,
    Noise,
    Pse,
    Sardfq,
}

impl Calibration {
    pub fn method(self) -> Option<Method> {
        match self {
            Calibration::Real => None,
            Calibration::Noise => Some(Method::Noise),
            Calibration::Pse => Some(Method::Pse),
            Calibration::Sardfq => Some(Method::Sardfq),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Calibration::Real => "real",
            Calibration::Noise => "noise",
            Calibration::Pse => "pse",
            Calibration::Sardfq => "sardfq",
        }
    }
}

impl From<Method> for Calibration {
    fn from(m: Method) -> Self {
        match m {
            Method::Noise => Calibration::Noise,
            Method::Pse => Calibration::Pse,
            Method::Sardfq => Calibration::Sardfq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_n: usize,
    pub test_n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_n: 2000, test_n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ViTConfig,
    pub train: TrainConfig,
    /// Load this full-precision checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    pub synthesis: SynthesisConfig,
    pub ptq: PtqConfig,
    pub methods: Vec<Calibration>,
    /// `(wbits, abits)` pairs.
    pub bits: Vec<(u32, u32)>,
    /// Real test images per class used for the feature-similarity table.
    pub similarity_per_class: usize,
    /// Write PPM previews and prior PGMs next to the raw arrays.
    pub previews: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ViTConfig::default(),
            train: TrainConfig::default(),
            checkpoint: None,
            synthesis: SynthesisConfig::default(),
            ptq: PtqConfig::default(),
            methods: vec![Calibration::Real, Calibration::Noise, Calibration::Pse, Calibration::Sardfq],
            bits: vec![(8, 8), (4, 4)],
            similarity_per_class: 20,
            previews: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Copy with every stage seed set to `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.synthesis.seed = seed;
        self.ptq.seed = seed;
        self
    }

    /// Propagates the top-level seed to every stage.
    pub fn resolved(self) -> Self {
        let s = self.seed;
        self.with_seed(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synthesis.validate(&self.model)?;
        let m = &self.model;
        if m.image_size != IMAGE_SIZE || m.in_channels != CHANNELS || m.num_classes != NUM_CLASSES {
            return Err(Error::Invalid(format!(
                "the toy dataset is {CHANNELS}x{IMAGE_SIZE}x{IMAGE_SIZE} with {NUM_CLASSES} classes"
            )));
        }
        if self.methods.is_empty() || self.bits.is_empty() {
            return Err(Error::Invalid("config needs at least one method and one bit-width".into()));
        }
        for &(w, a) in &self.bits {
            if !(2..=8).contains(&w) || !(2..=8).contains(&a) {
                return Err(Error::Invalid(format!("bit-width W{w}A{a} outside 2..=8")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.synthesis.iterations, 1000);
        assert_eq!(c.synthesis.lr, 0.2);
        assert_eq!(c.ptq.lr, 4e-5);
        c.validate().unwrap();
    }

    #[test]
    fn partial_override_and_seed() {
        let c: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "synthesis": {"iterations": 5}, "methods": ["noise"], "bits": [[4, 4]]}"#)
                .unwrap();
        let c = c.resolved();
        assert_eq!(c.synthesis.iterations, 5);
        assert_eq!(c.synthesis.batch_size, 32);
        assert_eq!(c.synthesis.seed, 7);
        assert_eq!(c.methods, vec![Calibration::Noise]);
        let bad = RunConfig { bits: vec![(9, 4)], ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
