//! Run configuration: one TOML file with a section per component.

use std::path::{Path, PathBuf};

use camml_core::encoders::EncoderConfig;
use camml_core::generator::GeneratorConfig;
use camml_core::model::ModelConfig;
use camml_core::perceiver::{Ablation, PerceiverConfig};
use camml_core::synthetic::SyntheticSpec;
use camml_core::training::{ShotsMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Prebuilt index file; rebuilt from the dataset when absent.
    pub index: Option<PathBuf>,
    /// Dataset JSON written by `make-data`; generated from `[synthetic]` when absent.
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub shots: Vec<usize>,
    pub max_new: usize,
    /// Restrict decoding to the known answer words.
    pub constrained: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 2, 3],
            max_new: 4,
            constrained: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub m: Vec<usize>,
    /// Perceiver widths.
    pub hidden: Vec<usize>,
    /// Training steps per point; `[train] steps` when unset.
    pub steps: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layers: vec![2, 4],
            m: vec![32, 64, 128],
            hidden: vec![32, 64, 128],
            steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n: Vec<usize>,
    pub warmups: usize,
    pub runs: usize,
    /// Context images are `image_size × image_size`.
    pub image_size: usize,
    /// Content words per context text (BOS and EOS come on top).
    pub text_words: usize,
    /// Generator sequence limit used while benchmarking; longer inputs are
    /// reported as overflow.
    pub max_seq: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: vec![1, 2, 4, 8, 16, 32],
            warmups: 3,
            runs: 20,
            image_size: 16,
            text_words: 6,
            max_seq: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ablation: Ablation,
    pub encoder: EncoderConfig,
    pub perceiver: PerceiverConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    /// CPU-sized defaults: d=64, M=32, two perceiver layers of width 64.
    fn default() -> Self {
        let d = 64;
        Self {
            ablation: Ablation::Full,
            encoder: EncoderConfig {
                d,
                ..EncoderConfig::default()
            },
            perceiver: PerceiverConfig {
                layers: 2,
                d,
                perceiver_width: 64,
                heads: 8,
                m: 32,
                ..PerceiverConfig::default()
            },
            generator: GeneratorConfig {
                d,
                layers: 2,
                heads: 4,
                max_seq: 128,
                ..GeneratorConfig::default()
            },
            train: TrainConfig {
                steps: 800,
                batch_size: 8,
                lr: 1e-3,
                shots: ShotsMode::default(),
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
            synthetic: SyntheticSpec::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Format(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            perceiver: self.perceiver.clone(),
            generator: self.generator.clone(),
            ablation: self.ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if self.eval.shots.is_empty() || self.eval.shots.contains(&0) {
            return Err(HarnessError::Format("eval.shots must list positive shot counts".into()));
        }
        if self.bench.runs == 0 || self.bench.n.is_empty() || self.bench.n.contains(&0) {
            return Err(HarnessError::Format("bench needs runs > 0 and positive N values".into()));
        }
        Ok(())
    }

    /// Reseeds model initialization and training order, leaving the data and
    /// frozen encoders unchanged.
    pub fn reseed(&mut self, seed: u64) {
        self.perceiver.seed = seed;
        self.generator.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
    }
}
