//! Shared plumbing: dataset, index and model built from one run config.

use std::io::Write;
use std::path::Path;

use camml_core::datastore::DatastoreIndex;
use camml_core::model::{CammlModel, PrefixMode};
use camml_core::synthetic::{make_synthetic_dataset, SyntheticDataset};
use camml_core::training::{evaluate, ContextCache, EvalOptions, EvalReport, StepRecord, Trainer};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub fn load_dataset(config: &RunConfig, model: &CammlModel) -> Result<SyntheticDataset> {
    match &config.data.dataset {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
            SyntheticDataset::from_json(&bytes).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
        }
        None => Ok(make_synthetic_dataset(
            &config.synthetic,
            &model.encoders.retrieval,
            &model.encoders.tokenizer,
        )?),
    }
}

/// Loads the configured index file, checking it covers the dataset, or
/// builds one in memory.
pub fn load_index(config: &RunConfig, model: &CammlModel, data: &SyntheticDataset) -> Result<DatastoreIndex> {
    match &config.data.index {
        Some(path) => {
            let index = DatastoreIndex::load(path)?;
            let expected: Vec<u64> = data.datastore.iter().map(|s| s.id).collect();
            if index.ids() != expected.as_slice() {
                return Err(HarnessError::Format(format!(
                    "{}: index entries do not match the dataset",
                    path.display()
                )));
            }
            if index.dim() != model.encoders.retrieval.dim() {
                return Err(HarnessError::Format(format!(
                    "{}: index dimension {} differs from the embedder's {}",
                    path.display(),
                    index.dim(),
                    model.encoders.retrieval.dim()
                )));
            }
            Ok(index)
        }
        None => Ok(DatastoreIndex::build(&data.datastore, &model.encoders.retrieval)?),
    }
}

pub struct Experiment {
    pub config: RunConfig,
    pub model: CammlModel,
    pub data: SyntheticDataset,
    pub index: DatastoreIndex,
}

impl Experiment {
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let model = CammlModel::new(&config.model_config())?;
        let data = load_dataset(config, &model)?;
        let index = load_index(config, &model, &data)?;
        Ok(Self {
            config: config.clone(),
            model,
            data,
            index,
        })
    }

    pub fn train(&mut self, steps: usize, log: Option<&mut dyn Write>) -> Result<Vec<StepRecord>> {
        let mut trainer = Trainer::new(&self.config.train, &self.model, &self.index)?;
        Ok(trainer.train(&mut self.model, &self.index, &self.data.train, steps, log)?)
    }

    pub fn evaluate(&self, prefix: PrefixMode) -> Result<EvalReport> {
        let depth = self.config.eval.shots.iter().copied().max().unwrap_or(1);
        let mut cache = ContextCache::new(&self.model, &self.index, depth)?;
        let opts = EvalOptions {
            shots: &self.config.eval.shots,
            prefix,
            candidates: self.config.eval.constrained.then_some(self.data.answers.as_slice()),
            max_new: self.config.eval.max_new,
        };
        Ok(evaluate(&self.model, &self.index, &mut cache, &self.data.eval, &opts, &self.data.answers)?)
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.model
            .load_checkpoint(path)
            .map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))
    }
}

/// Mean loss over the last `window` steps.
pub fn tail_loss(records: &[StepRecord], window: usize) -> f64 {
    let tail = &records[records.len().saturating_sub(window)..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}
