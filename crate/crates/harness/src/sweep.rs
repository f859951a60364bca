//! One-axis hyperparameter sweeps over the perceiver.

use camml_core::model::PrefixMode;
use camml_core::tensor::Graph;
use camml_core::training::ContextCache;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{median, tail_loss, Experiment};
use crate::results::Table;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Layers,
    #[value(name = "m")]
    #[serde(rename = "m")]
    M,
    /// Perceiver width.
    Hidden,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Layers => "layers",
            Axis::M => "m",
            Axis::Hidden => "hidden",
        }
    }

    pub fn defaults(self, config: &RunConfig) -> Vec<usize> {
        match self {
            Axis::Layers => config.sweep.layers.clone(),
            Axis::M => config.sweep.m.clone(),
            Axis::Hidden => config.sweep.hidden.clone(),
        }
    }

    fn apply(self, config: &mut RunConfig, value: usize) {
        match self {
            Axis::Layers => config.perceiver.layers = value,
            Axis::M => config.perceiver.m = value,
            Axis::Hidden => config.perceiver.perceiver_width = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub accuracy: f64,
    pub parameters: usize,
    pub prefix_tokens: usize,
    pub step_ms: f64,
    pub final_loss: f64,
}

/// Trains and evaluates one model per value with the same step budget.
/// Every point is validated before any training starts.
pub fn sweep(config: &RunConfig, axis: Axis, values: &[usize], steps: usize) -> Result<(Table, Vec<SweepPoint>)> {
    if values.is_empty() {
        return Err(HarnessError::Format(format!("no values to sweep for axis {}", axis.name())));
    }
    let configs: Vec<RunConfig> = values
        .iter()
        .map(|&v| {
            let mut c = config.clone();
            axis.apply(&mut c, v);
            c.validate()
                .map_err(|e| HarnessError::Format(format!("{} = {v}: {e}", axis.name())))?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(["axis", "value", "accuracy", "parameters", "prefix_tokens", "step_ms", "final_loss"]);
    let mut points = Vec::new();
    for (&value, cfg) in values.iter().zip(&configs) {
        let mut exp = Experiment::prepare(cfg)?;
        let records = exp.train(steps, None)?;
        let report = exp.evaluate(PrefixMode::Retrieved)?;
        let (correct, total) = report.rows.iter().fold((0, 0), |(c, t), r| (c + r.correct, t + r.total));
        let prefix_tokens = {
            let query = &exp.data.eval[0];
            let mut cache = ContextCache::new(&exp.model, &exp.index, 1)?;
            let contexts = cache.contexts(&exp.model, &exp.index, query, 1)?;
            let mut g = Graph::new();
            exp.model.prefix(&mut g, &contexts, PrefixMode::Retrieved)?.rows
        };
        let point = SweepPoint {
            value,
            accuracy: correct as f64 / total.max(1) as f64,
            parameters: exp.model.store.num_scalars(),
            prefix_tokens,
            step_ms: median(&records.iter().map(|r| r.wall_ms).collect::<Vec<_>>()),
            final_loss: tail_loss(&records, 50),
        };
        table.push(vec![
            axis.name().into(),
            value.to_string(),
            format!("{:.4}", point.accuracy),
            point.parameters.to_string(),
            point.prefix_tokens.to_string(),
            format!("{:.2}", point.step_ms),
            format!("{:.4}", point.final_loss),
        ]);
        points.push(point);
    }
    Ok((table, points))
}
