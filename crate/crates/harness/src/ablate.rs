//! Perceiver-component ablation grid on the synthetic task.

use camml_core::model::PrefixMode;
use camml_core::perceiver::Ablation;
use camml_core::training::{EvalRow, GenerationRecord};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::pipeline::{tail_loss, Experiment};
use crate::results::Table;

pub const REFERENCE_NOTE: &str = "reference only; not reproducible at desk scale";
pub const CONTROL: &str = "zero_prefix_control";

/// One row of the grid: which ablation, whether the context perceiver shares
/// weights across modalities, and the published average accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub ablation: Ablation,
    pub shared: bool,
    pub reference: f64,
}

pub const VARIANTS: [Variant; 5] = [
    Variant { name: "full", ablation: Ablation::Full, shared: true, reference: 91.3 },
    Variant { name: "no_perceiver", ablation: Ablation::NoPerceiver, shared: true, reference: 89.7 },
    Variant { name: "no_vp", ablation: Ablation::NoVp, shared: true, reference: 89.8 },
    Variant { name: "no_lp", ablation: Ablation::NoLp, shared: true, reference: 90.0 },
    Variant { name: "unshared_cp", ablation: Ablation::Full, shared: false, reference: 91.3 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub final_loss: f64,
    pub rows: Vec<EvalRow>,
    pub generations: Vec<GenerationRecord>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub table: Table,
    pub results: Vec<VariantResult>,
}

impl AblationOutcome {
    pub fn accuracy(&self, name: &str) -> Option<f64> {
        self.results.iter().find(|r| r.name == name).map(|r| r.accuracy)
    }
}

fn pooled(rows: &[EvalRow]) -> (usize, usize) {
    rows.iter().fold((0, 0), |(c, t), r| (c + r.correct, t + r.total))
}

fn result(name: &str, rows: Vec<EvalRow>, generations: Vec<GenerationRecord>, final_loss: f64) -> VariantResult {
    let (correct, total) = pooled(&rows);
    VariantResult {
        name: name.to_string(),
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
        final_loss,
        rows,
        generations,
    }
}

/// Trains every variant from the same seeds for `steps` updates, then adds a
/// control row: the trained full model with its prefix replaced by zeros.
pub fn ablate(config: &RunConfig, steps: usize) -> Result<AblationOutcome> {
    let mut table = Table::new(["variant", "cp_weights", "accuracy", "correct", "total", "final_loss", "reference_avg", "note"]);
    let mut results = Vec::new();
    for v in VARIANTS {
        let mut cfg = config.clone();
        cfg.ablation = v.ablation;
        cfg.perceiver.share_context_weights = v.shared;
        let mut exp = Experiment::prepare(&cfg)?;
        let records = exp.train(steps, None)?;
        let loss = tail_loss(&records, 50);
        let report = exp.evaluate(PrefixMode::Retrieved)?;
        let r = result(v.name, report.rows, report.generations, loss);
        table.push(vec![
            v.name.into(),
            if v.shared { "shared" } else { "unshared" }.into(),
            format!("{:.4}", r.accuracy),
            r.correct.to_string(),
            r.total.to_string(),
            format!("{loss:.4}"),
            format!("{:.1}", v.reference),
            REFERENCE_NOTE.into(),
        ]);
        results.push(r);
        if v.name == "full" {
            let control = exp.evaluate(PrefixMode::Zeros)?;
            let c = result(CONTROL, control.rows, control.generations, loss);
            results.push(c);
        }
    }
    // The control row goes last so the variant rows read in grid order.
    let control_at = results.iter().position(|r| r.name == CONTROL).expect("control evaluated");
    let control = results.remove(control_at);
    table.push(vec![
        CONTROL.into(),
        "shared".into(),
        format!("{:.4}", control.accuracy),
        control.correct.to_string(),
        control.total.to_string(),
        format!("{:.4}", control.final_loss),
        "-".into(),
        "full model with the context prefix replaced by zeros".into(),
    ]);
    results.push(control);
    Ok(AblationOutcome { table, results })
}
