//! Inference cost of the fixed-size context prefix against raw
//! concatenation, as the number of context samples grows.

use std::path::Path;
use std::time::Instant;

use camml_core::datastore::MultimodalSample;
use camml_core::encoders::{EncodedContext, RawImage, CHANNELS};
use camml_core::generator::Generator;
use camml_core::model::CammlModel;
use camml_core::perceiver::Ablation;
use camml_core::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::median;
use crate::results::Table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub n: usize,
    pub prefix_tokens: usize,
    pub sequence_len: usize,
    /// The assembled sequence exceeds the generator's `max_seq`; nothing timed.
    pub overflow: bool,
    /// Median generator forward time (ms) over the timed runs.
    pub generator_ms: Option<f64>,
    /// Median time spent building the prefix (perceivers or concatenation).
    pub fusion_ms: Option<f64>,
    /// Bytes held by the forward graph (values and backward caches).
    pub allocated_bytes: Option<usize>,
    pub generator_samples_ms: Vec<f64>,
    pub fusion_samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    /// Sorted by `n`.
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn row(&self, n: usize) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.n == n)
    }
}

/// A fixed, deterministic pixel pattern per sample.
fn pattern_image(size: usize, salt: usize) -> Result<RawImage> {
    let pixels = (0..size * size * CHANNELS)
        .map(|i| ((i * 31 + salt * 17) % 97) as f64 / 97.0)
        .collect();
    Ok(RawImage::new(size, size, pixels)?)
}

/// `n` contexts of identical shape: one square image and `text_words`
/// content words each.
pub fn homogeneous_contexts(model: &CammlModel, config: &RunConfig, n: usize) -> Result<Vec<EncodedContext>> {
    (0..n)
        .map(|i| {
            let text = (0..config.bench.text_words).map(|w| format!("w{}", (i + w) % 50)).collect::<Vec<_>>().join(" ");
            let sample = MultimodalSample {
                id: i as u64,
                image: Some(pattern_image(config.bench.image_size, i)?),
                text,
                answer: None,
            };
            Ok(model.encode_context(&sample)?)
        })
        .collect()
}

struct Timed {
    generator_ms: f64,
    fusion_ms: f64,
    bytes: usize,
}

fn forward_once(model: &CammlModel, contexts: &[EncodedContext], ablation: Ablation, image: &Tensor, query_ids: &[u32]) -> Result<Timed> {
    let start = Instant::now();
    let mut g = Graph::new();
    let prefix = model.perceiver.fuse_contexts(&mut g, &model.store, contexts, ablation)?;
    let fused = Instant::now();
    let img = g.input(image.clone());
    let assembled = model.generator.assemble(&mut g, &model.store, prefix.tokens, Some(img), query_ids, &[])?;
    let logits = model.generator.forward_at(&mut g, &model.store, assembled.embeds, &[assembled.len - 1])?;
    std::hint::black_box(g.value(logits));
    let done = Instant::now();
    Ok(Timed {
        generator_ms: (done - fused).as_secs_f64() * 1e3,
        fusion_ms: (fused - start).as_secs_f64() * 1e3,
        bytes: g.allocated_bytes(),
    })
}

/// Measures both variants on identical inputs for every `n` in `ns`.
/// Returns the fixed-prefix report first, then the raw-concatenation one.
pub fn bench_cost(config: &RunConfig, ns: &[usize]) -> Result<(CostReport, CostReport)> {
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    ns.dedup();
    if ns.is_empty() || ns[0] == 0 {
        return Err(HarnessError::Format("bench needs positive context counts".into()));
    }
    let mut model_config = config.model_config();
    model_config.generator.max_seq = config.bench.max_seq;
    let model = CammlModel::new(&model_config)?;
    let query = MultimodalSample {
        id: u64::MAX,
        image: Some(pattern_image(config.bench.image_size, 999)?),
        text: "what is shown here".into(),
        answer: None,
    };
    let query_ids = model.query_ids(&query);
    let image = {
        let tokens = model.query_image_tokens(&query)?.expect("query has an image");
        let mut g = Graph::new();
        let v = g.input(tokens);
        let p = model.projector.forward(&mut g, &model.store, v)?;
        g.value(p).clone()
    };
    let all_contexts = homogeneous_contexts(&model, config, *ns.last().expect("non-empty"))?;
    let mut reports = Vec::new();
    for (variant, ablation) in [("camml", Ablation::Full), ("no_perceiver", Ablation::NoPerceiver)] {
        let mut rows = Vec::new();
        for &n in &ns {
            let contexts = &all_contexts[..n];
            let prefix_tokens = match ablation {
                Ablation::NoPerceiver => contexts.iter().map(EncodedContext::raw_len).sum(),
                _ => config.perceiver.m,
            };
            let sequence_len = Generator::sequence_len(prefix_tokens, image.rows(), query_ids.len(), 0);
            let mut row = CostRow {
                n,
                prefix_tokens,
                sequence_len,
                overflow: sequence_len > model_config.generator.max_seq,
                generator_ms: None,
                fusion_ms: None,
                allocated_bytes: None,
                generator_samples_ms: Vec::new(),
                fusion_samples_ms: Vec::new(),
            };
            if !row.overflow {
                for _ in 0..config.bench.warmups {
                    forward_once(&model, contexts, ablation, &image, &query_ids)?;
                }
                for _ in 0..config.bench.runs {
                    let t = forward_once(&model, contexts, ablation, &image, &query_ids)?;
                    row.generator_samples_ms.push(t.generator_ms);
                    row.fusion_samples_ms.push(t.fusion_ms);
                    row.allocated_bytes = Some(t.bytes);
                }
                row.generator_ms = Some(median(&row.generator_samples_ms));
                row.fusion_ms = Some(median(&row.fusion_samples_ms));
            }
            rows.push(row);
        }
        reports.push(CostReport {
            variant: variant.into(),
            rows,
        });
    }
    let baseline = reports.pop().expect("two variants");
    let camml = reports.pop().expect("two variants");
    Ok((camml, baseline))
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn join(samples: &[f64]) -> String {
    samples.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// One row per (variant, N), raw timing samples included.
pub fn cost_table(reports: &[&CostReport]) -> Table {
    let mut t = Table::new([
        "variant",
        "n",
        "prefix_tokens",
        "sequence_len",
        "overflow",
        "generator_median_ms",
        "fusion_median_ms",
        "allocated_bytes",
        "generator_samples_ms",
        "fusion_samples_ms",
    ]);
    for r in reports {
        for row in &r.rows {
            t.push(vec![
                r.variant.clone(),
                row.n.to_string(),
                row.prefix_tokens.to_string(),
                row.sequence_len.to_string(),
                if row.overflow { "overflow" } else { "ok" }.into(),
                opt(row.generator_ms),
                opt(row.fusion_ms),
                opt(row.allocated_bytes),
                join(&row.generator_samples_ms),
                join(&row.fusion_samples_ms),
            ]);
        }
    }
    t
}

/// Compact table for the terminal (no raw samples).
pub fn summary_table(reports: &[&CostReport]) -> Table {
    let mut t = Table::new(["variant", "n", "prefix_tokens", "overflow", "generator_ms", "fusion_ms", "allocated_bytes"]);
    for r in reports {
        for row in &r.rows {
            t.push(vec![
                r.variant.clone(),
                row.n.to_string(),
                row.prefix_tokens.to_string(),
                if row.overflow { "overflow" } else { "ok" }.into(),
                row.generator_ms.map_or_else(String::new, |v| format!("{v:.3}")),
                row.fusion_ms.map_or_else(String::new, |v| format!("{v:.3}")),
                opt(row.allocated_bytes),
            ]);
        }
    }
    t
}

/// Writes `cost_<variant>.dat` files and a gnuplot script plotting time and
/// memory against N.
pub fn write_plot(dir: &Path, reports: &[&CostReport]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for r in reports {
        let mut body = String::from("# n generator_median_ms fusion_median_ms allocated_bytes\n");
        for row in r.rows.iter().filter(|row| !row.overflow) {
            body.push_str(&format!(
                "{} {} {} {}\n",
                row.n,
                opt(row.generator_ms),
                opt(row.fusion_ms),
                opt(row.allocated_bytes)
            ));
        }
        let path = dir.join(format!("cost_{}.dat", r.variant));
        std::fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
    }
    let mut gp = String::from(
        "set terminal pngcairo size 1000,400\nset output 'cost.png'\nset multiplot layout 1,2\nset logscale x 2\nset xlabel 'context samples N'\nset key left top\n",
    );
    let series = |col: usize| {
        reports
            .iter()
            .map(|r| format!("'cost_{0}.dat' using 1:{col} with linespoints title '{0}'", r.variant))
            .collect::<Vec<_>>()
            .join(", ")
    };
    gp.push_str(&format!("set ylabel 'generator forward (ms)'\nplot {}\n", series(2)));
    gp.push_str(&format!("set ylabel 'allocated bytes'\nplot {}\n", series(4)));
    gp.push_str("unset multiplot\n");
    let path = dir.join("cost.gp");
    std::fs::write(&path, gp).map_err(|e| HarnessError::io(&path, e))
}
