//! The `camml` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use camml_core::datastore::{MultimodalSample, RetrievalMode};
use camml_core::generator::Decoding;
use camml_core::model::PrefixMode;
use camml_core::training::{decode, ContextCache, EvalReport, GenerationRecord};
use clap::{Parser, Subcommand};

use crate::ablate::ablate;
use crate::bench::{bench_cost, cost_table, summary_table, write_plot};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{load_dataset, tail_loss, Experiment};
use crate::results::{write_results, Table};
use crate::sweep::{sweep, Axis};

#[derive(Debug, Parser)]
#[command(name = "camml", version, about = "Retrieval-augmented multimodal learner: data, training, evaluation and experiments")]
pub struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Reseed model initialization and training order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for checkpoints, logs and results.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the retrieval index over the datastore and write it with the dataset.
    BuildIndex,
    /// Print the top-n datastore entries for a query as `id score` lines.
    Retrieve {
        #[arg(long)]
        query_id: u64,
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// text_to_image or image_to_image.
        #[arg(long, default_value = "text_to_image")]
        mode: String,
    },
    /// Generate the synthetic dataset and write it as JSON.
    MakeData,
    /// Train on the synthetic task and write a checkpoint.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint with retrieved and zero-prefix contexts.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every perceiver ablation plus a zero-prefix control.
    Ablate {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sweep one perceiver hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; the `[sweep]` list when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Time the generator with a fixed prefix against raw concatenation.
    BenchCost {
        /// Comma-separated context counts; the `[bench]` list when omitted.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
    },
    /// Answer one query with retrieved contexts.
    Generate {
        #[arg(long)]
        query_id: u64,
        #[arg(long, default_value_t = 3)]
        shots: usize,
        /// Defaults to `<out>/model.ckpt` when present.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Decode freely instead of choosing among the answer words.
        #[arg(long)]
        free: bool,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.reseed(seed);
    }
    Ok(config)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut body = Vec::new();
    for item in items {
        serde_json::to_writer(&mut body, item).map_err(|e| HarnessError::Format(e.to_string()))?;
        body.push(b'\n');
    }
    write_file(path, &body)
}

fn find_query(exp: &Experiment, id: u64) -> Result<MultimodalSample> {
    exp.data
        .datastore
        .iter()
        .chain(&exp.data.eval)
        .find(|s| s.id == id)
        .cloned()
        .ok_or_else(|| HarnessError::Format(format!("no sample with id {id}")))
}

fn eval_table(retrieved: &EvalReport, control: &EvalReport) -> Table {
    let mut t = Table::new(["prefix", "shots", "correct", "total", "accuracy"]);
    for (name, report) in [("retrieved", retrieved), ("zeros", control)] {
        for r in &report.rows {
            t.push(vec![
                name.into(),
                r.shots.to_string(),
                r.correct.to_string(),
                r.total.to_string(),
                format!("{:.4}", r.accuracy),
            ]);
        }
    }
    t
}

fn execute(cli: &Cli) -> Result<()> {
    let config = run_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::MakeData => {
            let model = camml_core::model::CammlModel::new(&config.model_config())?;
            let data = load_dataset(&config, &model)?;
            let path = out.join("dataset.json");
            write_file(&path, &data.to_json()?)?;
            println!(
                "wrote {} ({} datastore, {} train, {} eval)",
                path.display(),
                data.datastore.len(),
                data.train.len(),
                data.eval.len()
            );
        }
        Command::BuildIndex => {
            let exp = Experiment::prepare(&config)?;
            let data_path = out.join("dataset.json");
            write_file(&data_path, &exp.data.to_json()?)?;
            let index_path = out.join("index.cmix");
            write_file(&index_path, &exp.index.to_bytes())?;
            println!("wrote {} ({} entries, dim {})", index_path.display(), exp.index.len(), exp.index.dim());
        }
        Command::Retrieve { query_id, n, mode } => {
            let mode: RetrievalMode = mode.parse().map_err(|e| HarnessError::Usage(format!("--mode: {e}")))?;
            let exp = Experiment::prepare(&config)?;
            let query = find_query(&exp, *query_id)?;
            let exclude = std::collections::HashSet::from([query.id]);
            let r = exp.index.retrieve(&exp.model.encoders.retrieval, &query, *n, mode, &exclude)?;
            for (id, score) in &r.hits {
                println!("{id}\t{score:.6}");
            }
            if r.short {
                eprintln!("only {} of {n} requested entries available", r.hits.len());
            }
        }
        Command::Train { steps } => {
            let steps = steps.unwrap_or(config.train.steps);
            let mut exp = Experiment::prepare(&config)?;
            std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
            let log_path = out.join("train_log.jsonl");
            let file = File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
            let mut log = BufWriter::new(file);
            let records = exp.train(steps, Some(&mut log))?;
            log.flush().map_err(|e| HarnessError::io(&log_path, e))?;
            let ckpt = out.join("model.ckpt");
            exp.model.save_checkpoint(&ckpt)?;
            write_file(&out.join("config.toml"), config.to_toml().as_bytes())?;
            let mut t = Table::new(["steps", "first_loss", "final_loss", "checkpoint"]);
            t.push(vec![
                steps.to_string(),
                records.first().map_or_else(String::new, |r| format!("{:.4}", r.loss)),
                format!("{:.4}", tail_loss(&records, 50)),
                ckpt.display().to_string(),
            ]);
            write_results(out, "train", "train", &config, &t, serde_json::json!({ "losses": records.iter().map(|r| r.loss).collect::<Vec<_>>() }))?;
            print!("{}", t.render());
        }
        Command::Eval { checkpoint } => {
            let ckpt = checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let mut exp = Experiment::prepare(&config)?;
            exp.load_checkpoint(&ckpt)?;
            let retrieved = exp.evaluate(PrefixMode::Retrieved)?;
            let control = exp.evaluate(PrefixMode::Zeros)?;
            let t = eval_table(&retrieved, &control);
            write_jsonl(&out.join("eval_generations.jsonl"), &retrieved.generations)?;
            write_results(
                out,
                "eval",
                "eval",
                &config,
                &t,
                serde_json::json!({ "checkpoint": ckpt, "retrieved": retrieved, "zeros": control }),
            )?;
            print!("{}", t.render());
        }
        Command::Ablate { steps } => {
            let steps = steps.unwrap_or(config.train.steps);
            let outcome = ablate(&config, steps)?;
            let generations: Vec<(String, &GenerationRecord)> = outcome
                .results
                .iter()
                .flat_map(|r| r.generations.iter().map(move |g| (r.name.clone(), g)))
                .collect();
            write_jsonl(&out.join("ablate_generations.jsonl"), &generations)?;
            write_results(out, "ablate", "ablate", &config, &outcome.table, serde_json::json!({ "steps": steps, "results": outcome.results }))?;
            print!("{}", outcome.table.render());
        }
        Command::Sweep { axis, values, steps } => {
            let values = if values.is_empty() { axis.defaults(&config) } else { values.clone() };
            let steps = steps.or(config.sweep.steps).unwrap_or(config.train.steps);
            let (t, points) = sweep(&config, *axis, &values, steps)?;
            let stem = format!("sweep_{}", axis.name());
            write_results(out, &stem, "sweep", &config, &t, serde_json::json!({ "axis": axis, "steps": steps, "points": points }))?;
            print!("{}", t.render());
        }
        Command::BenchCost { n } => {
            let ns = if n.is_empty() { config.bench.n.clone() } else { n.clone() };
            let (camml, baseline) = bench_cost(&config, &ns)?;
            let reports = [&camml, &baseline];
            write_results(out, "cost", "bench-cost", &config, &cost_table(&reports), serde_json::json!({ "reports": reports }))?;
            write_plot(out, &reports)?;
            print!("{}", summary_table(&reports).render());
        }
        Command::Generate {
            query_id,
            shots,
            checkpoint,
            free,
        } => {
            let mut exp = Experiment::prepare(&config)?;
            let default_ckpt = out.join("model.ckpt");
            match checkpoint {
                Some(path) => exp.load_checkpoint(path)?,
                None if default_ckpt.exists() => exp.load_checkpoint(&default_ckpt)?,
                None => eprintln!("no checkpoint; answering with untrained weights"),
            }
            let query = find_query(&exp, *query_id)?;
            let mut cache = ContextCache::new(&exp.model, &exp.index, *shots)?;
            let neighbours = cache.neighbours(&exp.model, &exp.index, &query, *shots)?.to_vec();
            let contexts = cache.contexts(&exp.model, &exp.index, &query, *shots)?;
            let image = cache.image_tokens(&exp.model, &query)?;
            let candidates = exp.data.answer_candidates(&exp.model.encoders.tokenizer);
            let decoding = if *free { Decoding::Greedy } else { Decoding::Constrained(&candidates) };
            let ids = exp.model.answer(&query, image.as_ref(), &contexts, PrefixMode::Retrieved, decoding, config.eval.max_new)?;
            println!("query: {}", query.text);
            println!("contexts: {neighbours:?}");
            println!("answer: {}", decode(&ids, &exp.model.encoders.tokenizer, &exp.data.answers));
        }
    }
    Ok(())
}
