//! Optimization loop, shot sampling and evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{DatastoreIndex, MultimodalSample, RetrievalMode};
use crate::encoders::{EncodedContext, Tokenizer, EOS_ID};
use crate::error::{Error, Result};
use crate::generator::Decoding;
use crate::model::{CammlModel, PrefixMode};
use crate::tensor::{Graph, ParamStore, Tensor};

/// How many context samples each example gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ShotsMode {
    Fixed(usize),
    /// Uniform over `low..=high`.
    Mixed { low: usize, high: usize },
}

impl Default for ShotsMode {
    fn default() -> Self {
        ShotsMode::Mixed { low: 1, high: 3 }
    }
}

impl ShotsMode {
    pub fn max(&self) -> usize {
        match *self {
            ShotsMode::Fixed(n) => n,
            ShotsMode::Mixed { high, .. } => high,
        }
    }
}

impl std::fmt::Display for ShotsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ShotsMode::Fixed(n) => write!(f, "fixed:{n}"),
            ShotsMode::Mixed { low, high } => write!(f, "mixed:{low}-{high}"),
        }
    }
}

impl std::str::FromStr for ShotsMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("shots mode `{s}` is not `fixed:N` or `mixed:LOW-HIGH`");
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "fixed" => {
                let n: usize = rest.parse().map_err(|_| bad())?;
                if n == 0 {
                    return Err("fixed shots must be at least 1".into());
                }
                Ok(ShotsMode::Fixed(n))
            }
            "mixed" => {
                let (lo, hi) = rest.split_once('-').ok_or_else(bad)?;
                let (low, high) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
                if low == 0 || low > high {
                    return Err(format!("mixed shots range {low}-{high} is empty or starts at 0"));
                }
                Ok(ShotsMode::Mixed { low, high })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for ShotsMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ShotsMode> for String {
    fn from(m: ShotsMode) -> String {
        m.to_string()
    }
}

pub fn sample_shots<R: Rng + ?Sized>(mode: ShotsMode, rng: &mut R) -> usize {
    match mode {
        ShotsMode::Fixed(n) => n,
        ShotsMode::Mixed { low, high } => rng.gen_range(low..=high),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shots: ShotsMode,
    /// Log a record every this many steps (0 disables periodic logging).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 2e-5,
            seed: 0,
            shots: ShotsMode::default(),
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies the accumulated gradients to every non-frozen parameter.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Shot count → examples in this step.
    pub shots: BTreeMap<usize, usize>,
    pub wall_ms: f64,
}

/// Frozen-side caches shared by training and evaluation: encoded contexts
/// per datastore id and exact retrieval results per query.
#[derive(Debug, Clone)]
pub struct ContextCache {
    contexts: HashMap<u64, EncodedContext>,
    images: HashMap<u64, Option<Tensor>>,
    /// Query id → (search depth, retrieved ids).
    neighbours: HashMap<u64, (usize, Vec<u64>)>,
    depth: usize,
}

impl ContextCache {
    pub fn new(model: &CammlModel, index: &DatastoreIndex, depth: usize) -> Result<Self> {
        let mut contexts = HashMap::new();
        for s in index.samples() {
            contexts.insert(s.id, model.encode_context(s)?);
        }
        Ok(Self {
            contexts,
            images: HashMap::new(),
            neighbours: HashMap::new(),
            depth,
        })
    }

    /// Top-`n` retrieved ids for `query` with leave-one-out exclusion of
    /// its id (fewer when the datastore runs out).
    pub fn neighbours(&mut self, model: &CammlModel, index: &DatastoreIndex, query: &MultimodalSample, n: usize) -> Result<&[u64]> {
        let cached = self.neighbours.get(&query.id).is_some_and(|(depth, _)| *depth >= n);
        if !cached {
            let depth = n.max(self.depth);
            let r = index.retrieve(
                &model.encoders.retrieval,
                query,
                depth,
                RetrievalMode::TextToImage,
                &HashSet::from([query.id]),
            )?;
            self.neighbours.insert(query.id, (depth, r.ids()));
        }
        let ids = &self.neighbours[&query.id].1;
        Ok(&ids[..n.min(ids.len())])
    }

    pub fn contexts(&mut self, model: &CammlModel, index: &DatastoreIndex, query: &MultimodalSample, n: usize) -> Result<Vec<EncodedContext>> {
        let ids: Vec<u64> = self.neighbours(model, index, query, n)?.to_vec();
        Ok(ids.iter().map(|id| self.contexts[id].clone()).collect())
    }

    pub fn image_tokens(&mut self, model: &CammlModel, query: &MultimodalSample) -> Result<Option<Tensor>> {
        if let std::collections::hash_map::Entry::Vacant(e) = self.images.entry(query.id) {
            e.insert(model.query_image_tokens(query)?);
        }
        Ok(self.images[&query.id].clone())
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Adam,
    pub cache: ContextCache,
    pub coverage: BTreeMap<usize, u64>,
    pub step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, model: &CammlModel, index: &DatastoreIndex) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            optimizer: Adam::new(config.lr),
            cache: ContextCache::new(model, index, config.shots.max())?,
            coverage: BTreeMap::new(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Next batch of indices into `n` training examples; reshuffled every epoch.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer update over a batch; returns the mean loss.
    pub fn train_step(&mut self, model: &mut CammlModel, index: &DatastoreIndex, batch: &[&MultimodalSample]) -> Result<StepRecord> {
        let start = Instant::now();
        model.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut shots = BTreeMap::new();
        for query in batch {
            let n = sample_shots(self.config.shots, &mut self.rng);
            let contexts = self.cache.contexts(model, index, query, n)?;
            let image = self.cache.image_tokens(model, query)?;
            let mut g = Graph::new();
            let loss = model.example_loss(&mut g, query, image.as_ref(), &contexts, PrefixMode::Retrieved)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    example_id: query.id,
                    shots: contexts.len(),
                    loss: value,
                });
            }
            g.backward(loss)?;
            for (id, grad) in g.param_grads() {
                model.store.accumulate_scaled(id, grad, scale);
            }
            total += value;
            *shots.entry(contexts.len()).or_insert(0) += 1;
            *self.coverage.entry(contexts.len()).or_insert(0) += 1;
        }
        self.optimizer.step(&mut model.store);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            loss: total * scale,
            shots,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Runs `steps` updates over `train`, writing one JSON line per step to
    /// `log` when given. Returns the per-step records.
    pub fn train(
        &mut self,
        model: &mut CammlModel,
        index: &DatastoreIndex,
        train: &[MultimodalSample],
        steps: usize,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepRecord>> {
        if train.is_empty() {
            return Err(Error::Config("no training examples".into()));
        }
        let mut records = Vec::with_capacity(steps);
        for _ in 0..steps {
            let picks = self.next_batch(train.len());
            let batch: Vec<&MultimodalSample> = picks.iter().map(|&i| &train[i]).collect();
            let record = self.train_step(model, index, &batch)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                w.write_all(b"\n")?;
            }
            records.push(record);
        }
        Ok(records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub query_id: u64,
    pub shots: usize,
    pub expected: String,
    pub generated: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub shots: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub generations: Vec<GenerationRecord>,
}

impl EvalReport {
    pub fn accuracy(&self, shots: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.shots == shots).map(|r| r.accuracy)
    }
}

/// Per-shot accuracy recomputed from generation records.
pub fn recount(generations: &[GenerationRecord]) -> Vec<EvalRow> {
    let mut by: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for g in generations {
        let e = by.entry(g.shots).or_insert((0, 0));
        e.0 += usize::from(g.generated == g.expected);
        e.1 += 1;
    }
    by.into_iter()
        .map(|(shots, (correct, total))| EvalRow {
            shots,
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
        .collect()
}

/// Turns generated ids back into words using a known vocabulary; unknown ids
/// render as `<id>`.
pub fn decode(ids: &[u32], tokenizer: &Tokenizer, known_words: &[String]) -> String {
    let lookup: HashMap<u32, &str> = known_words.iter().map(|w| (tokenizer.word_id(w), w.as_str())).collect();
    ids.iter()
        .filter(|&&id| id != EOS_ID)
        .map(|id| lookup.get(id).map_or_else(|| format!("<{id}>"), |w| w.to_string()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
pub struct EvalOptions<'a> {
    pub shots: &'a [usize],
    pub prefix: PrefixMode,
    /// Restrict decoding to these answers when given.
    pub candidates: Option<&'a [String]>,
    pub max_new: usize,
}

/// Exact-match accuracy of generated answers, one row per shot count.
pub fn evaluate(
    model: &CammlModel,
    index: &DatastoreIndex,
    cache: &mut ContextCache,
    queries: &[MultimodalSample],
    options: &EvalOptions<'_>,
    known_words: &[String],
) -> Result<EvalReport> {
    let tokenizer = &model.encoders.tokenizer;
    let candidate_ids: Option<Vec<Vec<u32>>> =
        options.candidates.map(|c| c.iter().map(|a| tokenizer.content_ids(a)).collect());
    let decoding = match &candidate_ids {
        Some(c) => Decoding::Constrained(c),
        None => Decoding::Greedy,
    };
    let mut generations = Vec::new();
    for &n in options.shots {
        for q in queries {
            let contexts = cache.contexts(model, index, q, n)?;
            let image = cache.image_tokens(model, q)?;
            let ids = model.answer(q, image.as_ref(), &contexts, options.prefix, decoding, options.max_new)?;
            let generated = decode(&ids, tokenizer, known_words);
            let expected = Tokenizer::words(q.answer.as_deref().unwrap_or_default()).join(" ");
            generations.push(GenerationRecord {
                query_id: q.id,
                shots: contexts.len(),
                correct: generated == expected,
                expected,
                generated,
            });
        }
    }
    Ok(EvalReport {
        rows: recount(&generations),
        generations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shots_mode_parses_and_prints() {
        for s in ["fixed:3", "mixed:1-3"] {
            assert_eq!(s.parse::<ShotsMode>().unwrap().to_string(), s);
        }
        assert!("mixed:3-1".parse::<ShotsMode>().is_err());
        assert!("fixed:0".parse::<ShotsMode>().is_err());
        assert!("some:1".parse::<ShotsMode>().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = vec![0.5, -3.0];
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn recount_groups_by_shots() {
        let rec = |shots, correct: bool| GenerationRecord {
            query_id: 0,
            shots,
            expected: "a".into(),
            generated: if correct { "a".into() } else { "b".into() },
            correct,
        };
        let rows = recount(&[rec(1, true), rec(1, false), rec(3, true)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].accuracy, 0.5);
        assert_eq!(rows[1].accuracy, 1.0);
    }
}
