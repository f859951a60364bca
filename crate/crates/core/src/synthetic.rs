//! Synthetic key→value task whose answers can only come from retrieved
//! context.
//!
//! A key is an unordered pair of code words. Its image lights, for each code
//! word, the pixel channel whose retrieval slot matches the word's token, so
//! a query's text ("what is ka zo") retrieves the images of its own key.
//! Each key is bound to one of the value words, and that binding appears only
//! in the datastore entries' answers. Evaluation keys are disjoint from the
//! training keys and their queries are fresh samples outside the datastore,
//! so the answer is never visible in the query and never memorizable.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::{DatastoreIndex, MultimodalSample, RetrievalMode};
use crate::encoders::{RawImage, RetrievalEmbedder, Tokenizer, CHANNELS};
use crate::error::{Error, Result};

const TEMPLATE: [&str; 2] = ["what", "is"];
const VALUE_WORDS: [&str; 24] = [
    "red", "blue", "green", "gold", "pink", "gray", "teal", "navy", "lime", "rose", "jade", "ruby", "amber", "ivory",
    "coral", "plum", "mint", "sand", "rust", "onyx", "opal", "sage", "snow", "wine",
];
const CONSONANTS: &str = "bdfgklmnprstvz";
const VOWELS: &str = "aeiou";

/// First id used for evaluation queries; datastore ids stay below it.
pub const EVAL_ID_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_keys: usize,
    pub eval_keys: usize,
    pub entries_per_key: usize,
    pub eval_queries_per_key: usize,
    pub values: usize,
    pub image_size: usize,
    /// Upper bound of the uniform background noise on every pixel channel.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_keys: 300,
            eval_keys: 64,
            entries_per_key: 4,
            eval_queries_per_key: 2,
            values: 16,
            image_size: 8,
            noise: 0.05,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub code_words: Vec<String>,
    pub answers: Vec<String>,
    /// Every indexed sample (training and evaluation keys).
    pub datastore: Vec<MultimodalSample>,
    /// Training queries; each is also a datastore entry.
    pub train: Vec<MultimodalSample>,
    pub eval: Vec<MultimodalSample>,
    /// Evaluation query id → ids of datastore entries sharing its key.
    pub ground_truth: BTreeMap<u64, Vec<u64>>,
}

impl SyntheticDataset {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    /// Answers tokenized as content ids, for constrained decoding.
    pub fn answer_candidates(&self, tokenizer: &Tokenizer) -> Vec<Vec<u32>> {
        self.answers.iter().map(|a| tokenizer.content_ids(a)).collect()
    }
}

/// Picks code words whose token ids and retrieval slots are all distinct and
/// stay clear of the template and value words.
fn choose_code_words(count: usize, embedder: &RetrievalEmbedder, tokenizer: &Tokenizer, answers: &[String]) -> Result<Vec<String>> {
    let mut used_ids: HashSet<u32> = TEMPLATE.iter().map(|w| tokenizer.word_id(w)).collect();
    let mut used_slots: HashSet<usize> = used_ids.iter().map(|&id| embedder.slot_of_token(id)).collect();
    used_ids.extend(answers.iter().map(|w| tokenizer.word_id(w)));
    let max_slot = embedder.slots();
    let mut out = Vec::new();
    'outer: for c in CONSONANTS.chars() {
        for v in VOWELS.chars() {
            let word = format!("{c}{v}");
            let id = tokenizer.word_id(&word);
            let slot = embedder.slot_of_token(id);
            if used_ids.contains(&id) || used_slots.contains(&slot) || slot >= max_slot {
                continue;
            }
            used_ids.insert(id);
            used_slots.insert(slot);
            out.push(word);
            if out.len() == count {
                break 'outer;
            }
        }
    }
    if out.len() < count {
        return Err(Error::Config(format!(
            "only {} usable code words for {count} needed; enlarge the retrieval slots",
            out.len()
        )));
    }
    Ok(out)
}

fn render_key(
    words: (&str, &str),
    spec: &SyntheticSpec,
    embedder: &RetrievalEmbedder,
    tokenizer: &Tokenizer,
    rng: &mut ChaCha8Rng,
) -> Result<RawImage> {
    let s = spec.image_size;
    let mut img = RawImage::blank(s, s);
    for p in img.pixels.iter_mut() {
        *p = rng.gen_range(0.0..spec.noise);
    }
    let cell = embedder.cell();
    let cells_per_row = s.div_ceil(cell);
    for w in [words.0, words.1] {
        let stat = embedder.slot_of_token(tokenizer.word_id(w));
        let (cell_index, channel) = (stat / CHANNELS, stat % CHANNELS);
        let (cx, cy) = (cell_index % cells_per_row, cell_index / cells_per_row);
        if cy * cell >= s {
            return Err(Error::Config(format!("image size {s} too small to draw code word `{w}`")));
        }
        for y in cy * cell..((cy + 1) * cell).min(s) {
            for x in cx * cell..((cx + 1) * cell).min(s) {
                img.set_pixel(x, y, channel, 1.0);
            }
        }
    }
    Ok(img)
}

pub fn make_synthetic_dataset(spec: &SyntheticSpec, embedder: &RetrievalEmbedder, tokenizer: &Tokenizer) -> Result<SyntheticDataset> {
    let keys_needed = spec.train_keys + spec.eval_keys;
    if keys_needed < 8 || spec.train_keys == 0 || spec.eval_keys == 0 {
        return Err(Error::Config("synthetic task needs at least 8 keys, with training and evaluation keys".into()));
    }
    if spec.entries_per_key == 0 || spec.eval_queries_per_key == 0 {
        return Err(Error::Config("entries_per_key and eval_queries_per_key must be positive".into()));
    }
    if spec.values < 2 || spec.values > VALUE_WORDS.len() {
        return Err(Error::Config(format!("values must lie in 2..={}", VALUE_WORDS.len())));
    }
    if !(0.0..1.0).contains(&spec.noise) || spec.noise == 0.0 {
        return Err(Error::Config("noise must lie in (0, 1)".into()));
    }
    let mut answers: Vec<String> = Vec::new();
    let mut answer_ids = HashSet::new();
    for w in VALUE_WORDS {
        if answers.len() == spec.values {
            break;
        }
        let id = tokenizer.word_id(w);
        if !TEMPLATE.iter().any(|t| tokenizer.word_id(t) == id) && answer_ids.insert(id) {
            answers.push(w.to_string());
        }
    }
    if answers.len() < spec.values {
        return Err(Error::Config("vocabulary too small for distinct value tokens".into()));
    }
    // Smallest code-word count whose pairs cover every key.
    let mut k = 2;
    while k * (k - 1) / 2 < keys_needed {
        k += 1;
    }
    let code_words = choose_code_words(k, embedder, tokenizer, &answers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(keys_needed);

    let mut datastore = Vec::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut ground_truth = BTreeMap::new();
    let mut next_id = 0u64;
    for (key_index, &(a, b)) in pairs.iter().enumerate() {
        let is_eval = key_index >= spec.train_keys;
        // Evaluation keys cycle through the values so that every constant
        // answer scores exactly chance.
        let value = if is_eval {
            (key_index - spec.train_keys) % spec.values
        } else {
            rng.gen_range(0..spec.values)
        };
        let words = (code_words[a].as_str(), code_words[b].as_str());
        let text = format!("{} {} {} {}", TEMPLATE[0], TEMPLATE[1], words.0, words.1);
        let mut key_ids = Vec::new();
        for _ in 0..spec.entries_per_key {
            let sample = MultimodalSample {
                id: next_id,
                image: Some(render_key(words, spec, embedder, tokenizer, &mut rng)?),
                text: text.clone(),
                answer: Some(answers[value].clone()),
            };
            key_ids.push(next_id);
            next_id += 1;
            if !is_eval {
                train.push(sample.clone());
            }
            datastore.push(sample);
        }
        if is_eval {
            for _ in 0..spec.eval_queries_per_key {
                let id = EVAL_ID_BASE + eval.len() as u64;
                eval.push(MultimodalSample {
                    id,
                    image: Some(render_key(words, spec, embedder, tokenizer, &mut rng)?),
                    text: text.clone(),
                    answer: Some(answers[value].clone()),
                });
                ground_truth.insert(id, key_ids.clone());
            }
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        code_words,
        answers,
        datastore,
        train,
        eval,
        ground_truth,
    })
}

/// Checks that every evaluation query's exact top-`n` retrieval holds at
/// least one sample carrying its answer, and that no answer word occurs in
/// its query text. Returns the offending query ids.
pub fn verify_construction(
    data: &SyntheticDataset,
    index: &DatastoreIndex,
    embedder: &RetrievalEmbedder,
    n: usize,
) -> Result<Vec<u64>> {
    let mut bad = Vec::new();
    for q in &data.eval {
        let answer = q.answer.as_deref().unwrap_or_default();
        let leaked = crate::encoders::Tokenizer::words(&q.text).iter().any(|w| w == answer);
        let r = index.retrieve(embedder, q, n, RetrievalMode::TextToImage, &HashSet::from([q.id]))?;
        let hit = r
            .ids()
            .iter()
            .any(|id| index.sample(*id).and_then(|s| s.answer.as_deref()) == Some(answer));
        if leaked || !hit {
            bad.push(q.id);
        }
    }
    Ok(bad)
}
