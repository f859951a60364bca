//! Frozen stand-ins for the pretrained encoders, plus the trainable
//! query-image projector.
//!
//! * [`VisionEncoder`]: non-overlapping patches, a fixed linear map and a
//!   2-D sinusoidal position signal.
//! * [`Tokenizer`] and [`TextEmbedder`]: hash-bucketed words and a fixed
//!   embedding table.
//! * [`RetrievalEmbedder`]: images and texts are both reduced to a shared
//!   `slots`-dimensional feature vector (cell means for images, token counts
//!   for text), passed through one fixed projection and L2-normalized, so
//!   image/text cosine similarity is meaningful.
//!
//! All frozen weights are derived from [`EncoderConfig::seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datastore::MultimodalSample;
use crate::nn::{Init, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
const FIRST_CONTENT_ID: u32 = 3;
pub const CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image {width}x{height} is not divisible by patch size {patch}")]
    MisalignedImage { width: usize, height: usize, patch: usize },
    #[error("image {width}x{height}x3 needs {expected} pixel values, got {got}")]
    PixelCount {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
    #[error("pixel value {0} outside the unit interval")]
    PixelRange(f64),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("encoder configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub seed: u64,
    /// Token width shared by encoders, perceiver and generator.
    pub d: usize,
    pub patch: usize,
    pub vocab: usize,
    pub retrieval_dim: usize,
    /// Size of the shared image/text feature space fed to the retrieval projection.
    pub retrieval_slots: usize,
    /// Side length of the pixel cells averaged for retrieval features.
    pub retrieval_cell: usize,
    pub projector_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            d: 64,
            patch: 4,
            vocab: 512,
            retrieval_dim: 64,
            retrieval_slots: 64,
            retrieval_cell: 1,
            projector_hidden: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(EncoderError::Config(m));
        if self.d == 0 || self.patch == 0 || self.retrieval_cell == 0 {
            return fail("d, patch and retrieval_cell must be positive".into());
        }
        if self.vocab <= FIRST_CONTENT_ID as usize {
            return fail(format!("vocabulary of {} leaves no room for content tokens", self.vocab));
        }
        if self.retrieval_dim == 0 || self.retrieval_slots == 0 {
            return fail("retrieval_dim and retrieval_slots must be positive".into());
        }
        if self.projector_hidden == 0 {
            return fail("projector_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Deterministic RNG for one named frozen weight.
pub(crate) fn derived_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(tag.as_bytes()).finalize();
    ChaCha8Rng::from_seed(digest.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels with interleaved RGB channels, each in `[0, 1]`.
    pub pixels: Vec<f64>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        let expected = width * height * CHANNELS;
        if pixels.len() != expected {
            return Err(EncoderError::PixelCount {
                width,
                height,
                expected,
                got: pixels.len(),
            });
        }
        if let Some(&bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(EncoderError::PixelRange(bad));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height * CHANNELS],
        }
    }

    pub fn pixel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * CHANNELS + c] = v;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids between the BOS and EOS markers.
    pub fn content(&self) -> &[u32] {
        let start = usize::from(self.ids.first() == Some(&BOS_ID));
        let end = self.ids.len() - usize::from(self.ids.last() == Some(&EOS_ID) && self.ids.len() > start);
        &self.ids[start..end]
    }
}

/// Lowercasing word/punctuation tokenizer hashed into a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: usize,
}

impl Tokenizer {
    pub fn new(vocab: usize) -> Result<Self> {
        if vocab <= FIRST_CONTENT_ID as usize || vocab > u32::MAX as usize {
            return Err(EncoderError::Config(format!("unusable vocabulary size {vocab}")));
        }
        Ok(Self { vocab })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Alphanumeric runs become words; any other non-space character is a
    /// token of its own.
    pub fn words(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut current = String::new();
        for ch in text.chars() {
            if ch.is_alphanumeric() {
                current.extend(ch.to_lowercase());
                continue;
            }
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
        out
    }

    pub fn word_id(&self, word: &str) -> u32 {
        let digest = Sha256::digest(word.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
        FIRST_CONTENT_ID + (h % (self.vocab as u64 - FIRST_CONTENT_ID as u64)) as u32
    }

    pub fn content_ids(&self, text: &str) -> Vec<u32> {
        Self::words(text).iter().map(|w| self.word_id(w)).collect()
    }

    /// `BOS content… EOS`; empty text gives `[BOS, EOS]`.
    pub fn tokenize(&self, text: &str) -> TokenizedText {
        let mut ids = vec![BOS_ID];
        ids.extend(self.content_ids(text));
        ids.push(EOS_ID);
        TokenizedText { ids }
    }
}

/// Fixed 2-D sinusoidal signal: the first half of the width encodes the
/// patch row, the second half the patch column.
pub fn position_signal_2d(row: usize, col: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for (offset, pos) in [(0, row), (half, col)] {
        let pairs = half / 2;
        for k in 0..pairs {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
            out[offset + 2 * k] = (pos as f64 * freq).sin();
            out[offset + 2 * k + 1] = (pos as f64 * freq).cos();
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct VisionEncoder {
    patch: usize,
    d: usize,
    proj: Tensor,
}

impl VisionEncoder {
    pub fn new(config: &EncoderConfig) -> Self {
        let patch_dim = config.patch * config.patch * CHANNELS;
        let mut rng = derived_rng(config.seed, "enc.vision.patch_proj");
        Self {
            patch: config.patch,
            d: config.d,
            proj: Tensor::randn(&[patch_dim, config.d], 1.0 / (patch_dim as f64).sqrt(), &mut rng),
        }
    }

    pub fn token_count(&self, width: usize, height: usize) -> usize {
        (width / self.patch) * (height / self.patch)
    }

    pub fn encode(&self, img: &RawImage) -> Result<Tensor> {
        let p = self.patch;
        if !img.width.is_multiple_of(p) || !img.height.is_multiple_of(p) {
            return Err(EncoderError::MisalignedImage {
                width: img.width,
                height: img.height,
                patch: p,
            });
        }
        let (gw, gh) = (img.width / p, img.height / p);
        let patch_dim = p * p * CHANNELS;
        let mut patches = Vec::with_capacity(gw * gh * patch_dim);
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        for c in 0..CHANNELS {
                            patches.push(img.pixel(px * p + x, py * p + y, c));
                        }
                    }
                }
            }
        }
        let patches = Tensor::new(&[gw * gh, patch_dim], patches)?;
        let mut tokens = patches.matmul(&self.proj)?;
        for py in 0..gh {
            for px in 0..gw {
                let row = py * gw + px;
                let signal = position_signal_2d(py, px, self.d);
                for (t, s) in tokens.data_mut()[row * self.d..(row + 1) * self.d].iter_mut().zip(signal) {
                    *t += s;
                }
            }
        }
        Ok(tokens)
    }

    pub fn width(&self) -> usize {
        self.d
    }
}

#[derive(Debug, Clone)]
pub struct TextEmbedder {
    table: Tensor,
}

impl TextEmbedder {
    pub fn new(config: &EncoderConfig) -> Self {
        let mut rng = derived_rng(config.seed, "enc.text.table");
        Self {
            table: Tensor::randn(&[config.vocab, config.d], 1.0, &mut rng),
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn embed(&self, tokens: &TokenizedText) -> Result<Tensor> {
        let (vocab, d) = (self.table.rows(), self.table.cols());
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &id in &tokens.ids {
            if id as usize >= vocab {
                return Err(EncoderError::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(self.table.row(id as usize));
        }
        Ok(Tensor::new(&[tokens.len(), d], data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalEmbedding {
    pub vector: Vec<f64>,
    pub modality: Modality,
}

impl RetrievalEmbedding {
    pub fn cosine(&self, other: &RetrievalEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalEmbedder {
    slots: usize,
    cell: usize,
    tokenizer: Tokenizer,
    proj: Tensor,
}

impl RetrievalEmbedder {
    /// With `slots <= dim` the projection has orthonormal rows, so cosine
    /// similarity between feature vectors survives the projection exactly.
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        let (slots, dim) = (config.retrieval_slots, config.retrieval_dim);
        let mut rng = derived_rng(config.seed, "ret.proj");
        let mut proj = Tensor::randn(&[slots, dim], 1.0 / (dim as f64).sqrt(), &mut rng);
        if slots <= dim {
            orthonormalize_rows(proj.data_mut(), slots, dim);
        }
        Ok(Self {
            slots,
            cell: config.retrieval_cell,
            tokenizer: Tokenizer::new(config.vocab)?,
            proj,
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.cols()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn projection(&self) -> &Tensor {
        &self.proj
    }

    /// Slot that statistic `index` of an image lands in.
    pub fn slot_of_statistic(&self, index: usize) -> usize {
        index % self.slots
    }

    pub fn slot_of_token(&self, id: u32) -> usize {
        id as usize % self.slots
    }

    /// Mean of each channel over each `cell × cell` block (row-major blocks,
    /// channel-minor), folded into the shared slots.
    pub fn image_features(&self, img: &RawImage) -> Vec<f64> {
        let mut feats = vec![0.0; self.slots];
        let (cw, ch) = (img.width.div_ceil(self.cell), img.height.div_ceil(self.cell));
        for by in 0..ch {
            for bx in 0..cw {
                let (x0, y0) = (bx * self.cell, by * self.cell);
                let (x1, y1) = ((x0 + self.cell).min(img.width), (y0 + self.cell).min(img.height));
                let n = ((x1 - x0) * (y1 - y0)) as f64;
                for c in 0..CHANNELS {
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sum += img.pixel(x, y, c);
                        }
                    }
                    let stat = (by * cw + bx) * CHANNELS + c;
                    feats[self.slot_of_statistic(stat)] += sum / n;
                }
            }
        }
        feats
    }

    /// Bag of content-token counts, folded into the shared slots.
    pub fn text_features(&self, text: &str) -> Vec<f64> {
        let mut feats = vec![0.0; self.slots];
        for id in self.tokenizer.content_ids(text) {
            feats[self.slot_of_token(id)] += 1.0;
        }
        feats
    }

    fn project(&self, features: &[f64], modality: Modality) -> RetrievalEmbedding {
        let dim = self.dim();
        let mut v = vec![0.0; dim];
        for (s, &f) in features.iter().enumerate() {
            if f != 0.0 {
                for (o, w) in v.iter_mut().zip(self.proj.row(s)) {
                    *o += f * w;
                }
            }
        }
        let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Featureless input (blank image, empty text): fall back to the
            // projection of the all-ones feature vector.
            for s in 0..self.slots {
                for (o, w) in v.iter_mut().zip(self.proj.row(s)) {
                    *o += w;
                }
            }
            norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
        v.iter_mut().for_each(|x| *x /= norm);
        RetrievalEmbedding { vector: v, modality }
    }

    pub fn embed_image(&self, img: &RawImage) -> RetrievalEmbedding {
        self.project(&self.image_features(img), Modality::Image)
    }

    pub fn embed_text(&self, text: &str) -> RetrievalEmbedding {
        self.project(&self.text_features(text), Modality::Text)
    }
}

fn orthonormalize_rows(data: &mut [f64], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|c| data[i * cols + c] * data[j * cols + c]).sum();
            for c in 0..cols {
                data[i * cols + c] -= dot * data[j * cols + c];
            }
        }
        let norm = (0..cols).map(|c| data[i * cols + c].powi(2)).sum::<f64>().sqrt();
        for c in 0..cols {
            data[i * cols + c] /= norm;
        }
    }
}

/// Per-sample token matrices fed to the perceiver.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    /// `T_img × d`; zero rows for text-only samples.
    pub vision_tokens: Tensor,
    /// `T_txt × d`.
    pub text_tokens: Tensor,
    pub source_id: u64,
}

impl EncodedContext {
    pub fn raw_len(&self) -> usize {
        self.vision_tokens.rows() + self.text_tokens.rows()
    }
}

/// Two-layer MLP mapping query-image features into generator token space.
/// Trainable; grouped with the generator.
#[derive(Debug, Clone)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn new(store: &mut ParamStore, in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> crate::tensor::Result<Self> {
        let mut rng = derived_rng(seed, "proj");
        Ok(Self {
            fc1: Linear::new(store, "proj.fc1", in_dim, hidden, Init::Normal(1.0 / (in_dim as f64).sqrt()), &mut rng)?,
            fc2: Linear::new(store, "proj.fc2", hidden, out_dim, Init::Normal(1.0 / (hidden as f64).sqrt()), &mut rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image_tokens: Var) -> crate::tensor::Result<Var> {
        let width = g.value(image_tokens).cols();
        if width != self.fc1.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "project_query_image",
                lhs: g.shape(image_tokens).to_vec(),
                rhs: vec![self.fc1.in_dim, self.fc1.out_dim],
            });
        }
        let h = self.fc1.forward(g, store, image_tokens)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// The frozen encoder bundle.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub vision: VisionEncoder,
    pub text: TextEmbedder,
    pub retrieval: RetrievalEmbedder,
}

impl Encoders {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            tokenizer: Tokenizer::new(config.vocab)?,
            vision: VisionEncoder::new(config),
            text: TextEmbedder::new(config),
            retrieval: RetrievalEmbedder::new(config)?,
        })
    }

    /// Text a context sample contributes: its text followed by its answer.
    pub fn context_text(sample: &MultimodalSample) -> String {
        match &sample.answer {
            Some(a) => format!("{} {}", sample.text, a),
            None => sample.text.clone(),
        }
    }

    pub fn encode_image_or_empty(&self, image: Option<&RawImage>) -> Result<Tensor> {
        match image {
            Some(img) => self.vision.encode(img),
            None => Ok(Tensor::zeros(&[0, self.config.d])),
        }
    }

    pub fn encode_context(&self, sample: &MultimodalSample) -> Result<EncodedContext> {
        let vision_tokens = self.encode_image_or_empty(sample.image.as_ref())?;
        let text_tokens = self.text.embed(&self.tokenizer.tokenize(&Self::context_text(sample)))?;
        Ok(EncodedContext {
            vision_tokens,
            text_tokens,
            source_id: sample.id,
        })
    }

    /// Every frozen weight with its checkpoint-style name.
    pub fn frozen_weights(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.vision.patch_proj", &self.vision.proj),
            ("enc.text.table", &self.text.table),
            ("ret.proj", &self.retrieval.proj),
        ]
    }

    /// SHA-256 over all frozen weights.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.frozen_weights() {
            hasher.update(name.as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        crate::tensor::hex_string(&hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoders() -> Encoders {
        Encoders::new(&EncoderConfig::default()).unwrap()
    }

    #[test]
    fn blank_image_tokens_are_pure_position_signal() {
        let enc = encoders();
        let tokens = enc.vision.encode(&RawImage::blank(8, 8)).unwrap();
        assert_eq!(tokens.shape(), &[4, 64]);
        for (i, (py, px)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            assert_eq!(tokens.row(i), position_signal_2d(py, px, 64).as_slice());
        }
        assert_ne!(tokens.row(0), tokens.row(3));
    }

    #[test]
    fn token_count_law() {
        let enc = encoders();
        let tokens = enc.vision.encode(&RawImage::blank(16, 16)).unwrap();
        assert_eq!(tokens.rows(), 16);
        let tokens = enc.vision.encode(&RawImage::blank(16, 8)).unwrap();
        assert_eq!(tokens.rows(), enc.vision.token_count(16, 8));
        assert_eq!(tokens.rows(), 8);
    }

    #[test]
    fn misaligned_image_names_patch_size() {
        let err = encoders().vision.encode(&RawImage::blank(10, 8)).unwrap_err();
        assert!(err.to_string().contains("patch size 4"), "{err}");
    }

    #[test]
    fn tokenizer_examples() {
        let tok = Tokenizer::new(512).unwrap();
        assert_eq!(tok.tokenize("").ids, vec![BOS_ID, EOS_ID]);
        assert_eq!(tok.tokenize("Hello, world"), tok.tokenize("hello , WORLD"));
        let ids = tok.tokenize("a b a").ids;
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[1], ids[3]);
        assert_eq!(Tokenizer::words("what's up?"), vec!["what", "'", "s", "up", "?"]);
        for id in tok.content_ids("the quick brown fox jumps over the lazy dog") {
            assert!((3..512).contains(&id));
        }
    }

    #[test]
    fn embed_text_is_table_lookup() {
        let enc = encoders();
        let out = enc.text.embed(&TokenizedText { ids: vec![1, 2, 2] }).unwrap();
        assert_eq!(out.row(0), enc.text.table().row(1));
        assert_eq!(out.row(1), enc.text.table().row(2));
        assert_eq!(out.row(1), out.row(2));
        let err = enc.text.embed(&TokenizedText { ids: vec![512] }).unwrap_err();
        assert!(matches!(err, EncoderError::TokenOutOfRange { id: 512, .. }));
    }

    #[test]
    fn retrieval_embeddings_are_unit_and_cross_modal() {
        let enc = encoders();
        let mut img = RawImage::blank(8, 8);
        img.set_pixel(3, 2, 1, 0.8);
        let a = enc.retrieval.embed_image(&img);
        let b = enc.retrieval.embed_text("a red square");
        let empty = enc.retrieval.embed_text("");
        let blank = enc.retrieval.embed_image(&RawImage::blank(8, 8));
        for e in [&a, &b, &empty, &blank] {
            assert_eq!(e.vector.len(), 64);
            let n = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert!((e.cosine(e) - 1.0).abs() < 1e-9);
        }
        assert_eq!(a, enc.retrieval.embed_image(&img));
        assert!(a.cosine(&b).abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn orthonormal_projection_preserves_feature_cosine() {
        let enc = encoders();
        let text = "glyph seven";
        let ids = enc.tokenizer.content_ids(text);
        // An image lighting exactly the slots of the text's tokens.
        let mut img = RawImage::blank(8, 8);
        for id in &ids {
            let stat = enc.retrieval.slot_of_token(*id);
            let (cell, c) = (stat / CHANNELS, stat % CHANNELS);
            img.set_pixel(cell % 8, cell / 8, c, 1.0);
        }
        let sim = enc.retrieval.embed_image(&img).cosine(&enc.retrieval.embed_text(text));
        assert!((sim - 1.0).abs() < 1e-9, "{sim}");
    }

    #[test]
    fn frozen_weights_are_seed_determined() {
        let a = encoders();
        let b = encoders();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let other = Encoders::new(&EncoderConfig {
            seed: 99,
            ..EncoderConfig::default()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
        let names: Vec<_> = a.frozen_weights().iter().map(|(n, _)| *n).collect();
        assert!(names.iter().all(|n| n.starts_with("enc.") || n.starts_with("ret.")));
    }
}
