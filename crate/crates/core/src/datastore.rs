//! Exact-search retrieval datastore.
//!
//! Entries are indexed by the retrieval embedding of their image. Queries are
//! embedded from their text (cross-modal, the default) or their image, and
//! scored against every row.
//!
//! Index file layout, little-endian:
//!
//! ```text
//! magic "CMIX" | version u32 | d_r u32 | count u64
//! embeddings f32 × count·d_r
//! ids u64 × count
//! count × { len u32, UTF-8 JSON sample }
//! crc32 of everything above, u32
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{RawImage, RetrievalEmbedder};

pub const INDEX_MAGIC: &[u8; 4] = b"CMIX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<RawImage>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    TextToImage,
    ImageToImage,
}

impl std::fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RetrievalMode::TextToImage => "text_to_image",
            RetrievalMode::ImageToImage => "image_to_image",
        })
    }
}

impl std::str::FromStr for RetrievalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text_to_image" | "text" => Ok(RetrievalMode::TextToImage),
            "image_to_image" | "image" => Ok(RetrievalMode::ImageToImage),
            other => Err(format!("unknown retrieval mode `{other}`")),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("cannot build an index from zero samples")]
    Empty,
    #[error("samples without an image cannot be indexed: ids {0:?}")]
    MissingImage(Vec<u64>),
    #[error("duplicate sample id {0}")]
    DuplicateId(u64),
    #[error("sample {0} has empty text")]
    EmptyText(u64),
    #[error("requested zero results")]
    ZeroResults,
    #[error("no entries left to search after exclusions")]
    NothingAvailable,
    #[error("{mode} retrieval needs a query {needs}")]
    WrongModality { mode: RetrievalMode, needs: &'static str },
    #[error("query embedding has dimension {got}, index expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index file: bad magic bytes")]
    BadMagic,
    #[error("unsupported index version {0}")]
    UnsupportedVersion(u32),
    #[error("index file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("index checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("index file has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("index payload record {index} is invalid: {reason}")]
    BadPayload { index: usize, reason: String },
}

pub type Result<T, E = DatastoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// `(id, score)` by descending score, ties by ascending id.
    pub hits: Vec<(u64, f64)>,
    pub mode: RetrievalMode,
    /// Fewer than the requested number of entries were available.
    pub short: bool,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.0).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatastoreIndex {
    dim: usize,
    embeddings: Vec<f32>,
    ids: Vec<u64>,
    samples: Vec<MultimodalSample>,
}

impl DatastoreIndex {
    pub fn build(samples: &[MultimodalSample], embedder: &RetrievalEmbedder) -> Result<Self> {
        if samples.is_empty() {
            return Err(DatastoreError::Empty);
        }
        let missing: Vec<u64> = samples.iter().filter(|s| s.image.is_none()).map(|s| s.id).collect();
        if !missing.is_empty() {
            return Err(DatastoreError::MissingImage(missing));
        }
        let mut sorted: Vec<MultimodalSample> = samples.to_vec();
        sorted.sort_by_key(|s| s.id);
        for pair in sorted.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(DatastoreError::DuplicateId(pair[0].id));
            }
        }
        if let Some(s) = sorted.iter().find(|s| s.text.is_empty()) {
            return Err(DatastoreError::EmptyText(s.id));
        }
        let dim = embedder.dim();
        let mut embeddings = Vec::with_capacity(sorted.len() * dim);
        for s in &sorted {
            let e = embedder.embed_image(s.image.as_ref().expect("checked above"));
            embeddings.extend(e.vector.iter().map(|&v| v as f32));
        }
        Ok(Self {
            dim,
            embeddings,
            ids: sorted.iter().map(|s| s.id).collect(),
            samples: sorted,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn samples(&self) -> &[MultimodalSample] {
        &self.samples
    }

    pub fn sample(&self, id: u64) -> Option<&MultimodalSample> {
        self.ids.binary_search(&id).ok().map(|i| &self.samples[i])
    }

    /// Embeds `query` according to `mode` and searches the index.
    pub fn retrieve(
        &self,
        embedder: &RetrievalEmbedder,
        query: &MultimodalSample,
        n: usize,
        mode: RetrievalMode,
        exclude: &HashSet<u64>,
    ) -> Result<RetrievalResult> {
        let vector = match mode {
            RetrievalMode::TextToImage => {
                if query.text.is_empty() {
                    return Err(DatastoreError::WrongModality { mode, needs: "text" });
                }
                embedder.embed_text(&query.text).vector
            }
            RetrievalMode::ImageToImage => match &query.image {
                Some(img) => embedder.embed_image(img).vector,
                None => return Err(DatastoreError::WrongModality { mode, needs: "image" }),
            },
        };
        let (hits, short) = self.search(&vector, n, exclude)?;
        Ok(RetrievalResult { hits, mode, short })
    }

    /// Exact top-`n` by dot product over every non-excluded row.
    pub fn search(&self, query: &[f64], n: usize, exclude: &HashSet<u64>) -> Result<(Vec<(u64, f64)>, bool)> {
        if n == 0 {
            return Err(DatastoreError::ZeroResults);
        }
        if query.len() != self.dim {
            return Err(DatastoreError::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        let mut scored: Vec<(u64, f64)> = self
            .ids
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(id))
            .map(|(row, &id)| (id, dot(self.embedding(row), query)))
            .collect();
        if scored.is_empty() {
            return Err(DatastoreError::NothingAvailable);
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let short = scored.len() < n;
        scored.truncate(n);
        Ok((scored, short))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for s in &self.samples {
            let json = serde_json::to_vec(s).expect("samples serialize");
            out.extend_from_slice(&(json.len() as u32).to_le_bytes());
            out.extend_from_slice(&json);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Validation order: magic, version, framing (truncation), checksum,
    /// then record contents.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Reader { bytes, pos: 0 };
        if c.take(4, "magic")? != INDEX_MAGIC {
            return Err(DatastoreError::BadMagic);
        }
        let version = c.u32("version")?;
        if version != INDEX_VERSION {
            return Err(DatastoreError::UnsupportedVersion(version));
        }
        let dim = c.u32("dimension")? as usize;
        let count = c.u64("count")? as usize;
        let emb_bytes = count
            .checked_mul(dim)
            .and_then(|x| x.checked_mul(4))
            .ok_or(DatastoreError::Truncated("embeddings"))?;
        let emb = c.take(emb_bytes, "embeddings")?;
        let id_bytes = c.take(count.checked_mul(8).ok_or(DatastoreError::Truncated("ids"))?, "ids")?;
        let mut records = Vec::new();
        for _ in 0..count {
            let len = c.u32("payload length")? as usize;
            records.push(c.take(len, "payload")?);
        }
        let body_end = c.pos;
        let stored = c.u32("checksum")?;
        if c.pos != bytes.len() {
            return Err(DatastoreError::TrailingBytes(bytes.len() - c.pos));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(DatastoreError::ChecksumMismatch { stored, computed });
        }
        let embeddings = emb.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let ids: Vec<u64> = id_bytes.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect();
        let mut samples = Vec::with_capacity(count);
        for (index, rec) in records.into_iter().enumerate() {
            let sample: MultimodalSample = serde_json::from_slice(rec).map_err(|e| DatastoreError::BadPayload {
                index,
                reason: e.to_string(),
            })?;
            if sample.id != ids[index] {
                return Err(DatastoreError::BadPayload {
                    index,
                    reason: format!("record id {} does not match index id {}", sample.id, ids[index]),
                });
            }
            samples.push(sample);
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DatastoreError::BadPayload {
                index: 0,
                reason: "ids are not strictly ascending".into(),
            });
        }
        Ok(Self {
            dim,
            embeddings,
            ids,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn dot(row: &[f32], query: &[f64]) -> f64 {
    row.iter().zip(query).map(|(&a, &b)| a as f64 * b).sum()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(DatastoreError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(DatastoreError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn embedder() -> RetrievalEmbedder {
        RetrievalEmbedder::new(&EncoderConfig::default()).unwrap()
    }

    fn sample(id: u64, seed: u64) -> MultimodalSample {
        let pixels = (0..8 * 8 * 3).map(|i| ((i as u64 * 7 + seed * 13) % 17) as f64 / 16.0).collect();
        MultimodalSample {
            id,
            image: Some(RawImage::new(8, 8, pixels).unwrap()),
            text: format!("sample {id}"),
            answer: Some("yes".into()),
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let e = embedder();
        assert!(matches!(DatastoreIndex::build(&[], &e), Err(DatastoreError::Empty)));
        let mut s = sample(4, 1);
        s.image = None;
        match DatastoreIndex::build(&[sample(1, 1), s], &e) {
            Err(DatastoreError::MissingImage(ids)) => assert_eq!(ids, vec![4]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            DatastoreIndex::build(&[sample(3, 1), sample(3, 2)], &e),
            Err(DatastoreError::DuplicateId(3))
        ));
    }

    #[test]
    fn self_query_ranks_first_and_exclusion_holds() {
        let e = embedder();
        let samples: Vec<_> = (0..20).map(|i| sample(100 - i, i)).collect();
        let index = DatastoreIndex::build(&samples, &e).unwrap();
        assert!(index.ids().windows(2).all(|w| w[0] < w[1]));
        let q = &samples[5];
        let r = index
            .retrieve(&e, q, 3, RetrievalMode::ImageToImage, &HashSet::new())
            .unwrap();
        assert_eq!(r.hits[0].0, q.id);
        assert!((r.hits[0].1 - 1.0).abs() < 1e-6);
        let r = index
            .retrieve(&e, q, 20, RetrievalMode::ImageToImage, &HashSet::from([q.id]))
            .unwrap();
        assert!(!r.ids().contains(&q.id));
        assert!(r.short);
        assert_eq!(r.hits.len(), 19);
    }

    #[test]
    fn modality_must_match_mode() {
        let e = embedder();
        let index = DatastoreIndex::build(&[sample(1, 1)], &e).unwrap();
        let q = MultimodalSample {
            id: 9,
            image: None,
            text: "hi".into(),
            answer: None,
        };
        assert!(matches!(
            index.retrieve(&e, &q, 1, RetrievalMode::ImageToImage, &HashSet::new()),
            Err(DatastoreError::WrongModality { .. })
        ));
        assert!(index.retrieve(&e, &q, 1, RetrievalMode::TextToImage, &HashSet::new()).is_ok());
    }

    #[test]
    fn byte_round_trip_and_corruption() {
        let e = embedder();
        let index = DatastoreIndex::build(&(0..5).map(|i| sample(i, i)).collect::<Vec<_>>(), &e).unwrap();
        let bytes = index.to_bytes();
        assert_eq!(DatastoreIndex::from_bytes(&bytes).unwrap(), index);
        assert!(matches!(DatastoreIndex::from_bytes(&[]), Err(DatastoreError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(DatastoreIndex::from_bytes(&bad), Err(DatastoreError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(DatastoreIndex::from_bytes(&bad), Err(DatastoreError::UnsupportedVersion(2))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 20] ^= 0x01; // inside the last payload record
        assert!(matches!(DatastoreIndex::from_bytes(&bad), Err(DatastoreError::ChecksumMismatch { .. })));
        assert!(matches!(
            DatastoreIndex::from_bytes(&bytes[..bytes.len() - 2]),
            Err(DatastoreError::Truncated(_))
        ));
    }
}
