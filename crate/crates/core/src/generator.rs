//! Small decoder-only language model conditioned on the fused context
//! prefix, the projected query image and the query text.

use serde::{Deserialize, Serialize};

use crate::encoders::{derived_rng, EOS_ID};
use crate::nn::{FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 4,
            vocab: 512,
            max_seq: 256,
            seed: 11,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(TensorError::Config(format!(
                "generator needs layers >= 1 and d ({}) divisible by heads ({})",
                self.d, self.heads
            )));
        }
        if self.vocab <= EOS_ID as usize || self.max_seq == 0 {
            return Err(TensorError::Config("generator vocab and max_seq too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Assembled input sequence.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub embeds: Var,
    pub len: usize,
    /// True at positions whose next token is an answer token.
    pub loss_mask: Vec<bool>,
    /// Next-token label per position; only meaningful where the mask is set.
    pub labels: Vec<usize>,
}

impl Assembled {
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len).filter(|&t| self.loss_mask[t]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    blocks: Vec<DecoderBlock>,
    ln_final: LayerNorm,
    pub head: Linear,
    params: Vec<ParamId>,
}

impl Generator {
    pub fn new(store: &mut ParamStore, config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let mut rng = derived_rng(config.seed, "generator");
        let d = config.d;
        let tok_emb = store.register("gen.tok_emb", Tensor::randn(&[config.vocab, d], 1.0, &mut rng))?;
        let pos_emb = store.register("gen.pos_emb", Tensor::randn(&[config.max_seq, d], 0.1, &mut rng))?;
        let init = Init::Normal(1.0 / (d as f64).sqrt());
        let out_init = Init::Normal(1.0 / (d as f64).sqrt() / (2.0 * config.layers as f64).sqrt());
        let blocks = (0..config.layers)
            .map(|i| {
                let name = format!("gen.layer{i}");
                Ok(DecoderBlock {
                    ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, config.heads, init, out_init, &mut rng)?,
                    ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d)?,
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 4 * d, init, out_init, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, "gen.ln_final", d)?;
        // Zero head: uniform next-token distribution at initialization.
        let head = Linear::new(store, "gen.head", d, config.vocab, Init::Zeros, &mut rng)?;
        let params = (first..store.len()).map(ParamId).collect();
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            blocks,
            ln_final,
            head,
            params,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn sequence_len(prefix: usize, image: usize, text: usize, target: usize) -> usize {
        prefix + image + text + target
    }

    /// Rows: `[prefix | query image | query text | target]` plus learned
    /// positions. Position `t` is trained to predict token `t + 1`, so the
    /// mask is set on the `|target|` positions preceding each target token.
    pub fn assemble(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefix: Option<Var>,
        query_image: Option<Var>,
        query_ids: &[u32],
        target_ids: &[u32],
    ) -> Result<Assembled> {
        let d = self.config.d;
        let rows_of = |g: &Graph, v: Option<Var>, what: &'static str| -> Result<usize> {
            match v {
                None => Ok(0),
                Some(v) => {
                    let s = g.shape(v);
                    if s.len() != 2 || s[1] != d {
                        return Err(TensorError::ShapeMismatch {
                            op: what,
                            lhs: s.to_vec(),
                            rhs: vec![s.first().copied().unwrap_or(0), d],
                        });
                    }
                    Ok(s[0])
                }
            }
        };
        let p = rows_of(g, prefix, "assemble prefix")?;
        let i = rows_of(g, query_image, "assemble query image")?;
        let (q, y) = (query_ids.len(), target_ids.len());
        let len = Self::sequence_len(p, i, q, y);
        if len > self.config.max_seq {
            return Err(TensorError::Config(format!(
                "sequence of {len} tokens (prefix {p}, image {i}, text {q}, target {y}) exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        if len == 0 {
            return Err(TensorError::Config("cannot assemble an empty sequence".into()));
        }
        let vocab = self.config.vocab;
        let ids: Vec<usize> = query_ids.iter().chain(target_ids).map(|&t| t as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::IndexOutOfRange { index: bad, len: vocab });
        }
        let mut parts: Vec<Var> = prefix.into_iter().chain(query_image).collect();
        if !ids.is_empty() {
            let table = g.param(store, self.tok_emb);
            parts.push(g.rows(table, &ids)?);
        }
        let tokens = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.rows(pos_table, &(0..len).collect::<Vec<_>>())?;
        let embeds = g.add(tokens, pos)?;

        let first_target = p + i + q;
        let mut loss_mask = vec![false; len];
        let mut labels = vec![0; len];
        for (k, &t) in target_ids.iter().enumerate() {
            let pos = first_target + k;
            if pos == 0 {
                return Err(TensorError::Config("a target token needs a preceding position".into()));
            }
            loss_mask[pos - 1] = true;
            labels[pos - 1] = t as usize;
        }
        Ok(Assembled {
            embeds,
            len,
            loss_mask,
            labels,
        })
    }

    /// Final hidden states (after the last layer norm), `T × d`.
    pub fn hidden(&self, g: &mut Graph, store: &ParamStore, embeds: Var) -> Result<Var> {
        let mut h = embeds;
        for b in &self.blocks {
            let n = b.ln_attn.forward(g, store, h)?;
            let a = b.attn.forward(g, store, n, n, true)?;
            h = g.add(h, a)?;
            let n = b.ln_ffn.forward(g, store, h)?;
            let f = b.ffn.forward(g, store, n)?;
            h = g.add(h, f)?;
        }
        self.ln_final.forward(g, store, h)
    }

    /// Logits at every position, `T × vocab`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, embeds: Var) -> Result<Var> {
        let h = self.hidden(g, store, embeds)?;
        self.head.forward(g, store, h)
    }

    /// Logits at the listed positions only.
    pub fn forward_at(&self, g: &mut Graph, store: &ParamStore, embeds: Var, positions: &[usize]) -> Result<Var> {
        let h = self.hidden(g, store, embeds)?;
        let h = g.rows(h, positions)?;
        self.head.forward(g, store, h)
    }

    /// Mean negative log-likelihood over the masked positions of full logits.
    pub fn loss(&self, g: &mut Graph, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        g.cross_entropy(logits, labels, mask)
    }

    /// Same value as [`Generator::loss`] on the full logits, but runs the
    /// output head on the answer positions only.
    pub fn target_loss(&self, g: &mut Graph, store: &ParamStore, assembled: &Assembled) -> Result<Var> {
        let positions = assembled.target_positions();
        let logits = self.forward_at(g, store, assembled.embeds, &positions)?;
        let labels: Vec<usize> = positions.iter().map(|&t| assembled.labels[t]).collect();
        g.cross_entropy(logits, &labels, &vec![true; positions.len()])
    }

    /// Appends tokens after the query until EOS or `max_new` tokens. The
    /// returned ids include the EOS when one was produced.
    pub fn generate(
        &self,
        store: &ParamStore,
        prefix: Option<&Tensor>,
        query_image: Option<&Tensor>,
        query_ids: &[u32],
        max_new: usize,
        decoding: Decoding<'_>,
    ) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        while out.len() < max_new {
            let mut g = Graph::new();
            let p = prefix.map(|t| g.input(t.clone()));
            let i = query_image.map(|t| g.input(t.clone()));
            let mut ids = query_ids.to_vec();
            ids.extend(&out);
            let a = self.assemble(&mut g, store, p, i, &ids, &[])?;
            let logits = self.forward_at(&mut g, store, a.embeds, &[a.len - 1])?;
            let allowed = decoding.allowed(&out);
            if allowed.as_ref().is_some_and(Vec::is_empty) {
                break;
            }
            let next = argmax(g.value(logits).data(), allowed.as_deref());
            out.push(next);
            if next == EOS_ID {
                break;
            }
        }
        Ok(out)
    }
}

/// Which next tokens a decoder may choose.
#[derive(Debug, Clone, Copy)]
pub enum Decoding<'a> {
    Greedy,
    /// Only continuations of one of these token sequences, each followed by EOS.
    Constrained(&'a [Vec<u32>]),
}

impl Decoding<'_> {
    /// Allowed next tokens after `so_far`, or `None` when anything goes.
    pub fn allowed(&self, so_far: &[u32]) -> Option<Vec<u32>> {
        let Decoding::Constrained(candidates) = self else {
            return None;
        };
        let mut out: Vec<u32> = candidates
            .iter()
            .filter(|c| c.starts_with(so_far))
            .map(|c| c.get(so_far.len()).copied().unwrap_or(EOS_ID))
            .collect();
        out.sort_unstable();
        out.dedup();
        Some(out)
    }
}

/// Argmax over `logits`, restricted to `allowed` when given; ties go to the
/// lowest id.
pub fn argmax(logits: &[f64], allowed: Option<&[u32]>) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    let mut consider = |id: u32| {
        let v = logits[id as usize];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((id, v));
        }
    };
    match allowed {
        Some(ids) => ids.iter().for_each(|&i| consider(i)),
        None => (0..logits.len() as u32).for_each(consider),
    }
    best.map_or(EOS_ID, |(id, _)| id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constrained_decoding_follows_candidates() {
        let cands = vec![vec![5, 6], vec![5, 7], vec![9]];
        let dec = Decoding::Constrained(&cands);
        assert_eq!(dec.allowed(&[]), Some(vec![5, 9]));
        assert_eq!(dec.allowed(&[5]), Some(vec![6, 7]));
        assert_eq!(dec.allowed(&[9]), Some(vec![EOS_ID]));
        assert_eq!(dec.allowed(&[4]), Some(vec![]));
        assert_eq!(Decoding::Greedy.allowed(&[1]), None);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 1.0, 1.0], None), 1);
        assert_eq!(argmax(&[0.0, 1.0, 3.0], Some(&[0, 1])), 1);
    }

    #[test]
    fn sequence_length_example() {
        let mut store = ParamStore::new();
        let gen = Generator::new(&mut store, &GeneratorConfig { d: 8, heads: 2, vocab: 32, max_seq: 17, ..GeneratorConfig::default() }).unwrap();
        let mut g = Graph::new();
        let prefix = g.input(Tensor::zeros(&[8, 8]));
        let image = g.input(Tensor::zeros(&[4, 8]));
        let a = gen.assemble(&mut g, &store, Some(prefix), Some(image), &[1, 7, 2], &[9, 2]).unwrap();
        assert_eq!(a.len, 17);
        assert_eq!(a.loss_mask.iter().filter(|&&m| m).count(), 2);
        assert_eq!(a.target_positions(), vec![14, 15]);
        assert_eq!((a.labels[14], a.labels[15]), (9, 2));
        let err = gen.assemble(&mut g, &store, Some(prefix), Some(image), &[1, 7, 2], &[9, 9, 2]).unwrap_err();
        assert!(err.to_string().contains("18 tokens"), "{err}");
    }
}
