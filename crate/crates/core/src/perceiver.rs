//! Vision, Language and Context Perceivers.
//!
//! All three share one block implementation: a stack of pre-norm layers,
//! each running self-attention over the primary stream, cross-attention from
//! the primary stream into a context stream, and a feed-forward sublayer.
//! Output projections start at zero, so every block is the identity at
//! initialization. When the internal width differs from the token width,
//! the block works in its own width behind linear in/out projections and
//! adds its result to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{derived_rng, EncodedContext};
use crate::nn::{FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Standard deviation of the initial latent queries. Small latents let the
/// context read by cross-attention dominate the prefix early in training.
pub const LATENT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceiverConfig {
    pub layers: usize,
    pub d: usize,
    pub perceiver_width: usize,
    pub heads: usize,
    /// Prefix token budget; split evenly between the image and text latents.
    pub m: usize,
    pub share_context_weights: bool,
    pub seed: u64,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d: 64,
            perceiver_width: 768,
            heads: 8,
            m: 128,
            share_context_weights: true,
            seed: 7,
        }
    }
}

impl PerceiverConfig {
    /// Larger preset used for the 13B ScienceQA configuration.
    pub fn large_preset(d: usize) -> Self {
        Self {
            d,
            m: 256,
            perceiver_width: 4608,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TensorError::Config(m));
        if self.layers == 0 {
            return fail("perceiver needs at least one layer".into());
        }
        if self.m == 0 || !self.m.is_multiple_of(2) {
            return fail(format!("M must be a positive even number, got {}", self.m));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) || !self.perceiver_width.is_multiple_of(self.heads) {
            return fail(format!(
                "d ({}) and perceiver_width ({}) must be divisible by heads ({})",
                self.d, self.perceiver_width, self.heads
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PerceiverLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross_query: LayerNorm,
    pub ln_cross_context: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl PerceiverLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Result<Self> {
        let init = Init::Normal(1.0 / (width as f64).sqrt());
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), width)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), width, heads, init, Init::Zeros, rng)?,
            ln_cross_query: LayerNorm::new(store, &format!("{name}.ln_cross_q"), width)?,
            ln_cross_context: LayerNorm::new(store, &format!("{name}.ln_cross_kv"), width)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), width, heads, init, Init::Zeros, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), width)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, 4 * width, init, Init::Zeros, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, context: Option<Var>) -> Result<Var> {
        let n = self.ln_self.forward(g, store, h)?;
        let a = self.self_attn.forward(g, store, n, n, false)?;
        let mut h = g.add(h, a)?;
        if let Some(c) = context {
            let q = self.ln_cross_query.forward(g, store, h)?;
            let kv = self.ln_cross_context.forward(g, store, c)?;
            let a = self.cross_attn.forward(g, store, q, kv, false)?;
            h = g.add(h, a)?;
        }
        let n = self.ln_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n)?;
        g.add(h, f)
    }
}

#[derive(Debug, Clone)]
struct WidthAdapter {
    primary_in: Linear,
    context_in: Linear,
    out: Linear,
}

/// One perceiver stack: primary stream attends to itself and to a context
/// stream, layer by layer.
#[derive(Debug, Clone)]
pub struct PerceiverBlock {
    pub name: String,
    pub layers: Vec<PerceiverLayer>,
    adapter: Option<WidthAdapter>,
    d: usize,
    params: Vec<ParamId>,
}

impl PerceiverBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &PerceiverConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let (d, width) = (config.d, config.perceiver_width);
        let adapter = if width != d {
            let init = Init::Normal(1.0 / (d as f64).sqrt());
            Some(WidthAdapter {
                primary_in: Linear::new(store, &format!("{name}.in_proj"), d, width, init, rng)?,
                context_in: Linear::new(store, &format!("{name}.in_proj_ctx"), d, width, init, rng)?,
                out: Linear::new(store, &format!("{name}.out_proj"), width, d, Init::Zeros, rng)?,
            })
        } else {
            None
        };
        let layers = (0..config.layers)
            .map(|i| PerceiverLayer::new(store, &format!("{name}.layer{i}"), width, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let params = (first..store.len()).map(ParamId).collect();
        Ok(Self {
            name: name.to_owned(),
            layers,
            adapter,
            d,
            params,
        })
    }

    /// Parameters in registration order.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// `primary` is `T × d`; `context` is `S × d` or `None` to skip every
    /// cross-attention sublayer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, primary: Var, context: Option<Var>) -> Result<Var> {
        for (what, v) in std::iter::once(("primary", Some(primary))).chain(std::iter::once(("context", context))) {
            if let Some(v) = v {
                let shape = g.shape(v);
                if shape.len() != 2 || shape[1] != self.d {
                    return Err(TensorError::ShapeMismatch {
                        op: if what == "primary" { "perceiver primary stream" } else { "perceiver context stream" },
                        lhs: shape.to_vec(),
                        rhs: vec![shape.first().copied().unwrap_or(0), self.d],
                    });
                }
            }
        }
        let (mut h, context) = match &self.adapter {
            Some(a) => {
                let h = a.primary_in.forward(g, store, primary)?;
                let c = context.map(|c| a.context_in.forward(g, store, c)).transpose()?;
                (h, c)
            }
            None => (primary, context),
        };
        for layer in &self.layers {
            h = layer.forward(g, store, h, context)?;
        }
        match &self.adapter {
            Some(a) => {
                let out = a.out.forward(g, store, h)?;
                g.add(primary, out)
            }
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoPerceiver,
    NoVp,
    NoLp,
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoPerceiver => "no_perceiver",
            Ablation::NoVp => "no_vp",
            Ablation::NoLp => "no_lp",
        })
    }
}

/// Fused context prefix living on a graph.
#[derive(Debug, Clone)]
pub struct ContextPrefix {
    /// `None` only for the raw-concatenation baseline with no context tokens.
    pub tokens: Option<Var>,
    pub rows: usize,
    /// Source sample ids in input order.
    pub provenance: Vec<u64>,
    /// The raw-concatenation baseline emits `L` rows rather than `M`.
    pub variable_length: bool,
}

#[derive(Debug, Clone)]
pub struct Perceiver {
    pub config: PerceiverConfig,
    pub vp: PerceiverBlock,
    pub lp: PerceiverBlock,
    pub cp_img: PerceiverBlock,
    /// Same block as `cp_img` when context weights are shared.
    pub cp_txt: PerceiverBlock,
    pub h_img: ParamId,
    pub h_txt: ParamId,
}

impl Perceiver {
    pub fn new(store: &mut ParamStore, config: &PerceiverConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, "perceiver");
        let vp = PerceiverBlock::new(store, "vp", config, &mut rng)?;
        let lp = PerceiverBlock::new(store, "lp", config, &mut rng)?;
        let (cp_img, cp_txt) = if config.share_context_weights {
            let cp = PerceiverBlock::new(store, "cp", config, &mut rng)?;
            (cp.clone(), cp)
        } else {
            (
                PerceiverBlock::new(store, "cp.img", config, &mut rng)?,
                PerceiverBlock::new(store, "cp.txt", config, &mut rng)?,
            )
        };
        let half = config.m / 2;
        let h_img = store.register("latents.H_img", Tensor::randn(&[half, config.d], LATENT_INIT_STD, &mut rng))?;
        let h_txt = store.register("latents.H_txt", Tensor::randn(&[half, config.d], LATENT_INIT_STD, &mut rng))?;
        Ok(Self {
            config: config.clone(),
            vp,
            lp,
            cp_img,
            cp_txt,
            h_img,
            h_txt,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.vp.params().to_vec();
        out.extend(self.lp.params());
        out.extend(self.cp_img.params());
        if !self.config.share_context_weights {
            out.extend(self.cp_txt.params());
        }
        out.extend([self.h_img, self.h_txt]);
        out
    }

    /// Vision Perceiver: image tokens attend to themselves, then to the
    /// sample's own text tokens.
    pub fn vision_perceive(&self, g: &mut Graph, store: &ParamStore, v: Var, u: Var) -> Result<Var> {
        if g.shape(u)[0] == 0 {
            return Err(TensorError::Config("vision perceiver needs at least one text token".into()));
        }
        self.vp.forward(g, store, v, Some(u))
    }

    /// Language Perceiver; cross-attention is skipped for text-only samples.
    pub fn language_perceive(&self, g: &mut Graph, store: &ParamStore, u: Var, v: Option<Var>) -> Result<Var> {
        let v = v.filter(|&v| g.shape(v)[0] > 0);
        self.lp.forward(g, store, u, v)
    }

    /// Compresses a stream into the block's latent queries.
    pub fn context_perceive(&self, g: &mut Graph, store: &ParamStore, block: &PerceiverBlock, latents: Var, stream: Option<Var>) -> Result<Var> {
        block.forward(g, store, latents, stream)
    }

    pub fn fuse_contexts(&self, g: &mut Graph, store: &ParamStore, contexts: &[EncodedContext], ablation: Ablation) -> Result<ContextPrefix> {
        let provenance: Vec<u64> = contexts.iter().map(|c| c.source_id).collect();
        if ablation == Ablation::NoPerceiver {
            let mut parts = Vec::new();
            for c in contexts {
                for t in [&c.vision_tokens, &c.text_tokens] {
                    if t.rows() > 0 {
                        parts.push(g.input(t.clone()));
                    }
                }
            }
            let rows = contexts.iter().map(EncodedContext::raw_len).sum();
            let tokens = if parts.is_empty() { None } else { Some(g.concat_rows(&parts)?) };
            return Ok(ContextPrefix {
                tokens,
                rows,
                provenance,
                variable_length: true,
            });
        }
        if contexts.is_empty() {
            return Err(TensorError::Config("context fusion needs at least one context sample".into()));
        }
        let (streams_img, streams_txt) = self.concat_streams(g, store, contexts, ablation)?;
        let h_img = g.param(store, self.h_img);
        let h_txt = g.param(store, self.h_txt);
        let img = self.context_perceive(g, store, &self.cp_img, h_img, streams_img)?;
        let txt = self.context_perceive(g, store, &self.cp_txt, h_txt, streams_txt)?;
        let tokens = g.concat_rows(&[img, txt])?;
        Ok(ContextPrefix {
            tokens: Some(tokens),
            rows: self.config.m,
            provenance,
            variable_length: false,
        })
    }

    /// Runs the per-sample perceivers (or passes raw tokens through, per the
    /// ablation) and concatenates the results in input order. Empty streams
    /// come back as `None`.
    pub fn concat_streams(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        contexts: &[EncodedContext],
        ablation: Ablation,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let mut img = Vec::new();
        let mut txt = Vec::new();
        for c in contexts {
            let u = g.input(c.text_tokens.clone());
            let v = (c.vision_tokens.rows() > 0).then(|| g.input(c.vision_tokens.clone()));
            if let Some(v) = v {
                img.push(match ablation {
                    Ablation::NoVp => v,
                    _ => self.vision_perceive(g, store, v, u)?,
                });
            }
            txt.push(match ablation {
                Ablation::NoLp => u,
                _ => self.language_perceive(g, store, u, v)?,
            });
        }
        let cat = |g: &mut Graph, parts: Vec<Var>| -> Result<Option<Var>> {
            match parts.len() {
                0 => Ok(None),
                1 => Ok(Some(parts[0])),
                _ => g.concat_rows(&parts).map(Some),
            }
        };
        Ok((cat(g, img)?, cat(g, txt)?))
    }
}
