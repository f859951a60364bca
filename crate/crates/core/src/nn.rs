//! Parameterized layers shared by the perceiver, the generator and the
//! query-image projector. Layers only hold [`ParamId`]s; the weights live in
//! a [`ParamStore`].

use rand::Rng;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Normal(f64),
    Zeros,
}

impl Init {
    fn tensor<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register(name, init.tensor(&[in_dim, out_dim], rng))?;
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Projected multi-head attention. Queries come from one stream, keys and
/// values from another (the same one for self-attention).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `out_init` is applied to the output projection; `Init::Zeros` makes
    /// the residual branch vanish at initialization.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        init: Init,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(TensorError::Config(format!(
                "{name}: width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), width, width, init, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), width, width, init, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), width, width, init, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), width, width, out_init, rng)?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys: Var, causal: bool) -> Result<Var> {
        let q = self.wq.forward(g, store, queries)?;
        let k = self.wk.forward(g, store, keys)?;
        let v = self.wv.forward(g, store, keys)?;
        let a = g.attention(q, k, v, self.heads, causal)?;
        self.wo.forward(g, store, a)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.wq, &self.wk, &self.wv, &self.wo].iter().flat_map(|l| l.params()).collect()
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        init: Init,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, hidden, init, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, width, out_init, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}
