//! Parameterized layers over the autograd tape.

use stformer_tensor::{Graph, Init, ParamId, ParamStore, Var};

use crate::rng::Rng;
use crate::Result;

/// Standard deviation used for transformer weights.
pub const TRANSFORMER_INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// `std = gain / sqrt(fan_in)`.
pub fn fan_in_std(fan_in: usize, gain: f64) -> f64 {
    gain / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, inp: usize, out: usize, std: f64) -> Result<Self> {
        let w = store.init(format!("{name}.w"), &[out, inp], Init::Normal(std), true, rng)?;
        let b = store.init(format!("{name}.b"), &[out], Init::Zeros, false, rng)?;
        Ok(Self {
            w,
            b: Some(b),
            inp,
            out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.init(format!("{name}.gamma"), &[d], Init::Ones, false, rng)?,
            beta: store.init(format!("{name}.beta"), &[d], Init::Zeros, false, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

/// `Linear -> SiLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dims: (usize, usize, usize),
        stds: (f64, f64),
    ) -> Result<Self> {
        let (inp, hidden, out) = dims;
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), inp, hidden, stds.0)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out, stds.1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm transformer block with causal self-attention and a SiLU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, d: usize, d_inner: usize, heads: usize) -> Result<Self> {
        let s = TRANSFORMER_INIT_STD;
        Ok(Self {
            ln1: LayerNorm::new(store, rng, &format!("{name}.ln1"), d)?,
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), d, 3 * d, s)?,
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), d, d, s)?,
            ln2: LayerNorm::new(store, rng, &format!("{name}.ln2"), d)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), (d, d_inner, d), (s, s))?,
            heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let qkv = self.qkv.forward(g, store, h)?;
        let att = g.causal_attention(qkv, self.heads)?;
        let att = self.proj.forward(g, store, att)?;
        let x = g.add(x, att)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h)?;
        Ok(g.add(x, h)?)
    }

    /// Values held by one block of width `d`.
    pub fn param_count(d: usize, d_inner: usize) -> usize {
        let ln = 2 * d;
        2 * ln + (d * 3 * d + 3 * d) + (d * d + d) + (d * d_inner + d_inner) + (d_inner * d + d)
    }
}
