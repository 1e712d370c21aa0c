//! Token-sequence assembly and the causal transformer over it.
//!
//! The sequence is `[context | proposal | key points | future states]`. All
//! parts share one learned absolute position table, so a token's position is
//! its index in the assembled sequence.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use stformer_tensor::{Graph, Init, ParamId, ParamStore, Var};

use crate::nn::{Block, LayerNorm, TRANSFORMER_INIT_STD};
use crate::rng::Rng;
use crate::scenario::{FUTURE_FRAMES, HISTORY_FRAMES, KEY_POINT_FRAMES};
use crate::{Error, Result};

/// Size of the position table.
pub const MAX_SEQ_LEN: usize = 128;
pub const NUM_CONTEXT_TOKENS: usize = HISTORY_FRAMES;
pub const NUM_KEY_POINTS: usize = KEY_POINT_FRAMES.len();
pub const NUM_STATE_TOKENS: usize = FUTURE_FRAMES;
const GPT2_VOCAB: usize = 50257;
const GPT2_POSITIONS: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub layers: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub heads: usize,
}

/// Published backbone sizes: `(name, layers, d_model, d_inner, heads)`.
pub const PRESETS: [(&str, usize, usize, usize, usize); 4] = [
    ("300k", 1, 64, 256, 1),
    ("16m", 4, 256, 1024, 8),
    ("124m", 12, 768, 3072, 12),
    ("1.5b", 48, 1600, 6400, 25),
];

/// CPU-sized ladder for scaling experiments, labelled by approximate
/// backbone parameter count.
pub const DESK_LADDER: [(&str, usize, usize, usize, usize); 4] = [
    ("desk-10k", 1, 24, 96, 1),
    ("desk-50k", 2, 44, 176, 2),
    ("desk-250k", 4, 72, 288, 4),
    ("desk-1m", 4, 144, 576, 4),
];

impl ModelConfig {
    pub fn new(name: impl Into<String>, layers: usize, d_model: usize, d_inner: usize, heads: usize) -> Result<Self> {
        let c = Self {
            name: name.into(),
            layers,
            d_model,
            d_inner,
            heads,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn preset(name: &str) -> Result<Self> {
        PRESETS
            .iter()
            .chain(DESK_LADDER.iter())
            .find(|p| p.0 == name)
            .map(|&(n, l, d, i, h)| Self::new(n, l, d, i, h))
            .unwrap_or_else(|| Err(Error::Config(format!("unknown model preset `{name}`"))))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 || self.heads == 0 {
            return Err(Error::Config(format!("model `{}` has a zero dimension", self.name)));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Values in the backbone: blocks, final norm, positions and state queries.
    pub fn backbone_param_count(&self) -> usize {
        let d = self.d_model;
        let ln_f = if self.layers > 0 { 2 * d } else { 0 };
        self.layers * Block::param_count(d, self.d_inner) + ln_f + (MAX_SEQ_LEN + NUM_STATE_TOKENS) * d
    }

    /// Count under GPT-2 bookkeeping (50257-token embedding, 1024 positions),
    /// the convention behind the preset labels.
    pub fn gpt2_reference_count(&self) -> usize {
        let d = self.d_model;
        self.layers * Block::param_count(d, self.d_inner) + 2 * d + (GPT2_VOCAB + GPT2_POSITIONS) * d
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub context: Range<usize>,
    pub proposal: Range<usize>,
    pub keypoints: Range<usize>,
    pub states: Range<usize>,
}

impl SequenceLayout {
    /// Contiguous spans of the given lengths in component order.
    pub fn new(context: usize, proposal: usize, keypoints: usize, states: usize) -> Result<Self> {
        if proposal > 1 || keypoints > NUM_KEY_POINTS || (states != 0 && states != NUM_STATE_TOKENS) {
            return Err(Error::Contract(format!(
                "invalid span lengths: proposal {proposal}, key points {keypoints}, states {states}"
            )));
        }
        let p0 = context;
        let k0 = p0 + proposal;
        let s0 = k0 + keypoints;
        Ok(Self {
            context: 0..context,
            proposal: p0..k0,
            keypoints: k0..s0,
            states: s0..s0 + states,
        })
    }

    pub fn len(&self) -> usize {
        self.states.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position whose hidden state predicts the token at `slot`.
    pub fn predictor_of(&self, slot: usize) -> usize {
        slot.saturating_sub(1)
    }
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `[seq, d_model]`
    pub embeddings: Var,
    pub layout: SequenceLayout,
    pub positions: Vec<usize>,
}

/// Stacks the parts into one sequence. Key points must already be in the
/// order they are generated; `states` may be absent for rollout prefixes.
pub fn assemble_sequence(
    g: &mut Graph,
    context: Var,
    proposal: Option<Var>,
    keypoints: Option<Var>,
    states: Option<Var>,
) -> Result<TokenSequence> {
    let d = g.shape(context).get(1).copied().unwrap_or(0);
    let mut parts = vec![context];
    let mut lens = [g.value(context).rows(), 0, 0, 0];
    for (slot, part) in [proposal, keypoints, states].into_iter().enumerate() {
        if let Some(v) = part {
            let s = g.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(stformer_tensor::TensorError::Shape {
                    op: "assemble_sequence",
                    left: vec![lens[0], d],
                    right: s.to_vec(),
                }
                .into());
            }
            lens[slot + 1] = s[0];
            parts.push(v);
        }
    }
    let layout = SequenceLayout::new(lens[0], lens[1], lens[2], lens[3])?;
    let embeddings = if parts.len() == 1 { context } else { g.concat_rows(&parts)? };
    Ok(TokenSequence {
        embeddings,
        positions: (0..layout.len()).collect(),
        layout,
    })
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: ModelConfig,
    pub wpe: ParamId,
    pub state_queries: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: Option<LayerNorm>,
}

pub const PREFIX: &str = "backbone.";

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let s = TRANSFORMER_INIT_STD;
        let wpe = store.init("backbone.wpe", &[MAX_SEQ_LEN, d], Init::Normal(s), false, rng)?;
        let state_queries = store.init("backbone.state_queries", &[NUM_STATE_TOKENS, d], Init::Normal(s), false, rng)?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, rng, &format!("backbone.h{i}"), d, config.d_inner, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = if config.layers > 0 {
            Some(LayerNorm::new(store, rng, "backbone.ln_f", d)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            wpe,
            state_queries,
            blocks,
            ln_f,
        })
    }

    /// The 80 learned future-state query embeddings.
    pub fn state_query_tokens(&self, g: &mut Graph, store: &ParamStore) -> Var {
        g.param(store, self.state_queries)
    }

    /// Hidden states `[seq, d_model]`; row `i` depends on tokens `0..=i` only.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSequence) -> Result<Var> {
        let n = tokens.layout.len();
        if n > MAX_SEQ_LEN {
            return Err(Error::Length { len: n, max: MAX_SEQ_LEN });
        }
        let table = g.param(store, self.wpe);
        let pos = g.embedding(table, &tokens.positions)?;
        let mut x = g.add(tokens.embeddings, pos)?;
        for b in &self.blocks {
            x = b.forward(g, store, x)?;
        }
        match &self.ln_f {
            Some(ln) => ln.forward(g, store, x),
            None => Ok(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, streams};
    use stformer_tensor::Tensor;

    #[test]
    fn preset_table_values() {
        let p = ModelConfig::preset("300k").unwrap();
        assert_eq!((p.layers, p.d_model, p.d_inner, p.heads), (1, 64, 256, 1));
        let p = ModelConfig::preset("16m").unwrap();
        assert_eq!((p.layers, p.d_model, p.d_inner, p.heads), (4, 256, 1024, 8));
        assert!(ModelConfig::new("bad", 1, 10, 40, 3).is_err());
    }

    #[test]
    fn counted_params_match_store() {
        for name in ["desk-10k", "desk-50k", "300k"] {
            let c = ModelConfig::preset(name).unwrap();
            let mut store = ParamStore::new();
            Backbone::new(&mut store, &mut stream(1, streams::INIT), &c).unwrap();
            assert_eq!(store.num_values(), c.backbone_param_count(), "{name}");
        }
    }

    #[test]
    fn layout_orders_spans() {
        let l = SequenceLayout::new(21, 1, 5, 80).unwrap();
        assert_eq!((l.context.end, l.proposal.end, l.keypoints.end, l.len()), (21, 22, 27, 107));
        assert!(SequenceLayout::new(21, 2, 5, 80).is_err());
    }

    #[test]
    fn zero_layer_stack_adds_positions() {
        let c = ModelConfig::new("id", 0, 4, 8, 1).unwrap();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut stream(2, streams::INIT), &c).unwrap();
        let mut g = Graph::new();
        let emb: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let ctx = g.constant(Tensor::matrix(3, 4, emb.clone()).unwrap());
        let seq = assemble_sequence(&mut g, ctx, None, None, None).unwrap();
        let h = bb.forward(&mut g, &store, &seq).unwrap();
        let wpe = store.tensor(bb.wpe).data();
        for (i, v) in g.value(h).data().iter().enumerate() {
            assert_eq!(*v, emb[i] + wpe[i]);
        }
    }
}
