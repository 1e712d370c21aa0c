//! Inference: proposals, autoregressive key points, then future states.

use serde::{Deserialize, Serialize};
use stformer_tensor::{Graph, Var};

use super::decoders::{select_top_k, ProposalHeads, RankedProposal};
use super::model::{KpOrder, ModelInput, Stage, StrModel};
use crate::backbone::{assemble_sequence, NUM_KEY_POINTS, NUM_STATE_TOKENS};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpDecoder {
    #[default]
    Mlp,
    Diffusion,
}

impl KpDecoder {
    pub fn name(self) -> &'static str {
        match self {
            KpDecoder::Mlp => "mlp",
            KpDecoder::Diffusion => "diffusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutFlags {
    pub use_proposal: bool,
    pub use_keypoints: bool,
    pub kp_order: KpOrder,
    pub kp_decoder: KpDecoder,
    /// Number of proposals rolled out when proposals are used.
    pub k: usize,
}

pub const DEFAULT_TOP_K: usize = 6;

impl RolloutFlags {
    /// Flags matching what `model` was built with, MLP key points.
    pub fn for_model(model: &StrModel) -> Self {
        Self {
            use_proposal: model.config.components.proposal,
            use_keypoints: model.config.components.keypoints,
            kp_order: model.config.kp_order,
            kp_decoder: KpDecoder::Mlp,
            k: DEFAULT_TOP_K.min(model.config.vocab_size),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub id: u64,
    /// `[mode][80][x, y, yaw]`
    pub modes: Vec<Vec<[f64; 3]>>,
    pub scores: Vec<f64>,
    /// `[mode][5][x, y]` in generation order.
    #[serde(default)]
    pub key_points: Vec<Vec<[f64; 2]>>,
    /// Future frame number of each emitted key point.
    #[serde(default)]
    pub key_point_frames: Vec<usize>,
    #[serde(default)]
    pub proposals: Vec<usize>,
}

impl TrajectoryPrediction {
    /// Index of the highest-scoring mode, lowest index on ties.
    pub fn best_mode(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

fn check_flags(model: &StrModel, flags: &RolloutFlags) -> Result<()> {
    let c = &model.config;
    if flags.use_proposal != c.components.proposal || flags.use_keypoints != c.components.keypoints {
        return Err(Error::Config(format!(
            "rollout flags (proposal {}, key points {}) do not match checkpoint components {}",
            flags.use_proposal,
            flags.use_keypoints,
            c.components.name()
        )));
    }
    if flags.use_keypoints && flags.kp_order != c.kp_order {
        return Err(Error::Config(format!(
            "rollout key-point order {} does not match checkpoint order {}",
            flags.kp_order.name(),
            c.kp_order.name()
        )));
    }
    if flags.use_keypoints && flags.kp_decoder == KpDecoder::Diffusion && !model.has_stage(Stage::Diffusion) {
        return Err(Error::State("diffusion key-point decoder has not been trained".into()));
    }
    if flags.use_proposal && (flags.k == 0 || flags.k > c.vocab_size) {
        return Err(Error::Config(format!("top-{} over a vocabulary of {}", flags.k, c.vocab_size)));
    }
    Ok(())
}

fn last_row(g: &mut Graph, h: Var) -> Result<Vec<f64>> {
    let n = g.value(h).rows();
    let row = g.slice_rows(h, n - 1, 1)?;
    Ok(g.value(row).data().to_vec())
}

/// Generates key points one at a time, each fed back before the next.
/// `forced` replaces the generated point at the listed positions.
fn generate_keypoints(
    model: &StrModel,
    g: &mut Graph,
    ctx: Var,
    prop: Option<Var>,
    flags: &RolloutFlags,
    rng: &mut Rng,
    forced: &[(usize, [f64; 2])],
) -> Result<Vec<[f64; 2]>> {
    let mut points = Vec::with_capacity(NUM_KEY_POINTS);
    for m in 0..NUM_KEY_POINTS {
        let kps = if points.is_empty() {
            None
        } else {
            Some(model.kp_enc.forward(g, &model.store, &points)?)
        };
        let seq = assemble_sequence(g, ctx, prop, kps, None)?;
        let h = model.backbone.forward(g, &model.store, &seq)?;
        let point = match forced.iter().find(|(i, _)| *i == m) {
            Some((_, p)) => *p,
            None => match flags.kp_decoder {
                KpDecoder::Mlp => {
                    let head = model
                        .kp_head
                        .as_ref()
                        .ok_or_else(|| Error::Config("model has no key-point head".into()))?;
                    let n = g.value(h).rows();
                    let row = g.slice_rows(h, n - 1, 1)?;
                    let p = head.forward(g, &model.store, row)?;
                    let v = g.value(p).data();
                    [v[0], v[1]]
                }
                KpDecoder::Diffusion => {
                    let dec = model
                        .diffusion
                        .as_ref()
                        .ok_or_else(|| Error::State("model has no diffusion decoder".into()))?;
                    let cond = last_row(g, h)?;
                    dec.sample_point(&model.store, &cond, rng)?
                }
            },
        };
        points.push(point);
    }
    Ok(points)
}

/// Full generation for one sample.
pub fn rollout(model: &StrModel, input: &ModelInput, id: u64, flags: &RolloutFlags, rng: &mut Rng) -> Result<TrajectoryPrediction> {
    rollout_with(model, input, id, flags, rng, &[])
}

/// [`rollout`] with some key points pinned to given values.
pub fn rollout_with(
    model: &StrModel,
    input: &ModelInput,
    id: u64,
    flags: &RolloutFlags,
    rng: &mut Rng,
    forced: &[(usize, [f64; 2])],
) -> Result<TrajectoryPrediction> {
    check_flags(model, flags)?;
    let mut g = Graph::new();
    let ctx = model.encode_context(&mut g, input)?;
    let ranked: Vec<Option<RankedProposal>> = if flags.use_proposal {
        let seq = assemble_sequence(&mut g, ctx, None, None, None)?;
        let h = model.backbone.forward(&mut g, &model.store, &seq)?;
        let heads = model.proposal.as_ref().expect("checked by flags");
        let row = g.slice_rows(h, seq.layout.context.end - 1, 1)?;
        let (logits, offsets) = heads.forward(&mut g, &model.store, row)?;
        let out = ProposalHeads::output(&g, logits, offsets);
        select_top_k(&out, flags.k)?.into_iter().map(Some).collect()
    } else {
        vec![None]
    };

    let mut pred = TrajectoryPrediction {
        id,
        modes: Vec::new(),
        scores: Vec::new(),
        key_points: Vec::new(),
        key_point_frames: if flags.use_keypoints { flags.kp_order.frames().to_vec() } else { Vec::new() },
        proposals: Vec::new(),
    };
    for r in ranked {
        let prop = match r {
            Some(r) => Some(model.proposal_token(&mut g, r.index)?),
            None => None,
        };
        let points = if flags.use_keypoints {
            generate_keypoints(model, &mut g, ctx, prop, flags, rng, forced)?
        } else {
            Vec::new()
        };
        let kps = if points.is_empty() {
            None
        } else {
            Some(model.kp_enc.forward(&mut g, &model.store, &points)?)
        };
        let queries = model.backbone.state_query_tokens(&mut g, &model.store);
        let seq = assemble_sequence(&mut g, ctx, prop, kps, Some(queries))?;
        let h = model.backbone.forward(&mut g, &model.store, &seq)?;
        let rows = g.slice_rows(h, seq.layout.states.start, NUM_STATE_TOKENS)?;
        let states = model.state_head.forward(&mut g, &model.store, rows)?;
        let traj = g.value(states).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        pred.modes.push(traj);
        pred.scores.push(r.map_or(1.0, |r| r.score));
        pred.key_points.push(points);
        if let Some(r) = r {
            pred.proposals.push(r.index);
        }
    }
    Ok(pred)
}
