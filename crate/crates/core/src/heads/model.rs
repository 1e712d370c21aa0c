//! The full model: encoders, backbone and heads over one parameter store.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stformer_tensor::{Checkpoint, Graph, ParamStore, Tensor, Var};

use super::context::{ego_features, ContextEncoder, ContextRaster};
use super::decoders::{KeyPointMlp, PointEncoder, ProposalHeads, StateDecoder};
use super::diffusion::DiffusionDecoder;
use crate::backbone::{assemble_sequence, Backbone, ModelConfig, SequenceLayout, NUM_KEY_POINTS, NUM_STATE_TOKENS};
use crate::raster::DEFAULT_RESOLUTION;
use crate::rng::{self, streams};
use crate::scenario::{AgentState, IntentionVocab, TrainingSample, KEY_POINT_FRAMES};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KpOrder {
    /// 0.5 s first.
    Forward,
    /// 8 s first.
    #[default]
    Backward,
}

impl KpOrder {
    /// Future frame numbers in generation order.
    pub fn frames(self) -> [usize; NUM_KEY_POINTS] {
        let mut f = KEY_POINT_FRAMES;
        if self == KpOrder::Forward {
            f.reverse();
        }
        f
    }

    pub fn name(self) -> &'static str {
        match self {
            KpOrder::Forward => "fwd",
            KpOrder::Backward => "bkwd",
        }
    }
}

/// Which optional sequence parts the model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub proposal: bool,
    pub keypoints: bool,
}

impl Components {
    pub const CS: Self = Self {
        proposal: false,
        keypoints: false,
    };
    pub const CKS: Self = Self {
        proposal: false,
        keypoints: true,
    };
    pub const CPS: Self = Self {
        proposal: true,
        keypoints: false,
    };
    pub const CPKS: Self = Self {
        proposal: true,
        keypoints: true,
    };

    pub fn name(self) -> &'static str {
        match (self.proposal, self.keypoints) {
            (false, false) => "CS",
            (false, true) => "CKS",
            (true, false) => "CPS",
            (true, true) => "CPKS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CS" => Ok(Self::CS),
            "CKS" => Ok(Self::CKS),
            "CPS" => Ok(Self::CPS),
            "CPKS" => Ok(Self::CPKS),
            _ => Err(Error::Config(format!("unknown component set `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrConfig {
    pub model: ModelConfig,
    pub components: Components,
    pub kp_order: KpOrder,
    pub vocab_size: usize,
    pub cnn_channels: usize,
    pub raster_resolution: usize,
    pub diffusion_layers: usize,
}

impl StrConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            components: Components::CKS,
            kp_order: KpOrder::Backward,
            vocab_size: crate::scenario::DEFAULT_VOCAB_SIZE,
            cnn_channels: 8,
            raster_resolution: DEFAULT_RESOLUTION,
            diffusion_layers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    Diffusion,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: StrConfig,
    vocab: Option<IntentionVocab>,
    stages: Vec<Stage>,
}

/// Per-sample network inputs.
#[derive(Clone, Debug)]
pub struct ModelInput {
    pub raster: ContextRaster,
    /// `[21, 6]` ego history features.
    pub ego: Tensor,
}

impl ModelInput {
    pub fn new(raster: ContextRaster, history: &[AgentState]) -> Self {
        Self {
            raster,
            ego: ego_features(history),
        }
    }
}

/// Supervision for one sample, key points in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub key_points: Vec<[f64; 2]>,
    /// `[80][x, y, yaw]`
    pub states: Vec<[f64; 3]>,
    pub proposal_index: Option<usize>,
    /// True endpoint minus the ground-truth intention point.
    pub proposal_offset: Option<[f64; 2]>,
}

impl Targets {
    pub fn new(sample: &TrainingSample, order: KpOrder, vocab: Option<&IntentionVocab>) -> Self {
        let key_points = order
            .frames()
            .iter()
            .map(|&f| sample.ego_future[f - 1].position())
            .collect();
        let states = sample.ego_future.iter().map(|s| [s.x, s.y, s.yaw]).collect();
        let (proposal_index, proposal_offset) = match (sample.proposal, vocab) {
            (Some(p), Some(v)) if p.index < v.len() => {
                let c = v.points[p.index];
                (Some(p.index), Some([p.endpoint[0] - c[0], p.endpoint[1] - c[1]]))
            }
            _ => (None, None),
        };
        Self {
            key_points,
            states,
            proposal_index,
            proposal_offset,
        }
    }
}

/// Tape handles produced by a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub hidden: Var,
    pub layout: SequenceLayout,
    /// Hidden rows that predict each key point, `[5, d]`.
    pub kp_hidden: Option<Var>,
    /// MLP key points, `[5, 2]` meters.
    pub kp_pred: Option<Var>,
    /// `[80, 3]`
    pub states: Var,
    /// `[1, K]`
    pub proposal_logits: Option<Var>,
    /// Offset of the ground-truth class, `[1, 2]` meters.
    pub proposal_offset: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct StrModel {
    pub config: StrConfig,
    pub store: ParamStore,
    pub context: ContextEncoder,
    pub kp_enc: PointEncoder,
    pub proposal_enc: Option<PointEncoder>,
    pub backbone: Backbone,
    pub kp_head: Option<KeyPointMlp>,
    pub state_head: StateDecoder,
    pub proposal: Option<ProposalHeads>,
    pub diffusion: Option<DiffusionDecoder>,
    pub vocab: Option<IntentionVocab>,
    pub stages: Vec<Stage>,
}

impl StrModel {
    pub fn new(config: StrConfig, vocab: Option<IntentionVocab>, seed: u64) -> Result<Self> {
        config.model.validate()?;
        if config.components.proposal {
            match &vocab {
                Some(v) if v.len() == config.vocab_size => {}
                Some(v) => {
                    return Err(Error::Config(format!(
                        "vocabulary has {} points but the model expects {}",
                        v.len(),
                        config.vocab_size
                    )))
                }
                None => return Err(Error::Config("proposal heads need an intention vocabulary".into())),
            }
        }
        let d = config.model.d_model;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, streams::INIT);
        let backbone = Backbone::new(&mut store, &mut rng, &config.model)?;
        let context = ContextEncoder::new(&mut store, &mut rng, d, config.cnn_channels, config.raster_resolution)?;
        let kp_enc = PointEncoder::new(&mut store, &mut rng, "kp_enc", d)?;
        let state_head = StateDecoder::new(&mut store, &mut rng, "heads.state", d)?;
        let (proposal_enc, proposal) = if config.components.proposal {
            (
                Some(PointEncoder::new(&mut store, &mut rng, "proposal_enc", d)?),
                Some(ProposalHeads::new(&mut store, &mut rng, d, config.vocab_size)?),
            )
        } else {
            (None, None)
        };
        let (kp_head, diffusion) = if config.components.keypoints {
            (
                Some(KeyPointMlp::new(&mut store, &mut rng, "heads.kp", d)?),
                Some(DiffusionDecoder::new(
                    &mut store,
                    &mut rng,
                    d,
                    config.model.heads,
                    config.diffusion_layers,
                )?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            store,
            context,
            kp_enc,
            proposal_enc,
            backbone,
            kp_head,
            state_head,
            proposal,
            diffusion,
            vocab,
            stages: Vec::new(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.model.d_model
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.stages.contains(&stage)
    }

    pub fn mark_stage(&mut self, stage: Stage) {
        if !self.has_stage(stage) {
            self.stages.push(stage);
        }
    }

    pub fn targets(&self, sample: &TrainingSample) -> Targets {
        Targets::new(sample, self.config.kp_order, self.vocab.as_ref())
    }

    pub fn encode_context(&self, g: &mut Graph, input: &ModelInput) -> Result<Var> {
        self.context.forward(g, &self.store, &input.raster, &input.ego)
    }

    pub fn proposal_token(&self, g: &mut Graph, index: usize) -> Result<Var> {
        let (Some(enc), Some(vocab)) = (&self.proposal_enc, &self.vocab) else {
            return Err(Error::Config("model has no proposal component".into()));
        };
        let p = *vocab
            .points
            .get(index)
            .ok_or_else(|| Error::Contract(format!("proposal index {index} outside the vocabulary")))?;
        enc.forward(g, &self.store, &[p])
    }

    /// Teacher-forced pass: ground-truth proposal and key points are fed in.
    pub fn forward_teacher(&self, g: &mut Graph, input: &ModelInput, targets: &Targets) -> Result<TeacherOutputs> {
        let ctx = self.encode_context(g, input)?;
        let prop = match self.config.components.proposal {
            true => {
                let idx = targets
                    .proposal_index
                    .ok_or_else(|| Error::Contract("proposal target missing".into()))?;
                Some(self.proposal_token(g, idx)?)
            }
            false => None,
        };
        let kps = match self.config.components.keypoints {
            true => Some(self.kp_enc.forward(g, &self.store, &targets.key_points)?),
            false => None,
        };
        let queries = self.backbone.state_query_tokens(g, &self.store);
        let seq = assemble_sequence(g, ctx, prop, kps, Some(queries))?;
        let hidden = self.backbone.forward(g, &self.store, &seq)?;
        let layout = seq.layout;

        let (mut proposal_logits, mut proposal_offset) = (None, None);
        if let Some(heads) = &self.proposal {
            let row = g.slice_rows(hidden, layout.context.end - 1, 1)?;
            let (logits, offsets) = heads.forward(g, &self.store, row)?;
            let idx = targets.proposal_index.unwrap_or(0);
            proposal_logits = Some(logits);
            proposal_offset = Some(g.slice_rows(offsets, idx, 1)?);
        }
        let (mut kp_hidden, mut kp_pred) = (None, None);
        if !layout.keypoints.is_empty() {
            let rows = g.slice_rows(hidden, layout.predictor_of(layout.keypoints.start), NUM_KEY_POINTS)?;
            if let Some(head) = &self.kp_head {
                kp_pred = Some(head.forward(g, &self.store, rows)?);
            }
            kp_hidden = Some(rows);
        }
        let srows = g.slice_rows(hidden, layout.states.start, NUM_STATE_TOKENS)?;
        let states = self.state_head.forward(g, &self.store, srows)?;
        Ok(TeacherOutputs {
            hidden,
            layout,
            kp_hidden,
            kp_pred,
            states,
            proposal_logits,
            proposal_offset,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            stages: self.stages.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Contract(e.to_string()))?;
        Ok(Checkpoint::from_store(&self.store, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.meta).map_err(|e| Error::State(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(meta.config, meta.vocab, 0)?;
        ckpt.load_into(&mut model.store)?;
        model.stages = meta.stages;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path).map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(&ckpt)
    }

    /// Values in parameters whose name starts with `prefix`.
    pub fn param_count(&self, prefix: &str) -> usize {
        self.store.num_values_with_prefix(prefix)
    }
}
