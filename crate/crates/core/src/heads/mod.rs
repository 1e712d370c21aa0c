//! Encoders and decoders around the backbone, and generation.

pub mod context;
pub mod decoders;
pub mod diffusion;
pub mod model;
pub mod predictions;
pub mod rollout;

pub use context::{prepare_context, ContextEncoder, ContextRaster, PooledRaster, COORD_SCALE};
pub use decoders::{select_top_k, KeyPointMlp, PointEncoder, ProposalHeads, ProposalOutput, RankedProposal, StateDecoder};
pub use diffusion::{
    forward_diffuse, forward_diffuse_rng, forward_step, reverse_step, DiffusionDecoder, DiffusionSchedule, EpsPredictor,
    Sampler,
};
pub use model::{Components, KpOrder, ModelInput, Stage, StrConfig, StrModel, Targets, TeacherOutputs};
pub use predictions::{read_predictions, write_predictions};
pub use rollout::{rollout, rollout_with, KpDecoder, RolloutFlags, TrajectoryPrediction, DEFAULT_TOP_K};
