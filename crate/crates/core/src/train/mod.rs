//! Losses, optimizer, augmentation, the two training stages and the
//! scaling sweep and the ablation grid.

pub mod ablation;
pub mod augment;
pub mod loss;
pub mod optim;
pub mod stage;
pub mod sweep;

pub use ablation::{run_ablation, AblationAxis, AblationConfig, AblationResult, AblationRow, AblationVariant};
pub use augment::{perturb_history, perturb_history_with, DEFAULT_SIGMA_MAX};
pub use loss::{compute_loss, LossFlags, LossInputs, LossReport};
pub use optim::{lr_schedule, AdamW};
pub use stage::{
    checksum_where, diffusion_stage_trainable, evaluate, evaluate_diffusion, frozen_checksum, split_holdout,
    predict_set, train_stage_backbone, train_stage_diffusion, CurvePoint, PreparedSet, TrainConfig, TrainOutcome,
};
pub use sweep::{fit_slope, scaling_sweep, steps_to_threshold, SweepConfig, SweepResult, SweepRow};
