//! Staged training: stream pretraining losses, specialization regularizers,
//! clipped policy-gradient updates, rollout collection, and the four-stage
//! protocol driver.

pub mod losses;
pub mod ppo;
pub mod protocol;
pub mod rollout;

pub use losses::{
    loss_env_pretrain, loss_fusion_stage, loss_joint, loss_self_pretrain, recon_loss,
    specialization_regularizers, FusionQuality, LossError, LossWeights, RegInputs, RegValues,
};
pub use ppo::{gae, gaussian_log_prob, normalize_advantages, ppo_update, PpoConfig, PpoError, PpoStats};
pub use protocol::{run_protocol, ProtocolError, Stage, StageConfig, StageLog, TrainSchedule};
pub use rollout::{
    EpisodeSampler, FixedTask, FollowSampler, RolloutBatch, RolloutConfig, RolloutError,
    Transition, WindowBuffer, Workers,
};
