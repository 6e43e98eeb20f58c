//! The four training strategies: losses, patch masking and augmentation.

pub mod augment;
pub mod loss;
pub mod mask;
pub mod strategy;

pub use augment::{augment, ssl_view, AugmentationPolicy};
pub use loss::{clip_loss, slip_loss, ssl_nt_xent_loss};
pub use mask::{kept_count, mask_patches, sample_kept, KeptPatches};
pub use strategy::{
    strategy_loss, strategy_step_inputs, LossTerm, PreparedBatch, StepLoss, StepPair, StepSeed, StrategyConfig,
    StrategyKind,
};
