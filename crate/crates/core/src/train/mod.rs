//! Optimization loop, schedules and compute accounting.

pub mod flops;
pub mod optim;
pub mod record;
pub mod schedule;
pub mod source;
pub mod trainer;

pub use flops::{estimate_flops, estimate_gflops_per_sample, FlopsBreakdown, TowerFlops};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, SecondMoment};
pub use record::{RunRecord, StepMetrics};
pub use schedule::{cosine_lr, warmup_steps};
pub use source::{ExampleSource, PairSource, SyntheticSource};
pub use trainer::{train, CheckpointPoint, NoopObserver, TrainConfig, TrainObserver, TrainedRun};
