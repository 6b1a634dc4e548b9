//! Sequential adaptation to new tasks with forward and backward transfer
//! bookkeeping, for meta-learned adapters and the two baselines.

mod config;
mod eval;
mod features;
mod metrics;
mod pretrain;
mod run;

pub use config::{Method, RunConfig, Scenario};
pub use eval::{evaluate, success_rate, Controller, EvalOptions};
pub use features::{export_features, FeatureKind, FeatureRow, FeatureTable};
pub use metrics::{compute_bwt, compute_fwt};
pub use pretrain::{pretrain, validation_loss, LossPoint, PretrainConfig, PretrainOutcome};
pub use run::{run_sequence, RunOutcome, RunRecord, TaskRecord};
