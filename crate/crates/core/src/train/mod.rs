//! Optimization, evaluation, and the experiment harnesses built on them.

mod experiments;
mod flops;
mod metrics;
mod optim;
mod trainer;

pub use experiments::*;
pub use flops::{count_flops, measure_latency, FlopsConfig, FlopsReport, LatencyReport};
pub use metrics::{metrics_from_ranks, ndcg_at, rank_of, CutoffMetrics, MetricsReport};
pub use optim::Adam;
pub use trainer::{
    early_stop, evaluate, mask_seen, rank_samples, train, EpochRecord, EvalConfig, StopDecision,
    TrainConfig, TrainHistory,
};
