//! Sparse multi-task mixture-of-experts: progressive routing, deduplicated
//! grouped expert execution, a cross-task load-balancing regularizer, a
//! page-pool workspace allocator, and a small training and benchmark
//! harness around them.

pub mod balance;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod layer;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod routing;
pub mod train;
pub mod workspace;

pub use balance::{
    compute_load_stats, lb_loss_gradient, skew_diagnostics, LoadStats, MassSource, SkewDiagnostics,
};
pub use data::{generate, read_log, write_log, InteractionLog, Record, SynthSpec};
pub use error::{Error, Result};
pub use exec::{forward_sparse, ExecutionPlan, ExpertPool, ForwardPass};
pub use layer::{Activation, Affine};
pub use linalg::{FlopCounter, Matrix};
pub use metrics::{auc, gauc};
pub use model::{ModelDims, ModelSpec, MoeModel, Params};
pub use routing::{
    progressive_route, route, RouterBank, RoutingBudget, RoutingDecision, RoutingMode, Selection,
};
pub use train::{backward, grad_check, train, Batch, TrainConfig};
pub use workspace::{provision, required_pages, LoadProfile, WorkspaceDims, WorkspacePool};
