//! KV-cache compression simulator.
//!
//! A seeded attention-only decoder ([`model`]) and synthetic or recorded
//! attention traces ([`trace_io`]) feed a set of eviction policies
//! ([`policy`]) under per-layer budget plans ([`budget`]). The [`metrics`]
//! module measures how much attention and output fidelity each compressed
//! cache keeps.

pub mod attention;
pub mod budget;
pub mod cache;
pub mod error;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod tensor;
pub mod trace_io;

pub use attention::AttentionTrace;
pub use budget::{BudgetPlan, UncertaintyProfile};
pub use cache::{apply_eviction, retained_attention_mass, EvictionDecision, KvCache};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{build_model, ModelConfig, Prefill, ToyModel};
pub use policy::{decide, PolicyConfig, PolicyDecision, PolicyKind, SnapSelector};
pub use tensor::Matrix;
