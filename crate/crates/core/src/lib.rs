//! Geometry-aware prototype discovery for reinforcement-learning policies.
//!
//! Stage 1 ([`discover`]) trains a small embedding with a proxy-anchor loss and
//! a piecewise-linear manifold loss, then grounds each learned proxy in a real
//! dataset row. Stage 2 ([`pwnet`]) wraps the original policy's encoder with a
//! head that acts through similarities to those prototypes.

pub mod dataset;
pub mod discover;
pub mod embednet;
pub mod envlab;
pub mod error;
pub mod gradcheck;
pub mod manifold;
pub mod numkit;
pub mod pwnet;
pub mod synthfix;
pub mod textfmt;

pub use dataset::{
    collect_rollout, discretize_action, ActionLayout, DatasetMeta, EncodedDataset, PolicyDecomposition, Row,
};
pub use discover::{
    extract_prototypes, train_stage1, ChartSpace, EpochSummary, PrototypeEntry, PrototypeSet, Stage1Config,
    TrainedState,
};
pub use embednet::{LossConfig, MappingNet, ProxyBank, SignMode};
pub use envlab::{make_env, Action, ActionSpace, Actor, BlackBoxConfig, BlackBoxPolicy, Environment};
pub use error::{Error, Result};
pub use manifold::{build_charts, pairwise_similarity, Chart, ChartSet, SimilarityParams};
pub use numkit::{Matrix, MomentOptimizer, OrthonormalBasis, ProjectionResult};
pub use pwnet::{evaluate, train_stage2, PWNetHead, RewardStats, Stage2Config, WrappedPolicy};
pub use synthfix::{make_planes_fixture, PlanesFixture};
