//! Layered synthesis of latent Gaussian trees with sign ambiguity.
//!
//! A tree of Gaussian variables with unit variances is described by its
//! edge correlations; latent nodes carry an unidentifiable sign. The crate
//! computes the mutual-information quantities that bound the codebook rates,
//! builds layered codebooks, synthesizes observable sequences through them,
//! rewrites general trees into layered form and checks the output
//! empirically.

pub mod catalog;
pub mod channel;
pub mod codebook;
pub mod covariance;
pub mod error;
pub mod info;
pub mod plan;
pub mod rng;
pub mod signs;
pub mod synthesis;
pub mod transforms;
pub mod tree;
pub mod validation;

pub use codebook::{build_all_codebooks, CodebookSet, CodebookSource, RateTuple, VirtualCodebooks};
pub use covariance::{
    marginal_covariance, observable_covariance, validate_correlation_matrix, validate_correlation_space,
    CovarianceMatrix,
};
pub use error::{Error, Result};
pub use info::{
    all_rate_bounds, edge_corr_squared, layer_rate_bounds, mixture_mi, mutual_info_direct, mutual_info_leaf,
    uniform_sign_optimality_check, MIEstimate, RateBounds,
};
pub use plan::SynthesisPlan;
pub use signs::{enumerate_sign_equivalents, Sign, SignAssignment, SignDistribution};
pub use synthesis::{synthesize_batch, synthesize_one, verify_provenance, SynthesisBatch, SynthesisOutput};
pub use transforms::{
    hyper_chain_violations, insert_pseudo_nodes, normalize_for_synthesis, reorder_layers, TransformLog,
};
pub use tree::{assign_layers, parse_tree, Edge, GaussianTree, LayerDecomposition, Node, NodeId, NodeKind};
pub use validation::{
    convergence_sweep, empirical_covariance, histogram_tv, sign_invariance_suite, ConvergenceReport, SweepConfig,
};
