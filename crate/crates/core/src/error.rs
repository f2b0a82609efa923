//! Error type shared by every module of the crate.

use crate::tree::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed tree document: {0}")]
    Malformed(String),
    #[error("duplicate node id {0}")]
    DuplicateNode(NodeId),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("self loop on node {0}")]
    SelfLoop(NodeId),
    #[error("duplicate edge {0} - {1}")]
    DuplicateEdge(NodeId, NodeId),
    #[error("edge set is not a tree: {0}")]
    NotATree(String),
    #[error("edge {u} - {v}: gamma {gamma} outside the open interval (1e-9, 1 - 1e-9) in magnitude")]
    GammaOutOfRange { u: NodeId, v: NodeId, gamma: f64 },
    #[error("tree has no observable nodes")]
    NoObservables,
    #[error("tree is not minimal: {0}")]
    NotMinimal(String),
    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no valid triple for observable {0}")]
    NoValidTriple(NodeId),
    #[error("zero correlation between {0} and {1} in the denominator")]
    ZeroCorrelation(NodeId, NodeId),
    #[error("covariance is not tree-representable: {0}")]
    NotTreeRepresentable(String),
    #[error("need at least {min} Monte Carlo samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),
    #[error("broken provenance: {0}")]
    BrokenProvenance(String),
    #[error("layer mismatch: expected layer {expected}, got {got}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("layered channels do not reproduce the tree covariance (max deviation {0:e}); run the tree through normalize_for_synthesis first")]
    PlanNotExact(f64),
    #[error("transform did not reach a fixpoint within {0} iterations")]
    TransformDiverged(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by hitting a memory or enumeration cap.
    pub fn is_resource_cap(&self) -> bool {
        matches!(self, Error::ResourceCap(_))
    }
}
