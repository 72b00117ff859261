//! Unsupervised multimodal entity linking.
//!
//! Offline, the engine builds a contextualized mention/entity graph, trains
//! a text-view GCN teacher and an image-view student on PPR subgraphs, and
//! synthesizes a 14-component evidence vector per mention–entity pair.
//! Online, it retrieves candidates over nine channels, scores a prior, and
//! re-ranks with an LLM-induced decision tree.
//!
//! Numerical code is generic over [`Scalar`]; the aliases below fix it to
//! `f64` (the default used by the pipeline) or `f32`.

pub mod corpus;
pub mod embed;
pub mod eval;
pub mod evidence;
pub mod gnn;
pub mod graph;
pub mod lexical;
pub mod linalg;
pub mod llmclient;
pub mod pipeline;
pub mod ppr;
pub mod reasoning;
pub mod retrieval;
pub mod scalar;

pub use scalar::Scalar;

/// Scalar used by the pipeline and the CLI.
pub type Real = f64;

pub type EmbeddingStore = embed::EmbeddingStore<Real>;
pub type ContextGraph = graph::ContextGraph<Real>;
pub type GnnModel = gnn::GnnModel<Real>;
pub type EvidenceVector = evidence::EvidenceVector<Real>;
pub type DecisionTree = reasoning::DecisionTree<Real>;
pub type CandidateSet = retrieval::CandidateSet<Real>;

pub type EmbeddingStoreF32 = embed::EmbeddingStore<f32>;
pub type ContextGraphF32 = graph::ContextGraph<f32>;
pub type GnnModelF32 = gnn::GnnModel<f32>;
pub type EvidenceVectorF32 = evidence::EvidenceVector<f32>;
pub type DecisionTreeF32 = reasoning::DecisionTree<f32>;
pub type CandidateSetF32 = retrieval::CandidateSet<f32>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Embed(#[from] embed::EmbedError),
    #[error(transparent)]
    Graph(#[from] graph::GraphError),
    #[error(transparent)]
    Gnn(#[from] gnn::GnnError),
    #[error(transparent)]
    Evidence(#[from] evidence::EvidenceError),
    #[error(transparent)]
    Reasoning(#[from] reasoning::ReasoningError),
    #[error(transparent)]
    Llm(#[from] llmclient::LlmError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
