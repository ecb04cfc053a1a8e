//! Knowledge-graph-enhanced LLM reranking: corpus ingestion, GAT triple
//! scoring, top-Q retrieval, a base CF recommender, prompt construction,
//! LLM completion/parsing and leave-one-out evaluation.

pub mod baserec;
pub mod binfmt;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gat;
pub mod llm;
pub mod promptgen;
pub mod retriever;
pub mod sampling;
pub mod synth;

pub use baserec::{CandidateList, CfConfig, CfModel, TrainedCf};
pub use corpus::{Catalog, Dataset, DatasetFormat, DatasetSplit, Interaction, KnowledgeGraph, Triple};
pub use error::{Error, Result};
pub use eval::{EvalConfig, MetricReport, RunOutput};
pub use gat::{EmbeddingStore, GatParams, GatTrainConfig, LossForm, TrainedGat};
pub use llm::{Completer, HttpCompleter, InferenceParams, MockCompleter, MockMode, RankedList};
pub use promptgen::{Artifacts, PromptOptions, PromptVariant, SentenceTemplates};
pub use retriever::{ScoredTriple, TripleIndex};
pub use sampling::SamplingConfig;
