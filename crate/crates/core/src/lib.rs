//! Metric-driven preference signals for a toy translation system: QE-based
//! data filtering, PPO with metric rewards, N-best reranking and MBR decoding.

pub mod error;
pub mod bench;
pub mod evaluate;
pub mod filter;
pub mod par;
pub mod pipeline;
pub mod policy;
pub mod remote;
pub mod rerank;
pub mod rltrain;
pub mod scoring;
pub mod synthdata;
pub mod textmetrics;

pub use error::{Error, RemoteError, Result};
pub use policy::{Hypothesis, Policy, PolicyConfig, SamplingConfig, Vocab};
pub use rerank::{mbr_select, nbest_rerank, pipeline_select, CandidateSet, Selection, Stage};
pub use scoring::{MetricBackend, ScoreItem, Scorer};
pub use synthdata::{gen_corpus, split, Corpus, SentencePair, TaskSpec};
pub use textmetrics::{chrf, corpus_bleu, sentence_bleu, MetricId, MetricScore};
