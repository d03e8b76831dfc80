//! Knowledge editing through in-context Updated Information: benchmark
//! ingestion, embedding and retrieval memory, prompt rendering, alignment
//! data construction, generation backends, metrics and evaluation.

pub mod alignbuild;
pub mod backend;
pub mod corpus;
pub mod embed;
pub mod harness;
pub mod http;
pub mod memory;
pub mod metrics;
pub mod prompt;
pub mod synthesis;
