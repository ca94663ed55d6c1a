//! Dynamic retrieval-augmented generation driven by token entropy and
//! self-attention.

pub mod bm25;
pub mod eval;
pub mod gateway;
pub mod mock;
pub mod orchestrator;
pub mod qfs;
pub mod rind;
pub mod sentence;
pub mod stopwords;
pub mod trace;
