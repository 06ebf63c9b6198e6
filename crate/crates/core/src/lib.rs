//! Layered knowledge base and knowledge-aware question decomposition.

pub mod chunking;
pub mod extraction;
pub mod gateway;
pub mod kb;
pub mod model;
pub mod ingest;
pub mod retrieval;
pub mod solver;
pub mod evaluation;
pub mod decomposer;
pub mod synthetic;
