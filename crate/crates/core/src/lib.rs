//! Core engine: corpus chunking, model providers, embedding retrieval, the
//! entity graph with Leiden communities, query answering and the MCQ
//! benchmark harness.

pub mod benchmark;
pub mod config;
pub mod corpus;
pub mod embedding_index;
pub mod knowledge_graph;
pub mod model_client;
pub mod pipeline;
pub mod prompts;
pub mod query_engine;
