//! Multi-behavior sequential recommender with verifiable numerics.
//!
//! The crate is organized around a small dense-tensor autodiff engine
//! ([`tensor`]), interaction-log ingestion and per-slot graph construction
//! ([`data`]), the model itself — short-term relational graph encoder,
//! cross-behavior attention memory, gated fusion and contrastive objectives
//! ([`model`]) — plus training ([`train`]) and leave-one-out ranking
//! evaluation ([`eval`]).
//!
//! Every numerical component is checkable against an independent oracle:
//! gradients against central finite differences, sparse adjacency
//! normalization against dense brute force, attention against a per-node
//! double loop, and metrics against a sort-based ranker.

pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;
