//! Adapter-based cross-lingual dense retrieval at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`graph`] / [`optim`] / [`checkpoint`] — a minimal f64
//!   autodiff engine with named, freezable parameters.
//! * [`adapters`] / [`encoder`] / [`model`] — a small transformer encoder with
//!   insertable bottleneck adapter stacks and retrieval heads.
//! * [`corpus`] / [`mlm`] / [`retrieval`] — synthetic multilingual data,
//!   masked-language-model pretraining, and contrastive retrieval training.
//! * [`pipeline`] / [`eval`] / [`audit`] — passage segmentation, exhaustive
//!   search, ranking metrics with significance tests, and parameter-count
//!   accounting.
//! * [`experiment`] — the end-to-end orchestration used by the CLI.

pub mod adapters;
pub mod audit;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod mlm;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
