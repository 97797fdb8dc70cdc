//! Chat-log request segmentation and expression analytics.
//!
//! User inputs are split into Request, Context and Role spans with the residual
//! Expression text as complement ([`segmark`]). Annotations are produced by an
//! agreement-gated two-annotator loop ([`annotate`]), turned into placeholder
//! templates and a fixed structural taxonomy ([`express`]), and analysed with
//! lexical richness metrics ([`lexstats`]), embedding geometry ([`geom`]) and
//! time-indexed statistics ([`diachrony`]). [`corpus`] handles ingestion and
//! cohort selection.

pub mod annotate;
pub mod corpus;
pub mod diachrony;
pub mod error;
pub mod express;
pub mod geom;
pub mod jsonl;
pub mod lexstats;
pub mod remote;
pub mod segmark;

pub use error::{Error, Result};
