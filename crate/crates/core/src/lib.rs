//! Few-shot relevance classification for emerging cyber-threat events.
//!
//! The crate takes a handful of labeled posts about a new event and turns them
//! into a relevance classifier. The moving parts:
//!
//! - [`corpus`]: dataset ingestion, annotation merging, intercoder agreement
//!   and split construction.
//! - [`backends`]: the model capabilities the pipeline needs (completion,
//!   masked-token prediction with trainable parameters, embeddings) and
//!   deterministic mock implementations.
//! - [`augment`]: class-conditioned generation prompts and completion parsing.
//! - [`filter`]: centroid-distance ranking, thresholds with an expert review
//!   band, and nearest-original lookup.
//! - [`fewshot`]: cloze patterns, verbalizers and the cloze training losses.
//! - [`pipeline`]: multi-level fine-tuning plans with checkpoint lineage.
//! - [`evalharness`]: metrics, seed aggregation, report formatting and the
//!   ablation matrix.
//! - [`review_service`]: HTTP API for the expert filtering loop.
//! - [`cli`]: the `cti-fewshot` command line.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod augment;
pub mod backends;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod evalharness;
pub mod fewshot;
pub mod filter;
pub mod pipeline;
pub mod review_service;
pub mod synthetic;
mod util;

pub use corpus::{DatasetBundle, LabeledInstance, Label, Provenance, SplitSpec};
