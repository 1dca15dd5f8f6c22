//! Zero- and few-shot multi-type anomaly detection and segmentation.
//!
//! A frozen vision-language backbone (see [`encoder`]) yields per-stage patch
//! grids; small linear [`adapter`]s map them into the text space, where each
//! patch is scored against defect-aware prompt sets built from a knowledge
//! base ([`kba`], [`prompts`]).

pub mod adapter;
pub(crate) mod binio;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod fewshot;
pub mod infer;
pub mod kba;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod prompts;
pub mod synthetic;
pub mod train;

pub use binio::fnv1a64;
pub use error::{Error, ErrorKind, Result};
