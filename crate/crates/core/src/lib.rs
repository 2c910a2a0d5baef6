//! Hybrid-weights decoupling network (HWDNet) for RGB-infrared cross-modality
//! vehicle re-identification.
//!
//! The crate covers the whole pipeline: dataset indexing and a synthetic
//! paired-modality generator ([`dataset`]), the two-stream encoder with weight
//! restrainers ([`backbone`]), orientation decoupling ([`decouple`]), the
//! training objectives ([`losses`]), retrieval evaluation ([`metrics`]) and
//! the optimization loop with checkpointing ([`trainer`]).

pub mod backbone;
pub mod dataset;
pub mod decouple;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
