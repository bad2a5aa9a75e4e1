//! Specification-conditioned analog circuit generation.
//!
//! The crate maps analog-circuit DAGs and performance specifications
//! (gain, bandwidth, phase margin) into a joint latent space with a pair
//! of encoders, decodes circuits autoregressively from that space, and
//! ships the training loop plus the full evaluation-metric stack
//! (retrieval precision, specification accuracy, MM-D, FID, validity,
//! diversity, reconstruction and unconditional-generation rates).

pub mod autodiff;
pub mod circuit;
pub mod cli;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod trainer;

pub use circuit::{Circuit, Node, NodeType, ValidityReport};
pub use dataset::{BinnedSpecification, DatasetProfile, RawSpecification};
