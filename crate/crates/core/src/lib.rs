//! Pairwise social-relation recognition on a from-scratch tensor stack.
//!
//! The pipeline pools a convolutional feature map into global and per-person
//! features, runs complete-graph message passing over persons to form relation
//! queries, decodes those queries with a small transformer, and symmetrizes the
//! pair logits. Training uses class-weighted binary cross-entropy with
//! unilateral or bilateral pair masks; evaluation reports per-class recall and
//! mean average precision. An INT8 path provides fake-quant training,
//! simulated integer inference and a compact checkpoint.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fem;
pub mod forward;
pub mod gqm;
pub mod gradsuite;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod tensor;
pub mod train;
pub mod trm;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
