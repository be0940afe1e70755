//! Tree-structured articulated pose estimation.
//!
//! The crate covers the full pipeline for detecting articulated figures
//! (people, animals) built from a mix of single parts (joints) and combined
//! parts (limbs):
//!
//! 1. **Structure learning** ([`treelearn`]) — learn a (possibly latent) tree
//!    over part variables from observed part locations, using information
//!    distances, recursive grouping, and Chow-Liu preprocessing.
//! 2. **Features** ([`features`]) — dense 31-channel HOG maps and multi-scale
//!    feature pyramids.
//! 3. **Scoring** ([`scoring`]) — appearance filter responses and the
//!    generalized distance transform for quadratic deformation costs.
//! 4. **Inference** ([`inference`]) — exact MAP inference on the part tree
//!    with typed parts, non-maximum suppression, and skeleton fitting.
//! 5. **Training** ([`training`]) — visual-category learning for combined
//!    parts, type derivation for single parts, co-occurrence bias estimation,
//!    and joint max-margin training with hard-negative mining.
//! 6. **Evaluation** ([`eval`]) — PCP (percentage of correct parts) scoring.
//!
//! [`io`] holds dataset ingestion, image decoding, and configuration;
//! [`synth`] generates seeded stick-figure datasets for end-to-end testing;
//! [`pipeline`] ties the stages together for the CLI.

pub mod error;
pub mod eval;
pub mod features;
pub mod inference;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod scoring;
pub mod synth;
pub mod training;
pub mod treelearn;

pub use error::{Error, Result};
