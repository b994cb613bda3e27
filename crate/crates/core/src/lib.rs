//! Width-wise early exiting for CNN-based automatic modulation
//! classification.
//!
//! The crate covers the whole experimental chain: synthetic IQ frame
//! generation ([`dataset`]), a small reverse-mode autodiff engine
//! ([`tensor`]), the baseline ResNet and the three-expert composite
//! ([`models`]), analytic FLOP accounting ([`flops`]), entropy-based exit
//! thresholds ([`exit_policy`]), two-phase training ([`training`]), gated
//! inference ([`inference`]), metrics and Monte-Carlo reports
//! ([`evaluation`]) and the end-to-end [`pipeline`].

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exit_policy;
pub mod flops;
pub mod inference;
pub mod models;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
