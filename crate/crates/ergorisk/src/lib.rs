//! Posture-to-risk toolkit.
//!
//! Two halves share one pipeline. The rule-based half turns 2D skeletal
//! landmarks into joint angles and a deterministic ergonomic risk label
//! ([`pose`], [`geometry`], [`reba`]). The learned half classifies the same
//! risk label from a rendered frame plus the raw landmarks with a compact
//! multimodal attention network, built on an in-crate tensor/autodiff kernel
//! ([`tensor`], [`autodiff`], [`model`], [`train`], [`metrics`]). The
//! [`synth`] module generates the labeled stick-figure corpus that ties the
//! two halves together, and [`cli`] exposes everything as subcommands.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod pose;
pub mod reba;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
