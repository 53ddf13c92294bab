//! Noisy-student policy optimization with clean-teacher token distillation.
//!
//! A frozen teacher reads clean audio; a student reads the noisy version of
//! the same clip and is trained with group-relative policy gradients, a masked
//! teacher-to-student KL term, and a reward bonus for candidates whose noisy
//! distributions track the teacher. The crate also carries the synthetic data
//! generator, the exact-match robustness metrics and window-ablation grounding
//! diagnostics used to evaluate it.

pub mod align;
pub mod audio;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grounding;
pub mod instance;
pub mod metrics;
pub mod optim;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod shaping;
pub mod synthgen;

pub use error::{Error, Result};
