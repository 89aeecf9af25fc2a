//! Weakly supervised temporal action localization with cascaded adversarial
//! mining and pyramid attention.
//!
//! Pipeline: a two-stage classifier with online erasing ([`ccm`]) and a
//! four-level temporal pyramid ([`pam`]) are trained from video-level labels
//! only; at inference their class activation sequences and heatmaps are fused
//! and thresholded into scored proposals ([`localization`]) which are scored
//! against ground truth by [`eval`].

pub mod ccm;
pub mod data;
pub mod error;
pub mod eval;
pub mod interval;
pub mod localization;
pub mod nn;
pub mod pam;
pub mod pipeline;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
