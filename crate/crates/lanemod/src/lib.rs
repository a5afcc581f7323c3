//! Differentiable geometric losses for lane proposal banks.
//!
//! A lane detector of the curve-regression family predicts a bank of `K`
//! proposals (cubic Bézier control points plus a confidence logit) per image,
//! far more than the `M` annotated lanes. This crate implements the loss
//! terms that modulate such a bank directly in proposal-parameter space:
//!
//! * a sparse regression/classification pair over optimally matched
//!   positives ([`losses::baseline_loss`]),
//! * dense availability terms (per-proposal straightness and endpoint
//!   location, [`losses::shape_loss`] / [`losses::location_loss`]),
//! * an intra-cluster diversity term over proposals sharing a matched
//!   ground-truth lane ([`losses::diversity_loss`]),
//! * a quality-aware classification term whose positive targets decay with
//!   regression error ([`losses::soft_label`] / [`losses::discrimination_loss`]).
//!
//! Every loss returns analytic gradients with respect to the proposal
//! parameters; [`gradcheck`] verifies them against central finite
//! differences. [`trainer`] descends the combined objective on synthetic
//! scenes, and [`eval`] scores the resulting banks with rasterized-IoU F1
//! and row-grid point accuracy.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the companion CLI
//! crate carries all IO and file formats.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod assignment;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{BezierLane, Frame, LanePolyline, ProposalBank, Scene};
pub use losses::{LossReport, LossWeights};
