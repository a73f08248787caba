//! Hierarchical multi-scale knowledge-graph survival analysis for
//! whole-slide images, at desk scale.
//!
//! The pipeline: multi-scale tiling aligns each low-magnification tile with
//! a 4x4 grid of high-magnification patches ([`geometry`]); patch features
//! arrive precomputed or from a frozen stub encoder ([`encoder`],
//! [`features`]); a locality-constrained dynamic graph aggregates each
//! tile's patches ([`kgn`]); bidirectional cross-attention fuses the two
//! magnifications per tile ([`bix`]); a second graph aggregates tiles into a
//! slide embedding ([`model`]); and a discrete-time hazard head drives a
//! censoring-aware likelihood ([`survival`]). Training, cross-validation,
//! the ablation matrix, and reporting live in [`train`], [`cv`], and
//! [`report`]. Everything is seeded and reproducible; gradients come from a
//! small reverse-mode tape ([`autodiff`]) checked against finite
//! differences.

pub mod autodiff;
pub mod bix;
pub mod cohort;
pub mod config;
pub mod cv;
pub mod encoder;
pub mod error;
pub mod features;
pub mod geometry;
pub mod hashing;
pub mod kgn;
pub mod metrics;
pub mod model;
pub mod report;
pub mod survival;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
