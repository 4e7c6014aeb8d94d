//! Spherical panorama depth estimation on HEALPix grids.
//!
//! The crate provides the full numerical stack for running a panorama depth
//! decoder on the unit sphere:
//!
//! - [`healpix`] — hierarchical equal-area isolatitude pixelization of the
//!   sphere (nested indexing), with neighbor tables and ancestry windows.
//! - [`transfer`] — precomputed sparse tap tables mapping between
//!   equirectangular rasters and spherical grids, in both directions.
//! - [`raster`] — equirectangular images plus PNG/PFM readers and writers.
//! - [`nn`] — dense kernels (linear, layer norm, attention core, spherical
//!   convolution, feed-forward) with analytic backward passes.
//! - [`model`] — the cross-attention fusion decoder with spherical positional
//!   embedding, a small planar reference encoder, and the composed network.
//! - [`metrics`] — RMSLE/RMSERel losses, the depth metric suite, and scale
//!   alignment.
//! - [`render`] — an analytic box-room panorama renderer producing exact
//!   color/depth pairs for desk-scale experiments.
//! - [`gradcheck`] — central finite-difference gradient checking used by the
//!   test suites.

pub mod error;
pub mod gradcheck;
pub mod healpix;
pub mod io;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod render;
pub mod transfer;

pub use error::{Error, Result};
pub use mat::{Mat, Scalar};
