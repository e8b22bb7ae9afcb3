//! Speech-driven 3D facial animation with perceptual lip-reading supervision
//! on differentiable Gaussian-splat renders.
//!
//! The pipeline: a parametric head model ([`face`]) drives splats bound to its
//! triangles ([`avatar`]), a software rasterizer renders the lip region with
//! analytic vertex gradients ([`render`]), and an autoregressive transformer
//! ([`decoder`]) predicts per-frame vertex offsets from audio features
//! ([`audio`]). Training ([`train`]) runs a three-stage curriculum: geometric
//! pretraining, domain adaptation with re-weighted vertex loss, and a final
//! stage that adds a lip-reading feature loss ([`losses`]) computed through
//! the renderer and a frozen visual-speech extractor ([`lipreader`]).
//!
//! Everything is `f64` and seed-deterministic; analytic gradients are checked
//! against central finite differences (see [`fd`]) throughout the test suite.

pub mod arrays;
pub mod audio;
pub mod avatar;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod face;
pub mod fd;
pub mod lipreader;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod render;
pub mod train;

pub use error::{Error, Result};
