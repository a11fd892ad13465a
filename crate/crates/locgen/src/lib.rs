//! Desk-scale generative location modeling.
//!
//! The crate trains a small autoregressive transformer to propose bounding
//! boxes for placing an object of a given class into a scene. Scenes are
//! synthetic multi-channel occupancy grids with rule-defined plausibility,
//! so every label is exact and every experiment is reproducible from a seed.
//!
//! Pipeline, end to end:
//!
//! 1. [`scene`] builds scenes and annotation sets (plausible and implausible
//!    box placements per class).
//! 2. [`model`] defines the decoder: a scene/class prefix followed by four
//!    quantized box-coordinate tokens.
//! 3. [`pretrain`] fits the decoder by negative log-likelihood on plausible
//!    placements; [`dpo`] then sharpens it with preference pairs that
//!    contrast plausible against implausible placements.
//! 4. [`sampler`] draws boxes token by token (top-k, temperature, optional
//!    spatial region constraint).
//! 5. [`eval`] scores sampled boxes against annotations with one-to-one
//!    matching and reports true/false positive rates.
//!
//! [`autodiff`] is the in-crate reverse-mode engine everything trains on;
//! [`rng`] is a splittable counter-based generator that makes every stage
//! independently reproducible; [`report`] writes the CSV/SVG/JSONL artifacts.

pub mod autodiff;
pub mod dataio;
pub mod dpo;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod model;
pub mod pretrain;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod scene;

pub use error::{Error, Result};
