//! Roadside sensor calibration, multi-sensor track fusion, ground-truth
//! validation and surrogate safety metrics for work-zone digital twins.
//!
//! All planar work happens on an azimuthal-equidistant plane ([`geo`]).
//! Sensors are aligned to it with [`calibration`], merged by [`fusion`],
//! scored by [`validation`] and screened for conflicts by [`safety`].
//! [`pipeline`] chains the steps over files; [`simulator`] produces scenes
//! with known answers.

// `!(x > 0.0)` guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod fusion;
pub mod geo;
pub mod model;
pub mod pipeline;
pub mod records;
pub mod safety;
pub mod simulator;
pub mod synthetic;
pub mod validation;
pub mod wkt;

pub use error::{Error, Result};

/// Guide chapters, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/validation.md")]
    mod validation {}
    #[doc = include_str!("../../../book/src/safety.md")]
    mod safety {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/service.md")]
    mod service {}
}
