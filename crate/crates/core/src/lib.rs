//! Binary image screening with frozen feature extractors, trainable
//! classification heads, confidence intervals on test accuracy, and
//! superpixel-based explanations.

pub mod confidence;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod image;
pub mod metrics;
pub mod model;
pub mod report;
pub mod segmentation;
pub mod synthetic;
pub mod training;
pub mod viz;

pub use error::{Error, Result};

/// Guide chapters, compiled so their listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/confidence.md")]
    mod confidence {}
    #[doc = include_str!("../../../book/src/superpixels.md")]
    mod superpixels {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/heatmaps.md")]
    mod heatmaps {}
    #[doc = include_str!("../../../book/src/reports.md")]
    mod reports {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
