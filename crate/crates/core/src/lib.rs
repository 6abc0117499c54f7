//! Dynamic template tracking and recognition with linear dynamical systems.

pub mod error;
pub mod features;
pub mod frame;
pub mod io;
pub mod lds;
pub mod linalg;
pub mod tracker;
pub mod synth;
pub mod baselines;
pub mod recognition;
pub mod metrics;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/models.md")]
    struct Models;
    #[doc = include_str!("../../../book/src/histograms.md")]
    struct Histograms;
    #[doc = include_str!("../../../book/src/tracking.md")]
    struct Tracking;
    #[doc = include_str!("../../../book/src/estimation.md")]
    struct Estimation;
    #[doc = include_str!("../../../book/src/recognition.md")]
    struct Recognition;
    #[doc = include_str!("../../../book/src/synthetic.md")]
    struct Synthetic;
}
