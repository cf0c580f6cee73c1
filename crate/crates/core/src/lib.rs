//! Crowd-aware domain adaptation for crowd counting from point annotations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: tensors, reverse-mode differentiation, layers, Adam and the
//!   checkpoint format.
//! - [`dataset`]: synthetic two-domain crowd scenes with full ground truth,
//!   scene/manifest I/O and training-time augmentation.
//! - [`density`]: ground-truth density maps, the counting loss and count
//!   metrics.
//! - [`pcs`]: point-derived crowd segmentation learned from bags of pixels
//!   labelled only by head points.
//! - [`adapt`]: the counter, segmentation-gated adversarial feature transfer,
//!   pseudo-label density alignment and the adaptation training loop.
//! - [`experiment`]: configuration and orchestration of the whole pipeline,
//!   including the ablation ladder.
//!
//! A narrative guide with runnable snippets lives in the `book/` directory
//! of the repository.

pub mod adapt;
pub mod dataset;
pub mod density;
mod error;
pub mod experiment;
pub mod io;
pub mod pcs;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/density.md")]
    mod density {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    mod segmentation {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
