//! Prior-guided ROI reasoning for 2-D lesion segmentation.
//!
//! The crate covers the whole pipeline: ROI prior templates mined from a
//! mask corpus ([`prior`]), Gaussian guidance maps with boundary decay
//! ([`wings`]), the hierarchical Top-K ROI decision ([`htk`]), retention
//! kernels ([`retention`]) run inside ROI windows ([`backbone`]), the
//! assembled encoder-decoder with its loss and training loop ([`network`]),
//! and Dice / HD95 evaluation ([`metrics`]). Everything sits on a small
//! reverse-mode autodiff core in [`numerics`].

pub mod error;
pub mod exec;
pub mod numerics;

pub use error::{Error, Result};
pub use exec::Exec;
pub mod labelio;
pub mod prior;
pub mod retention;
pub mod wings;
pub mod backbone;
pub mod htk;
pub mod metrics;
pub mod synth;
pub mod network;
