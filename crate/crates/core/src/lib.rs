//! Prompt-routed, mask-guided single-image deraining on the CPU.
//!
//! A vision-language gateway ([`vlm`]) scores each rainy image against text
//! prompts and [`rpn`] picks the matching decoder sub-network of the
//! [`backbone`]. Predicted rain masks drive the cross-attention in [`mgca`].
//! [`dls`] holds the scheduled reconstruction loss and [`trainer`] the
//! training loop, evaluation and checkpoints.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
#[cfg(feature = "clip")]
pub mod clip;
pub mod dataset;
pub mod dls;
pub mod error;
pub mod imaging;
pub mod kernels;
pub mod mgca;
pub mod nn;
pub mod optim;
pub mod rpn;
pub mod trainer;
pub mod viz;
pub mod vlm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/routing.md")]
    mod routing {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/backbone.md")]
    mod backbone {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
