//! Brain tumor segmentation from manual and ensemble-generated labels.
//!
//! Three teacher architectures are trained on labeled multimodal volumes,
//! averaged into an ensemble that annotates unlabeled volumes, and a single
//! student network is trained on the union of manual and ensemble labels.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod orchestrator;
pub mod regions;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/regions.md")]
    mod regions {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
