//! Test-time point cloud compression with prompt-tuned diffusion seeds.
//!
//! A cloud is normalized, cut into voxel patches, and each patch is reduced to
//! a small set of seed points whose positions and colors are optimized so that
//! a conditional diffusion up-sampler regrows the patch from them. Only the
//! seeds are entropy coded.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod codec;
pub mod diffusion;
pub mod metrics;
pub mod patching;
pub mod pipeline;
pub mod pointset;
pub mod spatial;
pub mod tensor;
pub mod toydenoiser;
pub mod tuning;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pointsets.md")]
    mod pointsets {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
