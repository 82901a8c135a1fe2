//! Dense feature conditioning for video diffusion at desk scale.

pub mod adapter;
pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod model;
pub mod nn;
pub mod params;
pub mod pca;
pub mod rollout;
pub mod tensor_io;
pub mod text;
pub mod train;
pub mod video;
pub mod voxel;

pub use error::{Error, Result};

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// Book chapters, so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/temporal-adapter.md")]
    mod temporal_adapter {}
    #[doc = include_str!("../../../book/src/control-branch.md")]
    mod control_branch {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    mod augmentation {}
    #[doc = include_str!("../../../book/src/pca.md")]
    mod pca {}
    #[doc = include_str!("../../../book/src/voxels.md")]
    mod voxels {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/rollout.md")]
    mod rollout {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
