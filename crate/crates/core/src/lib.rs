//! Cross-modality 3D volume translation with a globally and locally aware GAN.
//!
//! The generator combines a global residual path over the whole volume with `K`
//! independent local paths over disjoint patches; a fusion head regresses the target
//! volume. Training combines adversarial, voxel-wise L1, MS-SSIM and region-of-interest
//! losses. Evaluation covers synthesis metrics and a downstream diagnostic classifier.

pub mod atlas;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
pub mod nifti_io;
pub mod nn;
pub mod phantom;
pub mod training;
pub mod volume;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use dataset::{Dataset, Label, PairedSample};
pub use error::{Error, Result};
pub use volume::{fuse_patches, normalize_intensity, tile_patches, PatchGrid, Shape, Volume};
