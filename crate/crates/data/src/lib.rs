//! Dataset loading and preprocessing for small image benchmarks: IDX
//! (MNIST-family) and CIFAR-10 binaries, per-channel normalization,
//! pad-crop / flip / cutout augmentation, stratified splits and batching.

pub mod augment;
pub mod batch;
pub mod cifar;
pub mod dataset;
pub mod error;
pub mod idx;
pub mod normalize;
pub mod split;

pub use augment::{augment_batch, AugmentPolicy};
pub use batch::Batches;
pub use cifar::{load_cifar10_bin, load_cifar10_file, CifarSplit};
pub use dataset::ImageDataset;
pub use error::{DataError, Result};
pub use idx::{load_idx, write_idx};
pub use normalize::{channel_stats, normalize, Normalization};
pub use split::deterministic_split;
