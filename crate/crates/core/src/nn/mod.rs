//! 3D network building blocks on `[N, C, D, H, W]` tensors.

mod act;
mod conv;
mod labels;
mod norm;
mod pool;

pub use act::{relu, softmax_channels};
pub use conv::{conv3d, KERNEL};
pub use labels::{argmax_channels, downsample_labels_nearest, downsample_nearest_tensor, one_hot};
pub use norm::{batchnorm3d, BatchNormState, RunningStats, DEFAULT_EPSILON, DEFAULT_MOMENTUM};
pub use pool::{maxpool3d, upsample_nearest3d};

use serde::{Deserialize, Serialize};

/// Whether batchnorm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}
