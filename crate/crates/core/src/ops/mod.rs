//! Layer kernels with selection-aware forward and backward passes.
//!
//! Every backward companion accumulates (`+=`) into caller-owned gradient
//! buffers and touches only the entries addressed by the active selections.

mod conv;
mod dense;
mod loss;
mod pool;

pub use conv::{conv2d, conv2d_backward, conv2d_unrestricted, conv_output_extent, ConvGradsMut, ConvWeights};
pub use dense::{dense, dense_backward};
pub use loss::{softmax_cross_entropy, softmax_rows, LossOutput};
pub use pool::{global_avg, global_avg_backward, maxpool2, maxpool2_backward, relu, relu_backward, relu_backward_in_place, MaxPoolIndices};

use crate::error::{Error, Result};

pub(crate) fn check_selection(sel: &[usize], extent: usize) -> Result<()> {
    if sel.is_empty() {
        return Err(Error::Selection("empty selection".into()));
    }
    if let Some(&index) = sel.iter().find(|&&i| i >= extent) {
        return Err(Error::SelectionRange { index, extent });
    }
    Ok(())
}
