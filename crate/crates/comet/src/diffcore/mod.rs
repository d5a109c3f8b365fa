//! Reverse-mode differentiable-computation core: tensors, the operation
//! tape, precise RoI pooling, the Adam optimizer, parameter storage and
//! checkpoint serialization.

mod adam;
mod checkpoint;
mod graph;
mod ops;
mod params;
mod prroi;
mod tensor;

pub use adam::{adam_step, scheduled_lr, AdamConfig, AdamState};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_reader, save_checkpoint, save_checkpoint_writer,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use graph::{smooth_l1_scalar, Graph, NodeId};
pub use ops::{ConvSpec, DeconvSpec, BN_EPS, BN_MOMENTUM};
pub use params::{Param, ParamStore};
pub use prroi::{bilinear_sample, bilinear_sample_grad_xy, check_roi_box, prroi_bwd, prroi_fwd};
pub use tensor::Tensor;

use crate::Result;

/// Fold the collected batch-norm statistics of a finished training step into
/// the running averages with the standard momentum rule.
pub fn apply_bn_updates(
    store: &mut ParamStore,
    updates: &[(String, Tensor, String, Tensor)],
) -> Result<()> {
    for (mean_name, mean, var_name, var) in updates {
        for (name, stat) in [(mean_name, mean), (var_name, var)] {
            let t = store.tensor_mut(name)?;
            for (r, &b) in t.data_mut().iter_mut().zip(stat.data()) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}
