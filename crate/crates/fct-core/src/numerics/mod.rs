//! Manual neural-network numerics: matrices, layers with explicit backward
//! passes, losses, Adam, and the cosine learning-rate schedule.
//!
//! All compute is `f64` and single threaded. Nothing here allocates hidden
//! state behind the caller's back; a layer caches exactly what its backward
//! pass needs and nothing else, so identical seeds give bit-identical runs.

mod adam;
mod gradcheck;
mod layers;
mod loss;
mod matrix;
pub mod rng;
mod schedule;

pub use adam::AdamState;
pub use gradcheck::{finite_diff_gradient, relative_error};
pub use layers::{
    AffineLayer, BatchNormLayer, Layer, Mode, ParamSlot, ReluLayer, Sequential,
};
pub use loss::{
    info_nce_loss, kl_distillation_loss, l2_normalize_backward, l2_normalize_rows, mse_loss,
    soft_cross_entropy, softmax_cross_entropy,
};
pub use matrix::Matrix;
pub use schedule::{lr_at_epoch, LrSchedule};
