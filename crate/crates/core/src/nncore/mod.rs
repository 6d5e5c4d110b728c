//! Numerical kernels with hand-written backward passes.
//!
//! Layers hold their parameters as [`Param`]s (value + accumulated gradient)
//! and cache whatever `backward` needs during `forward`. Each layer also has a
//! cache-free `infer` path sharing the same kernel, so a network can serve
//! concurrent read-only inference while bit-matching its eval-mode forward.

pub mod adam;
pub mod array;
pub mod batchnorm;
pub mod conv;
pub mod convlstm;
pub mod dense;
pub mod gradcheck;
pub mod loss;
pub mod pool;
pub mod scheduler;

pub use adam::{adam_step, AdamState};
pub use array::{Float, NdArray, Param};
pub use batchnorm::BatchNorm;
pub use conv::{conv2d, conv2d_backward, Conv2d};
pub use convlstm::{convlstm_cell_step, ConvLstmCell};
pub use dense::{dense, relu, Dense, Dropout, Relu};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, GradTarget};
pub use loss::{log_softmax, log_softmax_nll, nll};
pub use pool::{maxpool2d, maxpool2d_backward, MaxPool2d};
pub use scheduler::{plateau_update, PlateauScheduler};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
