//! From-scratch differentiable layers, the residual U-Net, the segment
//! classifier, weight files and gradient verification.

pub mod cnn;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod signal_ops;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod unet;
pub mod weights;

pub use cnn::{cnn_forward, BnMode, CnnConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use signal_ops::Axis;
pub use suite::{gradient_suite, SuiteCase};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use unet::{bounded_mask, unet_forward, MaskBound, UNetConfig};
pub use weights::{load_weights, save_weights, BoundParams, ModelWeights};
