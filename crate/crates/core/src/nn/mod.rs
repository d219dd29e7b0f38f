//! Minimal neural-network engine: tensors, a fixed layer set with analytic
//! gradients, momentum SGD and a finite-difference checker.

pub mod gradcheck;
mod model_io;
pub mod network;
pub mod ops;
pub mod optim;
mod tensor;
pub mod train;

pub use gradcheck::{gradient_check, GradCheckReport, Objective, Problem};
pub use model_io::Model;
pub use network::{network_backward, network_forward, LayerParams, LayerSpec, NetworkSpec, ParamStore, Trace};
pub use ops::{
    conv2d_forward, cross_entropy_loss, fc_forward, maxpool2d_forward, mse_loss, pnorm_forward, relu, softmax,
    timedelay_forward, ConvGeom, PoolGeom, Segment,
};
pub use optim::{clip_grad_norm, sgd_step, TrainConfig};
pub use tensor::Tensor;
pub use train::{train_classifier, FrameLabels, Sequence, TrainLog};
