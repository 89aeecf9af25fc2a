//! Minimal differentiable kernel for the small 1-D temporal networks: forward
//! ops with exact reverse-mode gradients, the multi-label loss, plain SGD, and
//! the parameter checkpoint format.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod map;
pub mod optim;
pub mod params;

pub use checkpoint::{NamedTensor, TensorStore};
pub use layers::{
    global_avg_pool, global_avg_pool_backward, maxpool1d, maxpool1d_backward, relu, relu_backward, Conv1d, Dense,
};
pub use loss::{add_l2_grad, cross_entropy, l2_norm_sq, multilabel_loss, sigmoid, LossForm};
pub use map::FeatureMap;
pub use optim::{optimizer_step, LrSchedule, OptimizerState};
pub use params::Parameters;
