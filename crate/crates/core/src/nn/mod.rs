//! Trainable numeric layers with analytic gradients.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_layer, finite_difference_check, GradCheckConfig, GradCheckReport, Layer};
pub use graph::{Graph, Var};
pub use params::{init_uniform, Checkpoint, Gradients, ParameterStore};
pub use tensor::Tensor;
