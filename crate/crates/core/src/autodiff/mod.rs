//! Dense `f64` tensors with reverse-mode gradients, dense layers, Adam,
//! weight clipping, finite-difference checking and checkpoint files.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod rng;
mod tensor;

pub use adam::{clip_weights, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, GradcheckReport, DEFAULT_EPS};
pub use graph::{log_sum_exp, sigmoid, softmax_rows, Gradients, Graph, Param, ParamId, ParamStore, Var};
pub use layers::{Activation, DenseLayer, Mlp, DEFAULT_LEAKY_SLOPE};
pub use rng::{splitmix64, NormalSource, Rng, ZeroNoise};
pub use tensor::Tensor;
