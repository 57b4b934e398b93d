//! Small dense neural networks with reverse-mode differentiation.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod policy;
pub mod probe;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{ConvSpec, Linear, Mlp, WindowEncoder};
pub use params::{Adam, Gradients, ParamId, ParamStore};
pub use policy::{
    gaussian_log_prob, sample_action, AnyPolicy, HistoryBuffer, MoeEval, MoeOutput, MoePolicy, PolicyConfig,
    PolicyDims, RunningNorm, StudentInputs, StudentPolicy, TeacherInputs,
};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
