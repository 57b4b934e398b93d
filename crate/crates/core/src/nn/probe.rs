//! Tiny networks and random inputs for checks that need many cheap policies.

use rand::Rng;

use super::layers::ConvSpec;
use super::policy::{PolicyConfig, PolicyDims, StudentInputs, StudentPolicy, TeacherInputs};
use super::tensor::Tensor;

/// One hidden layer of width `hidden`, a two-stage window encoder and a
/// three-frame student history.
pub fn tiny_config(n_experts: usize, hidden: usize) -> PolicyConfig {
    PolicyConfig {
        n_experts,
        hidden: vec![hidden],
        latent: 6,
        convs: vec![
            ConvSpec {
                kernel: 3,
                stride: 2,
                channels: 4,
            },
            ConvSpec {
                kernel: 2,
                stride: 1,
                channels: 3,
            },
        ],
        residual: true,
        init_log_std: -0.5,
        student_hidden: vec![hidden],
        history: 3,
    }
}

pub fn tiny_dims() -> PolicyDims {
    PolicyDims {
        joints: 2,
        keybodies: 1,
        proprio: 3,
        privileged: 2,
        features: 4,
        window: 6,
    }
}

/// Entries uniform in `[-1, 1)`.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn random_teacher_inputs<R: Rng + ?Sized>(dims: &PolicyDims, b: usize, rng: &mut R) -> TeacherInputs {
    TeacherInputs {
        proprio: random_tensor(rng, b, dims.proprio),
        privileged: random_tensor(rng, b, dims.privileged),
        goal: random_tensor(rng, b, dims.features),
        window: random_tensor(rng, b, dims.window * dims.features),
    }
}

pub fn random_student_inputs<R: Rng + ?Sized>(policy: &StudentPolicy, b: usize, rng: &mut R) -> StudentInputs {
    StudentInputs {
        history: random_tensor(rng, b, policy.config.history * policy.dims.proprio),
        goal: random_tensor(rng, b, policy.dims.features),
        window: random_tensor(rng, b, policy.dims.window * policy.dims.features),
    }
}
