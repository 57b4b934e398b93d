//! Finite-difference checks of every network head and training loss.
//!
//! Each case builds a tiny randomly initialized network with non-trivial
//! input statistics, records a scalar on the tape, and compares the backward
//! pass against central differences over every parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::gradcheck::{check_gradients, GradCheck};
use crate::nn::probe::{random_student_inputs, random_teacher_inputs, random_tensor, tiny_config, tiny_dims};
use crate::nn::{gaussian_log_prob, Gradients, MoePolicy, ParamStore, StudentPolicy, Tape, TeacherInputs, Tensor, Var};

use super::dagger::distill_loss;
use super::ppo::{ppo_loss, PpoConfig, PpoSamples};

/// Case names accepted by [`gradient_case`].
pub const GRADIENT_CASES: [&str; 10] = [
    "experts",
    "gating",
    "encoder",
    "critic",
    "student",
    "actor_mean",
    "ppo_surrogate",
    "ppo_value",
    "ppo_total",
    "distillation",
];

/// Below this magnitude differences are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-6;

const BATCH: usize = 5;

fn teacher(rng: &mut ChaCha8Rng) -> Result<(MoePolicy, TeacherInputs)> {
    let mut policy = MoePolicy::new(tiny_config(3, 6), tiny_dims(), rng)?;
    // Non-unit statistics so the input normalizer sits on the path.
    let mut warm = random_teacher_inputs(&policy.dims, 16, rng).flat();
    warm.data.iter_mut().for_each(|x| *x = 2.0 * *x + 0.3);
    policy.norm.update(&warm);
    // Spread the log-stds so each action dimension has its own scale.
    let id = policy.log_std;
    for v in policy.store.get_mut(id).data.iter_mut() {
        *v = rng.random_range(-1.0..0.0);
    }
    let inputs = random_teacher_inputs(&policy.dims, BATCH, rng);
    Ok((policy, inputs))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry carries weight.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Var {
    let r = tape.input(weights.clone());
    let p = tape.mul(out, r);
    tape.sum_all(p)
}

/// `loss` returns the scalar and its backward pass at the given parameters.
fn run<L>(store: &ParamStore, eps: f64, loss: L) -> Result<GradCheck>
where
    L: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss(store)?;
    check_gradients(store, &grads, eps, 1, GRADIENT_FLOOR, |p| loss(p).map(|(v, _)| v))
}

/// Teacher head selected by name, projected onto random weights.
fn head_case(head: &str, seed: u64, eps: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (policy, inputs) = teacher(&mut rng)?;
    let n = policy.n_experts();
    let j = policy.dims.joints;
    let shape = match head {
        "experts" => (BATCH * n, j),
        "gating" => (BATCH, n),
        "encoder" => (BATCH, policy.config.latent),
        "critic" => (BATCH, 1),
        _ => (BATCH, j),
    };
    let weights = random_tensor(&mut rng, shape.0, shape.1);
    run(&policy.store, eps, |store| {
        let mut tape = Tape::new(store);
        let out = policy.forward(&mut tape, &inputs)?;
        let target = match head {
            "experts" => {
                let mut total = None;
                for (i, &e) in out.experts.iter().enumerate() {
                    let w = weights.select_rows(&(i * BATCH..(i + 1) * BATCH).collect::<Vec<_>>());
                    let s = project(&mut tape, e, &w);
                    total = Some(match total {
                        None => s,
                        Some(t) => tape.add(t, s),
                    });
                }
                total.expect("at least one expert")
            }
            "gating" => project(&mut tape, out.gate, &weights),
            "encoder" => project(&mut tape, out.latent, &weights),
            "critic" => project(&mut tape, out.value, &weights),
            _ => project(&mut tape, out.mean, &weights),
        };
        let value = tape.value(target).item();
        Ok((value, tape.backward(target)?))
    })
}

fn student_case(seed: u64, eps: f64, distill: bool) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut student = StudentPolicy::new(tiny_config(1, 6), tiny_dims(), &mut rng)?;
    let mut warm = random_student_inputs(&student, 16, &mut rng).flat();
    warm.data.iter_mut().for_each(|x| *x = 1.5 * *x - 0.2);
    student.norm.update(&warm);
    let inputs = random_student_inputs(&student, BATCH, &mut rng);
    let weights = random_tensor(&mut rng, BATCH, student.dims.joints);
    run(&student.store, eps, |store| {
        let mut tape = Tape::new(store);
        let target = if distill {
            distill_loss(&mut tape, &student, &inputs, &weights)?
        } else {
            let a = student.forward(&mut tape, &inputs)?;
            project(&mut tape, a, &weights)
        };
        let value = tape.value(target).item();
        Ok((value, tape.backward(target)?))
    })
}

/// PPO loss with coefficients chosen to isolate one term. Old log-probs are
/// offset from the current ones so ratios land both inside and outside the
/// clip range.
fn ppo_case(case: &str, seed: u64, eps: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (policy, inputs) = teacher(&mut rng)?;
    let eval = policy.evaluate(&inputs)?;
    let j = policy.dims.joints;
    let mut actions = Vec::with_capacity(BATCH * j);
    let mut old = Vec::with_capacity(BATCH);
    for r in 0..BATCH {
        let (a, _) = policy.sample_action(eval.mean.row(r), &mut rng);
        let lp = gaussian_log_prob(&a, eval.mean.row(r), policy.log_std());
        old.push(lp + rng.random_range(-0.5..0.5));
        actions.extend(a);
    }
    let mut config = PpoConfig {
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut advantages: Vec<f64> = (0..BATCH).map(|_| rng.random_range(-1.5..1.5)).collect();
    match case {
        "ppo_surrogate" => config.value_coef = 0.0,
        "ppo_value" => {
            config.value_coef = 1.0;
            advantages.iter_mut().for_each(|a| *a = 0.0);
        }
        _ => config.entropy_coef = 0.01,
    }
    let samples = PpoSamples {
        inputs,
        actions: Tensor::from_vec(BATCH, j, actions),
        old_log_probs: old,
        advantages,
        value_targets: (0..BATCH).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    run(&policy.store, eps, |store| {
        let mut tape = Tape::new(store);
        let (loss, _) = ppo_loss(&mut tape, &policy, &samples, &config)?;
        let value = tape.value(loss).item();
        Ok((value, tape.backward(loss)?))
    })
}

/// Check one named case at one seed with central step `eps`.
pub fn gradient_case(case: &str, seed: u64, eps: f64) -> Result<GradCheck> {
    match case {
        "experts" | "gating" | "encoder" | "critic" | "actor_mean" => head_case(case, seed, eps),
        "student" => student_case(seed, eps, false),
        "distillation" => student_case(seed, eps, true),
        "ppo_surrogate" | "ppo_value" | "ppo_total" => ppo_case(case, seed, eps),
        other => Err(Error::Config(format!("unknown gradient case `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_one_seed() {
        for case in GRADIENT_CASES {
            let g = gradient_case(case, 0, 1e-5).unwrap();
            assert!(g.checked > 50, "{case}: {g:?}");
            assert!(g.max_relative_error < 1e-4, "{case}: {g:?}");
        }
    }

    #[test]
    fn unknown_case_is_rejected() {
        assert!(gradient_case("nope", 0, 1e-5).is_err());
    }
}
