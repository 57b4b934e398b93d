//! Property checks that span several modules.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mimic_core::curation::{rule_filter, RuleLimits};
use mimic_core::eval::{frame_errors, nearest_rank};
use mimic_core::motion::{
    generate_synthetic_dataset, goal_at, random_clip, to_heading_local, Category, DatasetSpec, MotionClip,
};
use mimic_core::nn::probe::{random_student_inputs, random_teacher_inputs, tiny_config, tiny_dims};
use mimic_core::nn::{gaussian_log_prob, MoePolicy, StudentPolicy, Tape, Tensor};
use mimic_core::sampler::{sampling_level, SamplerConfig, SamplerEntry, SamplerState};
use mimic_core::skeleton::Skeleton;
use mimic_core::train::dagger::distill_loss;
use mimic_core::train::ppo::{ppo_loss, PpoSamples};
use mimic_core::train::PpoConfig;

fn dataset(seed: u64, n: usize, seconds: [f64; 2]) -> Vec<MotionClip> {
    let mix = Category::ALL.iter().map(|&c| (c, 0.2)).collect();
    let mut spec = DatasetSpec::new(mix, n);
    spec.duration = seconds;
    generate_synthetic_dataset(&spec, &Skeleton::biped(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_clip_partitions_parent(seed in 0u64..1000, max_len in 0.5f64..4.0, max_offset in 0.0f64..2.0) {
        let clip = &dataset(seed, 1, [5.0, 9.0])[0];
        let parts = random_clip(clip, max_len, max_offset, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let last = clip.frames().len() - 1;
        let mut next = 0;
        for p in &parts {
            let span = p.source_span().unwrap();
            prop_assert_eq!(span.start_frame, next);
            prop_assert!(span.end_frame > span.start_frame);
            prop_assert!(p.duration() > 0.0 && p.duration() <= max_len + 1e-9);
            prop_assert_eq!(p.frames(), &clip.frames()[span.start_frame..=span.end_frame]);
            next = span.end_frame;
        }
        prop_assert_eq!(next, last);
    }

    #[test]
    fn heading_local_keeps_keybody_distances(seed in 0u64..1000, t in 0.0f64..4.0, heading in -3.2f64..3.2) {
        let clip = &dataset(seed, 1, [4.0, 5.0])[0];
        let frame = clip.frame_at(t).unwrap();
        let root = clip.root_position_at(t).unwrap();
        let local = to_heading_local(&frame, &root, heading);
        let (a, b) = (&frame.keybody_positions, &local.keybody_positions);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                prop_assert!((dist(&a[i], &a[j]) - dist(&b[i], &b[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn goal_window_has_fixed_length(seed in 0u64..1000, t in 0.0f64..10.0, window in 1usize..20) {
        let clip = &dataset(seed, 1, [1.0, 3.0])[0];
        let goal = goal_at(clip, t.min(clip.duration()), 10.0, window).unwrap();
        prop_assert_eq!(goal.future_window.len(), window);
    }

    #[test]
    fn sampling_level_is_bounded(events in prop::collection::vec((any::<bool>(), 0.0f64..1.0), 0..80)) {
        let mut entry = SamplerEntry::new("x");
        for (done, err) in events {
            entry.on_episode_end(done, err, 0.1);
            let s = sampling_level(&entry);
            prop_assert!((0.0..=10.0).contains(&s));
            if entry.completion_level <= 1.0 {
                prop_assert!(s <= 1.0);
            }
        }
    }

    #[test]
    fn sampler_probabilities_stay_normalized(events in prop::collection::vec((0usize..4, any::<bool>(), 0.0f64..0.8), 0..200)) {
        let ids = ["a", "b", "c", "d"];
        let mut state = SamplerState::new(SamplerConfig::default(), ids);
        for (i, done, err) in events {
            state.on_episode_end(ids[i], done, err);
            let total: f64 = state.probabilities().iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_mean_stays_in_expert_hull(seed in 0u64..10_000, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = MoePolicy::new(tiny_config(n, 5), tiny_dims(), &mut rng).unwrap();
        let out = policy.evaluate(&random_teacher_inputs(&policy.dims, 4, &mut rng)).unwrap();
        for r in 0..4 {
            prop_assert!((out.gate.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..policy.dims.joints {
                let vals: Vec<f64> = out.experts.iter().map(|e| e.at(r, j)).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo - 1e-12 <= out.mean.at(r, j) && out.mean.at(r, j) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn clipped_surrogate_is_bounded(seed in 0u64..10_000, clip in 0.05f64..0.4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = MoePolicy::new(tiny_config(2, 5), tiny_dims(), &mut rng).unwrap();
        let inputs = random_teacher_inputs(&policy.dims, 6, &mut rng);
        let eval = policy.evaluate(&inputs).unwrap();
        let mut actions = Vec::new();
        let mut old = Vec::new();
        for r in 0..6 {
            let (a, _) = policy.sample_action(eval.mean.row(r), &mut rng);
            old.push(gaussian_log_prob(&a, eval.mean.row(r), policy.log_std()) + rng.random_range(-2.0..2.0));
            actions.extend(a);
        }
        let advantages: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        for (k, adv) in advantages.iter().enumerate() {
            let samples = PpoSamples {
                inputs: inputs.select(&[k]),
                actions: Tensor::from_vec(1, policy.dims.joints, actions[k * 2..k * 2 + 2].to_vec()),
                old_log_probs: vec![old[k]],
                advantages: vec![*adv],
                value_targets: vec![0.0],
            };
            let config = PpoConfig { clip, value_coef: 0.0, entropy_coef: 0.0, ..PpoConfig::default() };
            let mut tape = Tape::new(&policy.store);
            let (_, diag) = ppo_loss(&mut tape, &policy, &samples, &config).unwrap();
            prop_assert!(-diag.policy_loss <= (1.0 + clip) * adv.abs() + 1e-12);
        }
    }

    #[test]
    fn distill_loss_is_zero_only_on_match(seed in 0u64..10_000, shift in 1e-6f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let student = StudentPolicy::new(tiny_config(1, 5), tiny_dims(), &mut rng).unwrap();
        let inputs = random_student_inputs(&student, 3, &mut rng);
        let own = student.evaluate(&inputs).unwrap();
        let loss = |labels: &Tensor| {
            let mut tape = Tape::new(&student.store);
            let l = distill_loss(&mut tape, &student, &inputs, labels).unwrap();
            tape.value(l).item()
        };
        prop_assert_eq!(loss(&own), 0.0);
        let mut moved = own.clone();
        let k = rng.random_range(0..moved.data.len());
        moved.data[k] += shift;
        prop_assert!(loss(&moved) > 0.0);
    }

    #[test]
    fn rule_filter_partitions_and_is_idempotent(seed in 0u64..1000, pitch in 0.05f64..1.5, vel in 2.0f64..40.0) {
        let clips = dataset(seed, 10, [1.0, 3.0]);
        let limits = RuleLimits { pitch_max: pitch, joint_vel_max: vel, ..RuleLimits::default() };
        let (kept, rejected) = rule_filter(&clips, &limits).unwrap();
        let all: BTreeSet<&str> = clips.iter().map(|c| c.id()).collect();
        let k: BTreeSet<&str> = kept.iter().map(|c| c.id()).collect();
        let r: BTreeSet<&str> = rejected.iter().map(|x| x.clip_id.as_str()).collect();
        prop_assert!(k.is_disjoint(&r));
        prop_assert_eq!(k.union(&r).copied().collect::<BTreeSet<_>>(), all);
        prop_assert!(rejected.iter().all(|x| !x.reason().is_empty()));
        let (again, none) = rule_filter(&kept, &limits).unwrap();
        prop_assert_eq!(again.len(), kept.len());
        prop_assert!(none.is_empty());
    }

    #[test]
    fn keybody_error_ignores_shared_rigid_motion(seed in 0u64..1000, t in 0.0f64..3.0, yaw in -3.2f64..3.2, dx in -5.0f64..5.0) {
        let clip = &dataset(seed, 1, [3.0, 4.0])[0];
        let a = clip.frame_at(t).unwrap();
        let b = clip.frame_at((t + 0.2).min(clip.duration())).unwrap();
        let moved = |f: &mimic_core::motion::MotionFrame| to_heading_local(f, &[dx, -dx, 0.3], yaw);
        let before = frame_errors(&a, &b).keybody;
        let after = frame_errors(&moved(&a), &moved(&b)).keybody;
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn percentiles_are_monotone(xs in prop::collection::vec(-1e3f64..1e3, 1..100), p in 0.0f64..100.0, q in 0.0f64..100.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(nearest_rank(&xs, lo) <= nearest_rank(&xs, hi));
    }
}
