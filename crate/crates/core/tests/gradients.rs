//! Backward passes of every head and loss against central differences on
//! ten seeds each.

use mimic_core::train::gradients::{gradient_case, GRADIENT_CASES};

#[test]
fn all_gradients_match_finite_differences() {
    for case in GRADIENT_CASES {
        for seed in 1..=10 {
            let g = gradient_case(case, seed, 1e-5).unwrap();
            assert!(g.max_relative_error < 1e-4, "{case} seed {seed}: {g:?}");
        }
    }
}
