//! Analytic gradients against central finite differences.

use bisparse::attention::Mechanism;
use bisparse::gradcheck::{check_mechanism, check_model, TOLERANCE};

const SEEDS: u64 = 20;

#[test]
fn attention_mechanisms_match_finite_differences() {
    for m in Mechanism::ALL {
        for seed in 0..SEEDS {
            let r = check_mechanism(m, seed, None).unwrap();
            let skipped: usize = r.groups.iter().map(|g| g.skipped).sum();
            println!(
                "{} seed {seed}: max rel {:.2e}, skipped {skipped}",
                r.label,
                r.max_rel_error()
            );
            assert!(r.passed(), "{r:#?}");
            assert!(r.max_rel_error() < TOLERANCE);
        }
    }
}

#[test]
fn tiny_model_matches_finite_differences() {
    for m in Mechanism::ALL {
        for seed in 0..SEEDS {
            let r = check_model(m, seed, None).unwrap();
            let skipped: usize = r.groups.iter().map(|g| g.skipped).sum();
            println!(
                "{} seed {seed}: max rel {:.2e}, skipped {skipped}",
                r.label,
                r.max_rel_error()
            );
            assert!(r.passed(), "{r:#?}");
        }
    }
}
