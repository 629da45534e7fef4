//! End-to-end finite-difference check of every trainable tensor.

mod common;

use std::time::Instant;

use common::*;
use msdccl::model::Ablation;

#[test]
fn full_model_gradients_match_finite_differences() {
    let start = Instant::now();
    let errors = gradient_errors(&grad_problem(grad_config()));
    for (name, err) in &errors {
        println!("{name:<40} max rel err {err:.2e}");
    }
    let seconds = start.elapsed().as_secs_f64();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    println!("worst {worst:.2e} in {seconds:.1}s");
    assert!(worst < GRAD_MAX_REL_ERR, "max relative error {worst:.3e}");
    assert!(
        seconds < GRAD_MAX_SECONDS,
        "gradient check took {seconds:.1}s"
    );
}

#[test]
fn soft_path_only_gradients_match() {
    let config = msdccl::model::ModelConfig {
        ablation: Ablation {
            no_dl: true,
            ..Default::default()
        },
        ..grad_config()
    };
    let errors = gradient_errors(&grad_problem(config));
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    assert!(worst < GRAD_MAX_REL_ERR, "max relative error {worst:.3e}");
}
