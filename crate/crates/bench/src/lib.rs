//! Shared fixtures for the benchmarks.

use ddnm_core::denoiser::image_pattern_prior;
use ddnm_core::{gmm_sample, AnalyticGmm, DiffusionSchedule, LinearOperator, RestorationProblem, RngStream};

pub struct Fixture {
    pub denoiser: AnalyticGmm,
    pub schedule: DiffusionSchedule,
    pub problem: RestorationProblem,
}

/// Noise-free restoration of one `[3, side, side]` pattern image through `op`.
pub fn fixture(side: usize, op: impl FnOnce(&[usize]) -> LinearOperator) -> Fixture {
    let shape = [3, side, side];
    let prior = image_pattern_prior(&shape, 8, 0.05, 1).expect("valid prior");
    let truth = gmm_sample(&prior, &mut RngStream::new(2, 0));
    let op = op(&shape);
    let y = op.apply(&truth).expect("shapes match");
    Fixture {
        denoiser: AnalyticGmm::new(prior),
        schedule: DiffusionSchedule::default_linear(),
        problem: RestorationProblem::new(op, y, 0.0).expect("valid problem"),
    }
}
