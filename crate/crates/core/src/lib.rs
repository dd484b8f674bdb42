//! Diffusion restoration of linear inverse problems by range-null space decomposition.
//!
//! A sampler alternates a denoiser step with a rectification that replaces the
//! range-space component of the clean estimate by `A†y`, so every estimate satisfies
//! `A x = y` exactly when the observation is noise-free.

pub mod baselines;
pub mod denoiser;
pub mod error;
pub mod io;
pub mod linop;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod svdnoise;
pub mod tensor;
pub mod tiling;

pub use baselines::{run_ddpm_uncond, run_ddrm, run_ddrm_hooked, run_ilvr, run_repaint, RepaintParams};
pub use denoiser::{
    gmm_posterior_x0, gmm_sample, mc_posterior_x0, AnalyticGmm, Denoiser, ExternalDenoiser, FnDenoiser, GmmPrior,
};
pub use error::{Error, Result};
pub use linop::{
    build_from_text, build_operator, svd_of, verify_pinv, LinearOperator, Matrix, OperatorSpec, PinvKind, PinvReport,
    SvdFactors, Window,
};
pub use metrics::{consistency, psnr, ssim};
pub use rng::{gaussian_sample, RngStream};
pub use sampler::{
    estimate_x0, rectify, rectify_scaled, run_ddnm, run_ddnm_hooked, run_ddnm_plus, run_ddnm_plus_hooked,
    simple_lambda_gamma, time_travel_plan, Mode, NoiseScalingSimple, PlanStep, RestorationProblem, SamplerParams,
    StepHook, TimeTravelParams,
};
pub use schedule::{DiffusionSchedule, Transition};
pub use svdnoise::{rectify_spectral, Branch, SpectralScaling};
pub use tensor::Tensor;
pub use tiling::{plan_tiles, run_mask_shift, run_mask_shift_traced, MaskShiftOutput, PadMode, Segment, TilePlan};
