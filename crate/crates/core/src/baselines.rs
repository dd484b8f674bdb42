//! Reference samplers for comparison: unconditional DDPM, RePaint, ILVR and DDRM.
//!
//! All share the DDNM step helpers, so a chain that never touches its state beyond the
//! denoiser step draws the same numbers as DDNM under the same seed.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::linop::{LinearOperator, SvdFactors};
use crate::rng::{gaussian_sample, RngStream};
use crate::sampler::{
    ddim_update, ddpm_update, predict, x0_from_noise, Mode, RestorationProblem, SamplerParams, StepHook,
};
use crate::schedule::DiffusionSchedule;
use crate::svdnoise::effective_singulars;
use crate::tensor::Tensor;

/// Ancestral sampling without any conditioning.
pub fn run_ddpm_uncond(
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    shape: &[usize],
) -> Result<Tensor> {
    params.validate(schedule)?;
    let grid = schedule.time_grid(params.steps)?;
    let mut rng = RngStream::new(params.seed, 0);
    let mut x = gaussian_sample(&mut rng, shape)?;
    for j in (1..grid.len()).rev() {
        let (t, prev) = (grid[j], grid[j - 1]);
        let eps = predict(schedule, denoiser, &x, t)?;
        let x0 = x0_from_noise(schedule, &x, &eps, t)?;
        x = match params.mode {
            Mode::Ddpm => {
                let tr = schedule.transition(t, prev)?;
                ddpm_update(tr, &x, &x0, tr.var, &mut rng)?
            }
            Mode::Ddim => {
                let ab_prev = schedule.alpha_bar(prev);
                ddim_update(ab_prev, 1.0 - ab_prev, &x0, &eps, params.eta, &mut rng)?
            }
        };
    }
    Ok(x)
}

/// Resampling counts `S_t`, indexed by position on the time grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RepaintParams {
    counts: Vec<usize>,
}

impl RepaintParams {
    pub fn constant(count: usize) -> Result<Self> {
        Self::per_step(vec![count])
    }

    /// `counts[j - 1]` applies to grid index `j`; the last entry repeats.
    pub fn per_step(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::InvalidParameter("resample counts must be at least 1".into()));
        }
        Ok(Self { counts })
    }

    pub fn count_at(&self, j: usize) -> usize {
        let i = j.saturating_sub(1).min(self.counts.len() - 1);
        self.counts[i]
    }
}

fn require_ddpm(params: &SamplerParams, method: &str) -> Result<()> {
    if params.mode != Mode::Ddpm {
        return Err(Error::Incompatible(format!("{method} runs in ddpm mode only")));
    }
    Ok(())
}

/// Noised reference `sqrt(ᾱ) v + sqrt(1-ᾱ) ε` at grid time `prev`; exact at `prev = 0`.
fn noised(schedule: &DiffusionSchedule, v: &Tensor, prev: usize, rng: &mut RngStream) -> Result<Tensor> {
    if prev == 0 {
        return Ok(v.clone());
    }
    let ab = schedule.alpha_bar(prev);
    let eps = gaussian_sample(rng, v.shape())?;
    v.lincomb(ab.sqrt(), &eps, (1.0 - ab).sqrt())
}

/// Inpainting by pasting the noised known pixels into every state. `y` is the masked
/// image; the resampling jumps use fresh noise.
pub fn run_repaint(
    y: &Tensor,
    mask: &LinearOperator,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    rp: &RepaintParams,
) -> Result<Tensor> {
    if !mask.is_mask() {
        return Err(Error::Incompatible("RePaint needs a mask operator".into()));
    }
    require_ddpm(params, "RePaint")?;
    params.validate(schedule)?;
    y.check_len(mask.out_dim(), "observation vs operator output")?;
    let grid = schedule.time_grid(params.steps)?;
    let mut rng = RngStream::new(params.seed, 0);
    let mut ref_rng = rng.child(1);
    let mut x = gaussian_sample(&mut rng, mask.in_shape())?;
    for j in (1..grid.len()).rev() {
        let (t, prev) = (grid[j], grid[j - 1]);
        let tr = schedule.transition(t, prev)?;
        let rounds = rp.count_at(j);
        for u in 1..=rounds {
            let eps = predict(schedule, denoiser, &x, t)?;
            let x0 = x0_from_noise(schedule, &x, &eps, t)?;
            let stepped = ddpm_update(tr, &x, &x0, tr.var, &mut rng)?;
            let known = noised(schedule, y, prev, &mut ref_rng)?;
            let pasted = mask.pinv_apply(&known)?.add(&mask.null_project(&stepped)?)?;
            if u < rounds {
                let (k, sd) = schedule.jump(prev, t)?;
                let z = gaussian_sample(&mut rng, pasted.shape())?;
                x = pasted.lincomb(k, &z, sd)?;
            } else {
                x = pasted;
            }
        }
    }
    Ok(x)
}

/// Guidance by replacing the low-pass content `A x_prev` with that of the noised
/// reference. `filter` must be square.
pub fn run_ilvr(
    x_ref: &Tensor,
    filter: &LinearOperator,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
) -> Result<Tensor> {
    if !filter.is_square() {
        return Err(Error::Incompatible(format!(
            "ILVR needs a square filter, got {}x{}",
            filter.out_dim(),
            filter.in_dim()
        )));
    }
    require_ddpm(params, "ILVR")?;
    params.validate(schedule)?;
    x_ref.check_len(filter.in_dim(), "reference vs filter")?;
    let grid = schedule.time_grid(params.steps)?;
    let mut rng = RngStream::new(params.seed, 0);
    let mut ref_rng = rng.child(1);
    let mut x = gaussian_sample(&mut rng, filter.in_shape())?;
    for j in (1..grid.len()).rev() {
        let (t, prev) = (grid[j], grid[j - 1]);
        let tr = schedule.transition(t, prev)?;
        let eps = predict(schedule, denoiser, &x, t)?;
        let x0 = x0_from_noise(schedule, &x, &eps, t)?;
        let stepped = ddpm_update(tr, &x, &x0, tr.var, &mut rng)?;
        let low = filter.apply(&noised(schedule, x_ref, prev, &mut ref_rng)?)?;
        let high = stepped.sub(&filter.apply(&stepped)?)?;
        x = low.reshape(stepped.shape())?.add(&high)?;
    }
    Ok(x)
}

/// DDRM in the spectral domain of `A = U Σ Vᵀ`.
///
/// The variance-preserving chain is mapped to DDRM's variance-exploding one by
/// `σ_t = sqrt((1-ᾱ_t)/ᾱ_t)` and `x̄ = Vᵀ x / sqrt(ᾱ_t)`.
pub fn run_ddrm(
    problem: &RestorationProblem,
    factors: &SvdFactors,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
) -> Result<Tensor> {
    run_ddrm_hooked(problem, factors, denoiser, schedule, params, &mut ())
}

/// As [`run_ddrm`]; the hook sees every estimate `x₀|t` (its `rectified` method is
/// not called).
pub fn run_ddrm_hooked(
    problem: &RestorationProblem,
    factors: &SvdFactors,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    hook: &mut dyn StepHook,
) -> Result<Tensor> {
    problem.validate()?;
    params.validate(schedule)?;
    let op = &problem.op;
    if factors.in_dim() != op.in_dim() || factors.out_dim() != op.out_dim() {
        return Err(Error::Incompatible(format!(
            "SVD basis is {}x{} but the operator is {}x{}",
            factors.out_dim(),
            factors.in_dim(),
            op.out_dim(),
            op.in_dim()
        )));
    }
    let sigma_y = problem.sigma_y;
    let eta = params.eta;
    let keep = (1.0 - eta * eta).sqrt();
    let singulars = effective_singulars(factors);
    let dim = factors.in_dim();
    let ut_y = factors.u.mul_vec_transposed(problem.y.as_slice());
    let y_bar: Vec<f64> = (0..dim)
        .map(|i| {
            if singulars[i] > 0.0 {
                ut_y[i] / singulars[i]
            } else {
                0.0
            }
        })
        .collect();
    let ve_sigma = |ab: f64| ((1.0 - ab) / ab).sqrt();

    let grid = schedule.time_grid(params.steps)?;
    let mut rng = RngStream::new(params.seed, 0);
    let mut x = gaussian_sample(&mut rng, op.in_shape())?;
    for j in (1..grid.len()).rev() {
        let (t, prev) = (grid[j], grid[j - 1]);
        let eps = predict(schedule, denoiser, &x, t)?;
        let x0 = x0_from_noise(schedule, &x, &eps, t)?;
        hook.estimated(t, &x0)?;
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(prev));
        let (sig, sig_prev) = (ve_sigma(ab), ve_sigma(ab_prev));
        let x0_bar = factors.v.mul_vec_transposed(x0.as_slice());
        let xt_bar = factors.v.mul_vec_transposed(&x.scale(1.0 / ab.sqrt()).into_vec());
        let mut z = vec![0.0; dim];
        if prev > 0 {
            rng.fill_normal(&mut z);
        }
        let next: Vec<f64> = (0..dim)
            .map(|i| {
                let s = singulars[i];
                if s == 0.0 {
                    x0_bar[i] + keep * sig_prev * (xt_bar[i] - x0_bar[i]) / sig + eta * sig_prev * z[i]
                } else if sig_prev * s < sigma_y {
                    let obs = sigma_y / s;
                    x0_bar[i] + keep * sig_prev * (y_bar[i] - x0_bar[i]) / obs + eta * sig_prev * z[i]
                } else {
                    let obs = sigma_y / s;
                    y_bar[i] + (sig_prev * sig_prev - obs * obs).max(0.0).sqrt() * z[i]
                }
            })
            .collect();
        let back = factors.v.mul_vec(&next);
        x = Tensor::new(back, op.in_shape().to_vec())?.scale(ab_prev.sqrt());
    }
    Ok(x)
}
