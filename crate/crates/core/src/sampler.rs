//! DDNM and DDNM⁺ reverse loops.
//!
//! Each step estimates `x₀|t` from the denoiser, rectifies it against the observation,
//! and samples the next state. DDNM⁺ damps the rectification and the injected noise
//! when `y` is noisy, and may revisit earlier times (time travel).

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::linop::{LinearOperator, SvdFactors};
use crate::rng::{gaussian_sample, RngStream};
use crate::schedule::{DiffusionSchedule, Transition};
use crate::svdnoise::{self, SpectralScaling};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    /// Ancestral sampling from the posterior `q(x_prev | x_t, x̂₀)`.
    #[default]
    Ddpm,
    /// `x_prev = sqrt(ᾱ_prev) x̂₀ + σ sqrt(1-η²) ε_pred + σ η z` with `σ² = 1 - ᾱ_prev`.
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerParams {
    pub steps: usize,
    pub eta: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl SamplerParams {
    pub fn ddpm(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            eta: 1.0,
            mode: Mode::Ddpm,
            seed,
        }
    }

    pub fn ddim(steps: usize, eta: f64, seed: u64) -> Self {
        Self {
            steps,
            eta,
            mode: Mode::Ddim,
            seed,
        }
    }

    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if !(1..=schedule.steps()).contains(&self.steps) {
            return Err(Error::InvalidParameter(format!(
                "sampling steps {} outside 1..={}",
                self.steps,
                schedule.steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidParameter(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Time-travel settings: jump `l` grid steps back every `s` descents, `r` times.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeTravelParams {
    l: usize,
    s: usize,
    r: usize,
}

impl TimeTravelParams {
    pub fn new(l: usize, s: usize, r: usize) -> Result<Self> {
        if s == 0 || r == 0 {
            return Err(Error::InvalidParameter(format!(
                "time-travel interval and repeats must be at least 1, got s={s} r={r}"
            )));
        }
        Ok(Self { l, s, r })
    }

    /// No time travel.
    pub fn none() -> Self {
        Self { l: 0, s: 1, r: 1 }
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn r(&self) -> usize {
        self.r
    }
}

impl Default for TimeTravelParams {
    fn default() -> Self {
        Self::none()
    }
}

/// `y = A x + n` with `n ~ N(0, σ_y² I)`.
#[derive(Clone, Debug)]
pub struct RestorationProblem {
    pub op: LinearOperator,
    pub y: Tensor,
    pub sigma_y: f64,
}

impl RestorationProblem {
    pub fn new(op: LinearOperator, y: Tensor, sigma_y: f64) -> Result<Self> {
        let p = Self { op, y, sigma_y };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.y.check_len(self.op.out_dim(), "observation vs operator output")?;
        if !(self.sigma_y >= 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_y {} must be finite and nonnegative",
                self.sigma_y
            )));
        }
        Ok(())
    }
}

/// One action of a sampling plan. Indices refer to positions on the time grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanStep {
    /// Reverse step from grid index `j` to `j - 1`.
    Descend(usize),
    /// Forward jump `q(x_to | x_from)`.
    Renoise { from: usize, to: usize },
}

/// Plan over grid indices `steps..=1`.
pub fn time_travel_plan(steps: usize, tt: &TimeTravelParams) -> Vec<PlanStep> {
    let mut plan = Vec::new();
    for j in (1..=steps).rev() {
        let k = steps - j;
        if tt.l > 0 && k > 0 && k % tt.s == 0 {
            let jump = k.min(tt.l);
            for _ in 0..tt.r {
                plan.push(PlanStep::Renoise { from: j, to: j + jump });
                plan.extend((j + 1..=j + jump).rev().map(PlanStep::Descend));
            }
        }
        plan.push(PlanStep::Descend(j));
    }
    plan
}

/// Number of denoiser calls in a plan.
pub fn plan_cost(plan: &[PlanStep]) -> usize {
    plan.iter().filter(|s| matches!(s, PlanStep::Descend(_))).count()
}

/// `(x_t - sqrt(1-ᾱ_t) ε) / sqrt(ᾱ_t)`
pub fn x0_from_noise(schedule: &DiffusionSchedule, x_t: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    schedule.check_index(t)?;
    let ab = schedule.alpha_bar(t);
    let (sab, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.zip(eps, |x, e| (x - s1 * e) / sab)
}

pub fn estimate_x0(schedule: &DiffusionSchedule, denoiser: &dyn Denoiser, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let eps = predict(schedule, denoiser, x_t, t)?;
    x0_from_noise(schedule, x_t, &eps, t)
}

pub(crate) fn predict(schedule: &DiffusionSchedule, denoiser: &dyn Denoiser, x_t: &Tensor, t: usize) -> Result<Tensor> {
    let eps = denoiser.predict_noise(schedule, x_t, t)?;
    eps.check_len(x_t.len(), "denoiser output")?;
    if let Some(i) = eps.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(eps)
}

/// `A†y + (I - A†A) x0t`
pub fn rectify(op: &LinearOperator, x0t: &Tensor, y: &Tensor) -> Result<Tensor> {
    rectify_with(op, &op.pinv_apply(y)?, x0t)
}

fn rectify_with(op: &LinearOperator, pinv_y: &Tensor, x0t: &Tensor) -> Result<Tensor> {
    pinv_y.add(&op.null_project(x0t)?)
}

/// `x0t - λ A†(A x0t - y)` for `λ ∈ (0, 1]`.
pub fn rectify_scaled(op: &LinearOperator, x0t: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidParameter(format!("lambda {lambda} outside (0, 1]")));
    }
    damped_rectify(op, &op.pinv_apply(y)?, x0t, y, lambda)
}

fn damped_rectify(op: &LinearOperator, pinv_y: &Tensor, x0t: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda == 1.0 {
        return rectify_with(op, pinv_y, x0t);
    }
    if lambda == 0.0 {
        return Ok(x0t.clone());
    }
    let residual = op.apply(x0t)?.sub(y)?;
    x0t.lincomb(1.0, &op.pinv_apply(&residual)?, -lambda)
}

/// Scalar range-space damping `λ` and the variance `γ` of the added noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScalingSimple {
    pub lambda: f64,
    pub gamma: f64,
}

/// Scalar DDPM scaling for the single step `t -> t-1`.
pub fn simple_lambda_gamma(schedule: &DiffusionSchedule, t: usize, sigma_y: f64) -> Result<NoiseScalingSimple> {
    check_sigma_y(sigma_y)?;
    Ok(scalar_scaling_ddpm(schedule.posterior_coeffs(t)?, sigma_y))
}

pub(crate) fn check_sigma_y(sigma_y: f64) -> Result<()> {
    if sigma_y >= 0.0 && sigma_y.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "sigma_y {sigma_y} must be finite and nonnegative"
        )))
    }
}

/// `λ = 1` while the posterior noise budget covers the `y` noise carried by `a x̂₀`,
/// otherwise `λ = σ / (a σ_y)`; `γ` is the remaining variance.
pub fn scalar_scaling_ddpm(tr: Transition, sigma_y: f64) -> NoiseScalingSimple {
    scalar_rule(tr.a, tr.var, sigma_y)
}

/// DDIM analogue with `a = sqrt(ᾱ_prev)` and budget `1 - ᾱ_prev`.
pub fn scalar_scaling_ddim(alpha_bar_prev: f64, sigma_y: f64) -> NoiseScalingSimple {
    scalar_rule(alpha_bar_prev.sqrt(), 1.0 - alpha_bar_prev, sigma_y)
}

fn scalar_rule(a: f64, var: f64, sigma_y: f64) -> NoiseScalingSimple {
    let sigma = var.sqrt();
    let carried = a * sigma_y;
    if sigma_y == 0.0 || sigma >= carried {
        NoiseScalingSimple {
            lambda: 1.0,
            gamma: (var - carried * carried).max(0.0),
        }
    } else {
        NoiseScalingSimple {
            lambda: sigma / carried,
            gamma: 0.0,
        }
    }
}

/// `a_t x̂₀ + b_t x_t + sqrt(φ) ε` for the single step `t -> t-1`.
pub fn ddpm_step(
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    x0hat: &Tensor,
    t: usize,
    phi: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    if !(phi >= 0.0 && phi.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise variance {phi} must be nonnegative"
        )));
    }
    ddpm_update(schedule.posterior_coeffs(t)?, x_t, x0hat, phi, rng)
}

pub(crate) fn ddpm_update(
    tr: Transition,
    x_t: &Tensor,
    x0hat: &Tensor,
    phi: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let mean = x0hat.lincomb(tr.a, x_t, tr.b)?;
    if phi > 0.0 {
        let z = gaussian_sample(rng, x_t.shape())?;
        mean.lincomb(1.0, &z, phi.sqrt())
    } else {
        Ok(mean)
    }
}

/// DDIM step `t -> t-1`; no draws when `η = 0`.
pub fn ddim_step(
    schedule: &DiffusionSchedule,
    x0hat: &Tensor,
    eps_t: &Tensor,
    t: usize,
    eta: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    schedule.check_index(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!("eta {eta} outside [0, 1]")));
    }
    let ab_prev = schedule.alpha_bar(t - 1);
    ddim_update(ab_prev, 1.0 - ab_prev, x0hat, eps_t, eta, rng)
}

/// `sqrt(ᾱ_prev) x̂₀ + sqrt(var) (sqrt(1-η²) ε + η z)`
pub(crate) fn ddim_update(
    alpha_bar_prev: f64,
    var: f64,
    x0hat: &Tensor,
    eps: &Tensor,
    eta: f64,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let c = alpha_bar_prev.sqrt();
    if var <= 0.0 {
        return Ok(x0hat.scale(c));
    }
    let sd = var.sqrt();
    let keep = (1.0 - eta * eta).sqrt();
    let mut noise = eps.scale(keep);
    if eta > 0.0 {
        let z = gaussian_sample(rng, eps.shape())?;
        noise = noise.lincomb(1.0, &z, eta)?;
    }
    x0hat.lincomb(c, &noise, sd)
}

/// Observes each step of a chain.
pub trait StepHook {
    /// Called with the raw estimate `x₀|t` before rectification.
    fn estimated(&mut self, _t: usize, _x0t: &Tensor) -> Result<()> {
        Ok(())
    }

    /// Called with the rectified estimate, which the hook may overwrite.
    fn rectified(&mut self, _t: usize, _x0hat: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

impl StepHook for () {}

/// Algorithm 1 of DDNM: plain rectification and the unmodified posterior noise.
pub fn run_ddnm(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
) -> Result<Tensor> {
    run_ddnm_hooked(problem, denoiser, schedule, params, &mut ())
}

pub fn run_ddnm_hooked(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    hook: &mut dyn StepHook,
) -> Result<Tensor> {
    run_ddnm_stream(
        problem,
        denoiser,
        schedule,
        params,
        RngStream::new(params.seed, 0),
        hook,
    )
}

/// DDNM drawing from `rng` instead of the stream named by `params.seed`.
pub(crate) fn run_ddnm_stream(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    rng: RngStream,
    hook: &mut dyn StepHook,
) -> Result<Tensor> {
    let plan = time_travel_plan(params.steps, &TimeTravelParams::none());
    run_chain(problem, denoiser, schedule, params, &plan, Scaling::Plain, rng, hook)
}

/// DDNM⁺: damped rectification, scaled noise and time travel. With `spectral` the
/// damping is per singular direction of `A`, otherwise a single scalar.
pub fn run_ddnm_plus(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    tt: &TimeTravelParams,
    spectral: Option<&SvdFactors>,
) -> Result<Tensor> {
    run_ddnm_plus_hooked(problem, denoiser, schedule, params, tt, spectral, &mut ())
}

pub fn run_ddnm_plus_hooked(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    tt: &TimeTravelParams,
    spectral: Option<&SvdFactors>,
    hook: &mut dyn StepHook,
) -> Result<Tensor> {
    let plan = time_travel_plan(params.steps, tt);
    let scaling = match spectral {
        Some(f) => {
            if f.in_dim() != problem.op.in_dim() || f.out_dim() != problem.op.out_dim() {
                return Err(Error::Incompatible(format!(
                    "SVD basis is {}x{} but the operator is {}x{}",
                    f.out_dim(),
                    f.in_dim(),
                    problem.op.out_dim(),
                    problem.op.in_dim()
                )));
            }
            Scaling::Spectral(f, svdnoise::effective_singulars(f))
        }
        None => Scaling::Scalar,
    };
    run_chain(
        problem,
        denoiser,
        schedule,
        params,
        &plan,
        scaling,
        RngStream::new(params.seed, 0),
        hook,
    )
}

enum Scaling<'a> {
    Plain,
    Scalar,
    Spectral(&'a SvdFactors, Vec<f64>),
}

#[allow(clippy::too_many_arguments)]
fn run_chain(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    plan: &[PlanStep],
    scaling: Scaling<'_>,
    mut rng: RngStream,
    hook: &mut dyn StepHook,
) -> Result<Tensor> {
    problem.validate()?;
    params.validate(schedule)?;
    let grid = schedule.time_grid(params.steps)?;
    let op = &problem.op;
    let pinv_y = op.pinv_apply(&problem.y)?;
    let mut x = gaussian_sample(&mut rng, op.in_shape())?;

    for step in plan {
        match *step {
            PlanStep::Renoise { from, to } => {
                let (k, sd) = schedule.jump(grid[from], grid[to])?;
                let z = gaussian_sample(&mut rng, x.shape())?;
                x = x.lincomb(k, &z, sd)?;
            }
            PlanStep::Descend(j) => {
                let (t, prev) = (grid[j], grid[j - 1]);
                let eps = predict(schedule, denoiser, &x, t)?;
                let x0t = x0_from_noise(schedule, &x, &eps, t)?;
                hook.estimated(t, &x0t)?;
                let ctx = StepCtx {
                    problem,
                    pinv_y: &pinv_y,
                    x0t: &x0t,
                    eps: &eps,
                    t,
                    hook: &mut *hook,
                };
                x = match params.mode {
                    Mode::Ddpm => {
                        let tr = schedule.transition(t, prev)?;
                        descend_ddpm(ctx, &x, tr, &scaling, &mut rng)?
                    }
                    Mode::Ddim => {
                        let ab_prev = schedule.alpha_bar(prev);
                        descend_ddim(ctx, ab_prev, params.eta, &scaling, &mut rng)?
                    }
                };
            }
        }
    }
    Ok(x)
}

struct StepCtx<'a> {
    problem: &'a RestorationProblem,
    pinv_y: &'a Tensor,
    x0t: &'a Tensor,
    eps: &'a Tensor,
    t: usize,
    hook: &'a mut dyn StepHook,
}

impl StepCtx<'_> {
    fn damped(&mut self, lambda: f64) -> Result<Tensor> {
        let p = self.problem;
        let mut x0hat = damped_rectify(&p.op, self.pinv_y, self.x0t, &p.y, lambda)?;
        self.hook.rectified(self.t, &mut x0hat)?;
        Ok(x0hat)
    }

    fn spectral(&mut self, f: &SvdFactors, sc: &SpectralScaling) -> Result<Tensor> {
        let p = self.problem;
        let mut x0hat = svdnoise::rectify_spectral(f, self.x0t, &p.y, sc, &p.op)?;
        self.hook.rectified(self.t, &mut x0hat)?;
        Ok(x0hat)
    }
}

fn descend_ddpm(
    mut ctx: StepCtx<'_>,
    x_t: &Tensor,
    tr: Transition,
    scaling: &Scaling<'_>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let sigma_y = ctx.problem.sigma_y;
    match scaling {
        Scaling::Plain => {
            let x0hat = ctx.damped(1.0)?;
            ddpm_update(tr, x_t, &x0hat, tr.var, rng)
        }
        Scaling::Scalar => {
            let sc = scalar_scaling_ddpm(tr, sigma_y);
            let x0hat = ctx.damped(sc.lambda)?;
            ddpm_update(tr, x_t, &x0hat, sc.gamma, rng)
        }
        Scaling::Spectral(f, singulars) => {
            let sc = svdnoise::ddpm_scaling(tr, sigma_y, singulars);
            let x0hat = ctx.spectral(f, &sc)?;
            let mean = ddpm_update(tr, x_t, &x0hat, 0.0, rng)?;
            match svdnoise::sample_spectral_noise_ddpm(f, &sc, rng)? {
                Some(noise) => mean.add(&noise),
                None => Ok(mean),
            }
        }
    }
}

fn descend_ddim(
    mut ctx: StepCtx<'_>,
    ab_prev: f64,
    eta: f64,
    scaling: &Scaling<'_>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let sigma_y = ctx.problem.sigma_y;
    let eps = ctx.eps;
    match scaling {
        Scaling::Plain => {
            let x0hat = ctx.damped(1.0)?;
            ddim_update(ab_prev, 1.0 - ab_prev, &x0hat, eps, eta, rng)
        }
        Scaling::Scalar => {
            let sc = scalar_scaling_ddim(ab_prev, sigma_y);
            let x0hat = ctx.damped(sc.lambda)?;
            ddim_update(ab_prev, sc.gamma, &x0hat, eps, eta, rng)
        }
        Scaling::Spectral(f, singulars) => {
            let sc = svdnoise::ddim_scaling(ab_prev, sigma_y, eta, singulars);
            let x0hat = ctx.spectral(f, &sc)?;
            let noise = svdnoise::sample_spectral_noise_ddim(f, &sc, eps, rng)?;
            x0hat.lincomb(ab_prev.sqrt(), &noise, 1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{image_pattern_prior, AnalyticGmm, FnDenoiser, GmmPrior};
    use crate::linop::build_from_text;
    use proptest::prelude::*;

    fn bits(t: &Tensor) -> Vec<u64> {
        t.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn plan_golden() {
        use PlanStep::*;
        let tt = TimeTravelParams::new(2, 2, 1).unwrap();
        let plan = time_travel_plan(4, &tt);
        assert_eq!(
            plan,
            vec![
                Descend(4),
                Descend(3),
                Renoise { from: 2, to: 4 },
                Descend(4),
                Descend(3),
                Descend(2),
                Descend(1)
            ]
        );
        assert_eq!(plan, time_travel_plan(4, &tt));
    }

    #[test]
    fn plan_without_travel_is_plain_descent() {
        let tt = TimeTravelParams::new(0, 3, 5).unwrap();
        let plan = time_travel_plan(5, &tt);
        assert_eq!(plan, (1..=5).rev().map(PlanStep::Descend).collect::<Vec<_>>());
    }

    #[test]
    fn repeats_multiply_renoise_events() {
        let count = |r| {
            let tt = TimeTravelParams::new(3, 2, r).unwrap();
            time_travel_plan(20, &tt)
                .iter()
                .filter(|s| matches!(s, PlanStep::Renoise { .. }))
                .count()
        };
        assert_eq!(count(2), 2 * count(1));
        assert!(count(1) > 0);
    }

    #[test]
    fn plan_descends_every_index_and_stays_in_grid() {
        let tt = TimeTravelParams::new(20, 20, 3).unwrap();
        let plan = time_travel_plan(250, &tt);
        let mut seen = vec![false; 251];
        let mut level = 250usize;
        for s in &plan {
            match *s {
                PlanStep::Descend(j) => {
                    assert_eq!(j, level);
                    seen[j] = true;
                    level -= 1;
                }
                PlanStep::Renoise { from, to } => {
                    assert_eq!(from, level);
                    assert!(to <= 250 && to - from <= 20);
                    level = to;
                }
            }
        }
        assert_eq!(level, 0);
        assert!(seen[1..].iter().all(|&b| b));
    }

    #[test]
    fn bad_time_travel_params() {
        assert!(TimeTravelParams::new(1, 0, 1).is_err());
        assert!(TimeTravelParams::new(1, 1, 0).is_err());
    }

    #[test]
    fn estimate_inverts_forward_sample() {
        let s = DiffusionSchedule::default_linear();
        let x0 = Tensor::from_vec(vec![0.3, -1.2, 2.0]).unwrap();
        let eps = Tensor::from_vec(vec![0.5, 0.1, -0.7]).unwrap();
        let xt = s.forward_sample(&x0, 400, &eps).unwrap();
        let e2 = eps.clone();
        let oracle = FnDenoiser(move |_: &DiffusionSchedule, _: &Tensor, _| Ok(e2.clone()));
        let back = estimate_x0(&s, &oracle, &xt, 400).unwrap();
        for (a, b) in back.as_slice().iter().zip(x0.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = FnDenoiser(|_: &DiffusionSchedule, x: &Tensor, _| Tensor::zeros(x.shape()));
        let est = estimate_x0(&s, &zero, &xt, 400).unwrap();
        let ab = s.alpha_bar(400).sqrt();
        let want: Vec<f64> = xt.as_slice().iter().map(|x| x / ab).collect();
        assert_eq!(est.as_slice(), want.as_slice());
    }

    #[test]
    fn point_mass_estimate() {
        let s = DiffusionSchedule::default_linear();
        let prior = GmmPrior::new(&[2], vec![1.0], vec![0.25, -0.5], vec![0.0]).unwrap();
        let d = AnalyticGmm::new(prior);
        let x = Tensor::from_vec(vec![3.0, 1.0]).unwrap();
        let est = estimate_x0(&s, &d, &x, 700).unwrap();
        assert!((est.as_slice()[0] - 0.25).abs() < 1e-12);
        assert!((est.as_slice()[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rectify_limits() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap();
        let y = Tensor::from_vec(vec![-1.0, 0.5, 7.0]).unwrap();
        let id = LinearOperator::identity(&[3]).unwrap();
        assert_eq!(rectify(&id, &x, &y).unwrap().as_slice(), y.as_slice());
        let zero = LinearOperator::zero(&[3], 2).unwrap();
        let y0 = Tensor::from_vec(vec![4.0, 4.0]).unwrap();
        assert_eq!(bits(&rectify(&zero, &x, &y0).unwrap()), bits(&x));
    }

    #[test]
    fn rectify_only_touches_the_range() {
        let op = build_from_text("grayscale", &[3, 2, 2]).unwrap();
        let mut rng = RngStream::new(3, 0);
        let x0t = gaussian_sample(&mut rng, &[3, 2, 2]).unwrap();
        let truth = gaussian_sample(&mut rng, &[3, 2, 2]).unwrap();
        let y = op.apply(&truth).unwrap();
        let r = rectify(&op, &x0t, &y).unwrap();
        let resid = op.apply(&r).unwrap().sub(&y).unwrap();
        assert!(resid.max_abs() < 1e-12);
        let n1 = op.null_project(&r).unwrap();
        let n0 = op.null_project(&x0t).unwrap();
        assert!(n1.sub(&n0).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn rectify_scaled_cases() {
        let id = LinearOperator::identity(&[2]).unwrap();
        let x = Tensor::from_vec(vec![1.0, 3.0]).unwrap();
        let y = Tensor::from_vec(vec![0.0, -1.0]).unwrap();
        assert_eq!(rectify_scaled(&id, &x, &y, 0.5).unwrap().as_slice(), &[0.5, 1.0]);
        assert!(rectify_scaled(&id, &x, &y, 0.0).is_err());
        assert!(rectify_scaled(&id, &x, &y, 1.5).is_err());
        let op = build_from_text("avgpool:2", &[1, 2, 2]).unwrap();
        let x = Tensor::new(vec![0.1, 0.7, -0.2, 0.4], vec![1, 2, 2]).unwrap();
        let y = Tensor::new(vec![2.0], vec![1, 1, 1]).unwrap();
        assert_eq!(
            bits(&rectify_scaled(&op, &x, &y, 1.0).unwrap()),
            bits(&rectify(&op, &x, &y).unwrap())
        );
    }

    #[test]
    fn simple_scaling_branches() {
        let s = DiffusionSchedule::default_linear();
        let tr = s.posterior_coeffs(500).unwrap();
        let n = simple_lambda_gamma(&s, 500, 0.0).unwrap();
        assert_eq!((n.lambda, n.gamma), (1.0, tr.var));
        let small = 0.5 * tr.sigma() / tr.a;
        let n = simple_lambda_gamma(&s, 500, small).unwrap();
        assert_eq!(n.lambda, 1.0);
        assert!((n.gamma - (tr.var - (tr.a * small).powi(2))).abs() < 1e-15);
        let big = 4.0 * tr.sigma() / tr.a;
        let n = simple_lambda_gamma(&s, 500, big).unwrap();
        assert!((n.lambda - tr.sigma() / (tr.a * big)).abs() < 1e-15);
        assert_eq!(n.gamma, 0.0);
        assert!(simple_lambda_gamma(&s, 500, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn scalar_variance_bookkeeping(t in 1usize..=1000, sigma_y in 0.0f64..2.0) {
            let s = DiffusionSchedule::default_linear();
            let tr = s.posterior_coeffs(t).unwrap();
            let n = simple_lambda_gamma(&s, t, sigma_y).unwrap();
            prop_assert!(n.lambda >= 0.0 && n.lambda <= 1.0 && n.gamma >= 0.0);
            prop_assert!(((tr.a * n.lambda * sigma_y).powi(2) + n.gamma - tr.var).abs() <= 1e-12);
        }
    }

    #[test]
    fn ddpm_step_noise_free_propagation() {
        let s = DiffusionSchedule::default_linear();
        let x0 = Tensor::from_vec(vec![0.4, -0.9]).unwrap();
        let t = 300;
        let xt = x0.scale(s.alpha_bar(t).sqrt());
        let mut rng = RngStream::new(1, 0);
        let out = ddpm_step(&s, &xt, &x0, t, 0.0, &mut rng).unwrap();
        let want = x0.scale(s.alpha_bar(t - 1).sqrt());
        assert!(out.sub(&want).unwrap().max_abs() < 1e-12);
        assert_eq!(rng.counter(), 0);
        assert!(ddpm_step(&s, &xt, &x0, t, -1.0, &mut rng).is_err());
    }

    #[test]
    fn ddpm_step_reproducible() {
        let s = DiffusionSchedule::default_linear();
        let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]).unwrap();
        let run = || {
            ddpm_step(
                &s,
                &x,
                &x,
                50,
                s.posterior_coeffs(50).unwrap().var,
                &mut RngStream::new(9, 0),
            )
            .unwrap()
        };
        assert_eq!(bits(&run()), bits(&run()));
    }

    #[test]
    fn ddim_step_cases() {
        let s = DiffusionSchedule::default_linear();
        let x0 = Tensor::from_vec(vec![0.4, -0.9]).unwrap();
        let eps = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let mut rng = RngStream::new(1, 0);
        let a = ddim_step(&s, &x0, &eps, 200, 0.0, &mut rng).unwrap();
        assert_eq!(rng.counter(), 0);
        assert_eq!(bits(&a), bits(&ddim_step(&s, &x0, &eps, 200, 0.0, &mut rng).unwrap()));
        assert_eq!(bits(&ddim_step(&s, &x0, &eps, 1, 0.7, &mut rng).unwrap()), bits(&x0));
        // η = 1 ignores the predicted noise
        let other = Tensor::from_vec(vec![-5.0, 8.0]).unwrap();
        let p = ddim_step(&s, &x0, &eps, 200, 1.0, &mut RngStream::new(4, 0)).unwrap();
        let q = ddim_step(&s, &x0, &other, 200, 1.0, &mut RngStream::new(4, 0)).unwrap();
        assert_eq!(bits(&p), bits(&q));
    }

    fn toy() -> (GmmPrior, DiffusionSchedule) {
        (
            image_pattern_prior(&[3, 4, 4], 4, 0.05, 2).unwrap(),
            DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap(),
        )
    }

    #[test]
    fn identity_operator_returns_y() {
        let (prior, s) = toy();
        let d = AnalyticGmm::new(prior);
        let op = LinearOperator::identity(&[3, 4, 4]).unwrap();
        let y = gaussian_sample(&mut RngStream::new(5, 0), &[3, 4, 4]).unwrap();
        let p = RestorationProblem::new(op, y.clone(), 0.0).unwrap();
        for params in [SamplerParams::ddpm(100, 1), SamplerParams::ddim(20, 0.85, 1)] {
            let out = run_ddnm(&p, &d, &s, &params).unwrap();
            assert!(out.sub(&y).unwrap().max_abs() < 1e-6);
        }
    }

    #[test]
    fn plus_reduces_to_ddnm_bitwise() {
        let (prior, s) = toy();
        let d = AnalyticGmm::new(prior);
        let op = build_from_text("avgpool:2", &[3, 4, 4]).unwrap();
        let y = op
            .apply(&gaussian_sample(&mut RngStream::new(5, 0), &[3, 4, 4]).unwrap())
            .unwrap();
        let p = RestorationProblem::new(op, y, 0.0).unwrap();
        for params in [SamplerParams::ddpm(50, 3), SamplerParams::ddim(20, 0.85, 3)] {
            let a = run_ddnm(&p, &d, &s, &params).unwrap();
            let b = run_ddnm_plus(&p, &d, &s, &params, &TimeTravelParams::none(), None).unwrap();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    struct Residuals<'a> {
        op: &'a LinearOperator,
        y: &'a Tensor,
        worst: f64,
        calls: usize,
    }

    impl StepHook for Residuals<'_> {
        fn rectified(&mut self, _t: usize, x0hat: &mut Tensor) -> Result<()> {
            let r = self.op.apply(x0hat)?.sub(self.y)?.max_abs();
            self.worst = self.worst.max(r);
            self.calls += 1;
            Ok(())
        }
    }

    #[test]
    fn every_intermediate_estimate_is_consistent() {
        let (prior, s) = toy();
        let d = AnalyticGmm::new(prior);
        let op = build_from_text("grayscale", &[3, 4, 4]).unwrap();
        let y = op
            .apply(&gaussian_sample(&mut RngStream::new(8, 0), &[3, 4, 4]).unwrap())
            .unwrap();
        let p = RestorationProblem::new(op.clone(), y.clone(), 0.0).unwrap();
        let mut hook = Residuals {
            op: &op,
            y: &y,
            worst: 0.0,
            calls: 0,
        };
        let tt = TimeTravelParams::new(3, 3, 2).unwrap();
        let out = run_ddnm_plus_hooked(&p, &d, &s, &SamplerParams::ddpm(30, 2), &tt, None, &mut hook).unwrap();
        assert!(hook.worst <= 1e-10);
        assert_eq!(hook.calls, plan_cost(&time_travel_plan(30, &tt)));
        assert!(op.apply(&out).unwrap().sub(&y).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn spectral_basis_must_match() {
        let (prior, s) = toy();
        let d = AnalyticGmm::new(prior);
        let op = build_from_text("avgpool:2", &[3, 4, 4]).unwrap();
        let other = build_from_text("avgpool:4", &[3, 4, 4]).unwrap();
        let y = Tensor::zeros(&[3, 2, 2]).unwrap();
        let p = RestorationProblem::new(op, y, 0.1).unwrap();
        let f = other.svd().unwrap();
        let r = run_ddnm_plus(
            &p,
            &d,
            &s,
            &SamplerParams::ddpm(10, 0),
            &TimeTravelParams::none(),
            Some(&f),
        );
        assert!(matches!(r, Err(Error::Incompatible(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let (prior, s) = toy();
        let d = AnalyticGmm::new(prior);
        let op = LinearOperator::identity(&[3, 4, 4]).unwrap();
        let p = RestorationProblem::new(op, Tensor::zeros(&[3, 4, 4]).unwrap(), 0.0).unwrap();
        assert!(run_ddnm(&p, &d, &s, &SamplerParams::ddpm(0, 0)).is_err());
        assert!(run_ddnm(&p, &d, &s, &SamplerParams::ddpm(101, 0)).is_err());
        assert!(run_ddnm(&p, &d, &s, &SamplerParams::ddim(10, 1.5, 0)).is_err());
        assert!(RestorationProblem::new(
            LinearOperator::identity(&[2]).unwrap(),
            Tensor::zeros(&[3]).unwrap(),
            0.0
        )
        .is_err());
    }
}
