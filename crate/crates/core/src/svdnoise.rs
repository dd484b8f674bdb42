//! Per-singular-value noise scaling.
//!
//! In the right-singular basis `V` of `A`, each coordinate `i` gets its own damping
//! `λ_i` of the range-space correction and its own added variance `γ_i`, so that the
//! observation noise carried into `x_prev` plus the fresh noise stays on the
//! schedule's budget `σ²` coordinate by coordinate.

use crate::error::{Error, Result};
use crate::linop::{LinearOperator, SvdFactors, DEFAULT_ZERO_THRESHOLD};
use crate::rng::RngStream;
use crate::sampler::{check_sigma_y, Mode};
use crate::schedule::{DiffusionSchedule, Transition};
use crate::tensor::Tensor;

/// Which case of the scaling rule a coordinate falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// `s_i = 0`: nothing is observed along this direction.
    Null,
    /// The noise budget covers the observation noise: `λ = 1`.
    Full,
    /// The observation noise exceeds the budget: `λ < 1`.
    Damped,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralScaling {
    pub mode: Mode,
    pub lambdas: Vec<f64>,
    pub gammas: Vec<f64>,
    pub branches: Vec<Branch>,
    pub eta: f64,
    pub sigma_y: f64,
    /// Noise budget `σ²` of the step.
    pub sigma_sq: f64,
    /// Coefficient of `x̂₀` in the step: `a_t` (DDPM) or `sqrt(ᾱ_prev)` (DDIM).
    pub coef: f64,
}

/// Singular values padded to length `D`, with those at or below
/// `1e-8 * s_max` set to zero.
pub fn effective_singulars(f: &SvdFactors) -> Vec<f64> {
    let cutoff = DEFAULT_ZERO_THRESHOLD * f.max_singular();
    f.padded_singulars()
        .into_iter()
        .map(|s| if s <= cutoff { 0.0 } else { s })
        .collect()
}

/// DDPM scaling for the single step `t -> t-1`.
pub fn spectral_lambda_gamma_ddpm(
    schedule: &DiffusionSchedule,
    t: usize,
    sigma_y: f64,
    singulars: &[f64],
) -> Result<SpectralScaling> {
    check_sigma_y(sigma_y)?;
    Ok(ddpm_scaling(schedule.posterior_coeffs(t)?, sigma_y, singulars))
}

/// DDIM scaling for the single step `t -> t-1`.
pub fn spectral_lambda_gamma_ddim(
    schedule: &DiffusionSchedule,
    t: usize,
    sigma_y: f64,
    eta: f64,
    singulars: &[f64],
) -> Result<SpectralScaling> {
    check_sigma_y(sigma_y)?;
    schedule.check_index(t)?;
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidParameter(format!("eta {eta} outside [0, 1]")));
    }
    Ok(ddim_scaling(schedule.alpha_bar(t - 1), sigma_y, eta, singulars))
}

pub(crate) fn ddpm_scaling(tr: Transition, sigma_y: f64, singulars: &[f64]) -> SpectralScaling {
    let (a, var) = (tr.a, tr.var);
    let sigma = var.sqrt();
    let mut sc = empty(Mode::Ddpm, singulars.len(), 1.0, sigma_y, var, a);
    for (i, &s) in singulars.iter().enumerate() {
        let (lambda, gamma, branch) = if s == 0.0 {
            (1.0, var, Branch::Null)
        } else if sigma_y == 0.0 || sigma * s >= a * sigma_y {
            let carried = a * sigma_y / s;
            (1.0, (var - carried * carried).max(0.0), Branch::Full)
        } else {
            (sigma * s / (a * sigma_y), 0.0, Branch::Damped)
        };
        sc.lambdas[i] = lambda;
        sc.gammas[i] = gamma;
        sc.branches[i] = branch;
    }
    sc
}

pub(crate) fn ddim_scaling(alpha_bar_prev: f64, sigma_y: f64, eta: f64, singulars: &[f64]) -> SpectralScaling {
    let c = alpha_bar_prev.sqrt();
    let var = 1.0 - alpha_bar_prev;
    let sigma = var.sqrt();
    let keep = (1.0 - eta * eta).sqrt();
    let mut sc = empty(Mode::Ddim, singulars.len(), eta, sigma_y, var, c);
    for (i, &s) in singulars.iter().enumerate() {
        let (lambda, gamma, branch) = if s == 0.0 {
            (1.0, var, Branch::Null)
        } else if sigma_y == 0.0 || sigma * s >= c * sigma_y {
            let carried = c * sigma_y / s;
            (1.0, (var - carried * carried).max(0.0), Branch::Full)
        } else {
            (s * sigma * keep / (c * sigma_y), var * eta * eta, Branch::Damped)
        };
        sc.lambdas[i] = lambda;
        sc.gammas[i] = gamma;
        sc.branches[i] = branch;
    }
    sc
}

fn empty(mode: Mode, n: usize, eta: f64, sigma_y: f64, sigma_sq: f64, coef: f64) -> SpectralScaling {
    SpectralScaling {
        mode,
        lambdas: vec![1.0; n],
        gammas: vec![0.0; n],
        branches: vec![Branch::Null; n],
        eta,
        sigma_y,
        sigma_sq,
        coef,
    }
}

fn check_basis(f: &SvdFactors, op: &LinearOperator, sc: &SpectralScaling) -> Result<()> {
    if f.in_dim() != op.in_dim() || f.out_dim() != op.out_dim() {
        return Err(Error::Incompatible(format!(
            "SVD basis is {}x{} but the operator is {}x{}",
            f.out_dim(),
            f.in_dim(),
            op.out_dim(),
            op.in_dim()
        )));
    }
    if sc.lambdas.len() != f.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: f.in_dim(),
            actual: sc.lambdas.len(),
            context: "scaling length vs basis",
        });
    }
    Ok(())
}

/// `x0t - V Λ Vᵀ A†(A x0t - y)`
pub fn rectify_spectral(
    f: &SvdFactors,
    x0t: &Tensor,
    y: &Tensor,
    sc: &SpectralScaling,
    op: &LinearOperator,
) -> Result<Tensor> {
    check_basis(f, op, sc)?;
    let residual = op.apply(x0t)?.sub(y)?;
    let correction = op.pinv_apply(&residual)?;
    let mut coords = f.v.mul_vec_transposed(correction.as_slice());
    for (c, l) in coords.iter_mut().zip(&sc.lambdas) {
        *c *= l;
    }
    let back = Tensor::new(f.v.mul_vec(&coords), x0t.shape().to_vec())?;
    x0t.sub(&back)
}

/// `V (sqrt(γ) ⊙ z)`, or `None` when every `γ_i` is zero.
pub fn sample_spectral_noise_ddpm(f: &SvdFactors, sc: &SpectralScaling, rng: &mut RngStream) -> Result<Option<Tensor>> {
    if sc.gammas.len() != f.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: f.in_dim(),
            actual: sc.gammas.len(),
            context: "scaling length vs basis",
        });
    }
    if sc.gammas.iter().all(|&g| g == 0.0) {
        return Ok(None);
    }
    let mut z = vec![0.0; f.in_dim()];
    rng.fill_normal(&mut z);
    for (zi, g) in z.iter_mut().zip(&sc.gammas) {
        *zi *= g.sqrt();
    }
    Ok(Some(Tensor::from_vec(f.v.mul_vec(&z))?))
}

/// `V ε_temp` with, per coordinate,
/// `Full: sqrt(γ) z`, `Damped: σ η z`, `Null: σ sqrt(1-η²) (Vᵀ ε_pred) + σ η z`.
pub fn sample_spectral_noise_ddim(
    f: &SvdFactors,
    sc: &SpectralScaling,
    eps_pred: &Tensor,
    rng: &mut RngStream,
) -> Result<Tensor> {
    eps_pred.check_len(f.in_dim(), "predicted noise vs basis")?;
    if sc.branches.len() != f.in_dim() {
        return Err(Error::DimensionMismatch {
            expected: f.in_dim(),
            actual: sc.branches.len(),
            context: "scaling length vs basis",
        });
    }
    let sigma = sc.sigma_sq.sqrt();
    let keep = (1.0 - sc.eta * sc.eta).sqrt();
    let pred = f.v.mul_vec_transposed(eps_pred.as_slice());
    let needs_draw = sigma > 0.0
        && (sc.eta > 0.0
            || sc
                .branches
                .iter()
                .zip(&sc.gammas)
                .any(|(b, g)| *b == Branch::Full && *g > 0.0));
    let mut z = vec![0.0; f.in_dim()];
    if needs_draw {
        rng.fill_normal(&mut z);
    }
    let temp: Vec<f64> = (0..f.in_dim())
        .map(|i| match sc.branches[i] {
            Branch::Full => sc.gammas[i].sqrt() * z[i],
            Branch::Damped => sigma * sc.eta * z[i],
            Branch::Null => sigma * keep * pred[i] + sigma * sc.eta * z[i],
        })
        .collect();
    Tensor::new(f.v.mul_vec(&temp), eps_pred.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linop::{build_from_text, Matrix};
    use crate::rng::gaussian_sample;
    use crate::sampler::{rectify, rectify_scaled};
    use proptest::prelude::*;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::default_linear()
    }

    #[test]
    fn noise_free_is_unscaled() {
        let s = schedule();
        let sing = [2.0, 0.5, 0.0];
        let sc = spectral_lambda_gamma_ddpm(&s, 400, 0.0, &sing).unwrap();
        let var = s.posterior_coeffs(400).unwrap().var;
        assert_eq!(sc.lambdas, vec![1.0; 3]);
        assert_eq!(sc.gammas, vec![var; 3]);
        let sc = spectral_lambda_gamma_ddim(&s, 400, 0.0, 0.85, &sing).unwrap();
        assert_eq!(sc.lambdas, vec![1.0; 3]);
    }

    #[test]
    fn null_directions_keep_the_full_budget() {
        let s = schedule();
        for sc in [
            spectral_lambda_gamma_ddpm(&s, 10, 0.3, &[0.0]).unwrap(),
            spectral_lambda_gamma_ddim(&s, 10, 0.3, 0.5, &[0.0]).unwrap(),
        ] {
            assert_eq!(sc.lambdas[0], 1.0);
            assert_eq!(sc.gammas[0], sc.sigma_sq);
            assert_eq!(sc.branches[0], Branch::Null);
        }
    }

    #[test]
    fn ddim_damped_branch() {
        let s = schedule();
        let t = 50;
        let ab = s.alpha_bar(t - 1);
        let (c, sigma) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sy, si, eta) = (0.5, 0.1, 0.6);
        assert!(sigma < c * sy / si);
        let sc = spectral_lambda_gamma_ddim(&s, t, sy, eta, &[si]).unwrap();
        assert_eq!(sc.branches[0], Branch::Damped);
        let want = si * sigma * (1.0 - eta * eta).sqrt() / (c * sy);
        assert!((sc.lambdas[0] - want).abs() < 1e-15);
        // η = 0 gives the DDPM-style ratio with a_t replaced by sqrt(ᾱ_prev)
        let sc0 = spectral_lambda_gamma_ddim(&s, t, sy, 0.0, &[si]).unwrap();
        assert!((sc0.lambdas[0] - sigma * si / (c * sy)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn ddpm_budget_is_completed(t in 1usize..=1000, sy in 0.0f64..1.0, si in 1e-3f64..3.0) {
            let s = schedule();
            let tr = s.posterior_coeffs(t).unwrap();
            let sc = spectral_lambda_gamma_ddpm(&s, t, sy, &[si]).unwrap();
            let d = (tr.a * sc.lambdas[0] * sy / si).powi(2);
            prop_assert!((d + sc.gammas[0] - tr.var).abs() <= 1e-12);
            prop_assert!(sc.lambdas[0] >= 0.0 && sc.lambdas[0] <= 1.0 && sc.gammas[0] >= 0.0);
        }

        #[test]
        fn lambda_nonincreasing_in_sigma_y(t in 2usize..=1000, a in 0.0f64..1.0, b in 0.0f64..1.0, si in 1e-3f64..3.0) {
            let s = schedule();
            let (lo, hi) = (a.min(b), a.max(b));
            let l = |sy| spectral_lambda_gamma_ddpm(&s, t, sy, &[si]).unwrap().lambdas[0];
            prop_assert!(l(hi) <= l(lo));
        }
    }

    #[test]
    fn effective_singulars_pad_and_truncate() {
        let a = Matrix::from_rows(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1e-12, 0.0]).unwrap();
        let op = LinearOperator::dense(a, &[3]).unwrap();
        let f = op.svd().unwrap();
        assert_eq!(effective_singulars(&f), vec![1.0, 0.0, 0.0]);
    }

    fn random_dense(rows: usize, cols: usize, seed: u64) -> LinearOperator {
        let mut rng = RngStream::new(seed, 0);
        let a = Matrix::from_fn(rows, cols, |_, _| rng.normal());
        LinearOperator::dense(a, &[cols]).unwrap()
    }

    #[test]
    fn uniform_lambda_matches_scalar_rectify() {
        let op = random_dense(4, 7, 1);
        let f = op.svd().unwrap();
        let mut rng = RngStream::new(2, 0);
        let x = gaussian_sample(&mut rng, &[7]).unwrap();
        let y = gaussian_sample(&mut rng, &[4]).unwrap();
        let mut sc = ddpm_scaling(
            Transition {
                a: 1.0,
                b: 0.0,
                var: 0.0,
            },
            0.0,
            &effective_singulars(&f),
        );
        let full = rectify_spectral(&f, &x, &y, &sc, &op).unwrap();
        assert!(full.sub(&rectify(&op, &x, &y).unwrap()).unwrap().max_abs() < 1e-12);
        sc.lambdas = vec![0.3; 7];
        let part = rectify_spectral(&f, &x, &y, &sc, &op).unwrap();
        assert!(part.sub(&rectify_scaled(&op, &x, &y, 0.3).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn matches_dense_oracle() {
        let op = random_dense(5, 5, 7);
        let f = op.svd().unwrap();
        let a = op.to_dense().unwrap();
        let p = op.pinv_to_dense().unwrap();
        let mut rng = RngStream::new(3, 0);
        let x = gaussian_sample(&mut rng, &[5]).unwrap();
        let y = gaussian_sample(&mut rng, &[5]).unwrap();
        let lambdas: Vec<f64> = (0..5).map(|_| 0.1 + 0.9 * rng.uniform()).collect();
        let mut sc = ddpm_scaling(
            Transition {
                a: 1.0,
                b: 0.0,
                var: 0.0,
            },
            0.0,
            &effective_singulars(&f),
        );
        sc.lambdas = lambdas.clone();
        let got = rectify_spectral(&f, &x, &y, &sc, &op).unwrap();
        // Σ = V diag(λ) Vᵀ built entry by entry
        let sigma = Matrix::from_fn(5, 5, |r, c| {
            (0..5).map(|k| f.v[(r, k)] * lambdas[k] * f.v[(c, k)]).sum()
        });
        let resid: Vec<f64> = a
            .mul_vec(x.as_slice())
            .iter()
            .zip(y.as_slice())
            .map(|(u, v)| u - v)
            .collect();
        let corr = sigma.mul_vec(&p.mul_vec(&resid));
        for i in 0..5 {
            assert!((got.as_slice()[i] - (x.as_slice()[i] - corr[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn consistent_input_is_a_fixed_point() {
        let op = build_from_text("blur:gauss:3:1.0", &[1, 4, 4]).unwrap();
        let f = op.svd().unwrap();
        let x = gaussian_sample(&mut RngStream::new(4, 0), &[1, 4, 4]).unwrap();
        let y = op.apply(&x).unwrap();
        let s = schedule();
        let sc = spectral_lambda_gamma_ddpm(&s, 100, 0.2, &effective_singulars(&f)).unwrap();
        let out = rectify_spectral(&f, &x, &y, &sc, &op).unwrap();
        let bits = |t: &Tensor| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&x));
    }

    #[test]
    fn basis_mismatch_is_rejected() {
        let op = random_dense(3, 4, 1);
        let other = random_dense(2, 4, 1);
        let f = other.svd().unwrap();
        let sc = ddpm_scaling(
            Transition {
                a: 1.0,
                b: 0.0,
                var: 0.0,
            },
            0.0,
            &effective_singulars(&f),
        );
        let x = Tensor::zeros(&[4]).unwrap();
        let y = Tensor::zeros(&[3]).unwrap();
        assert!(matches!(
            rectify_spectral(&f, &x, &y, &sc, &op),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn ddim_noise_free_has_budget_variance() {
        let op = random_dense(4, 4, 9);
        let f = op.svd().unwrap();
        let s = schedule();
        let sc = spectral_lambda_gamma_ddim(&s, 300, 0.0, 0.5, &effective_singulars(&f)).unwrap();
        assert!(sc.branches.iter().all(|b| *b == Branch::Full));
        assert!(sc.gammas.iter().all(|g| *g == sc.sigma_sq));
    }

    #[test]
    fn ddim_null_coordinates_reproduce_plain_ddim() {
        // A = 0: every coordinate is null, so the noise is σ(sqrt(1-η²) ε + η z)
        let op = LinearOperator::zero(&[3], 2).unwrap();
        let f = op.svd().unwrap();
        let s = schedule();
        let sc = spectral_lambda_gamma_ddim(&s, 300, 0.2, 0.4, &effective_singulars(&f)).unwrap();
        let eps = Tensor::from_vec(vec![0.5, -1.0, 2.0]).unwrap();
        let got = sample_spectral_noise_ddim(&f, &sc, &eps, &mut RngStream::new(1, 0)).unwrap();
        let mut z = vec![0.0; 3];
        RngStream::new(1, 0).fill_normal(&mut z);
        let sigma = sc.sigma_sq.sqrt();
        let vz = f.v.mul_vec(&z);
        for i in 0..3 {
            let want = sigma * (1.0f64 - 0.16).sqrt() * eps.as_slice()[i] + sigma * 0.4 * vz[i];
            assert!((got.as_slice()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ddim_noise_covariance_matches_gamma() {
        let op = random_dense(3, 5, 4);
        let f = op.svd().unwrap();
        let s = schedule();
        let sing = effective_singulars(&f);
        // pick σ_y so that the three branches all occur
        let ab = s.alpha_bar(199);
        let (c, sigma) = (ab.sqrt(), (1.0 - ab).sqrt());
        let sy = sigma * (sing[0] + sing[2]) / (2.0 * c);
        let sc = spectral_lambda_gamma_ddim(&s, 200, sy, 0.7, &sing).unwrap();
        assert!(sc.branches.contains(&Branch::Full) && sc.branches.contains(&Branch::Damped));
        // the predicted noise is itself standard normal, as for a calibrated denoiser
        let n = 100_000;
        let mut rng = RngStream::new(12, 0);
        let mut pred_rng = RngStream::new(13, 0);
        let mut sum = [0.0; 5];
        let mut sum4 = [0.0; 5];
        for _ in 0..n {
            let eps = gaussian_sample(&mut pred_rng, &[5]).unwrap();
            let e = sample_spectral_noise_ddim(&f, &sc, &eps, &mut rng).unwrap();
            let coords = f.v.mul_vec_transposed(e.as_slice());
            for i in 0..5 {
                sum[i] += coords[i] * coords[i];
                sum4[i] += coords[i].powi(4);
            }
        }
        for i in 0..5 {
            let var = sum[i] / n as f64;
            let se = ((sum4[i] / n as f64 - var * var) / n as f64).sqrt();
            assert!(
                (var - sc.gammas[i]).abs() <= 3.0 * se + 1e-15,
                "coord {i}: {var} vs {}",
                sc.gammas[i]
            );
        }
    }
}
