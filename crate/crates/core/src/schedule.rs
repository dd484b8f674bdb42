//! Variance-preserving noise schedule.
//!
//! Indices run over `0..=T` with `ᾱ_0 = 1`. A reverse step may skip indices (accelerated
//! grids); its coefficients are then taken from the `ᾱ` values at the two grid neighbours.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const MAX_STEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    /// `betas[t]` for `t in 1..=T`; `betas[0]` is 0.
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Coefficients of the reverse transition `x_prev = a x̂₀ + b x_t + sqrt(var) ε`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub a: f64,
    pub b: f64,
    pub var: f64,
}

impl Transition {
    pub fn sigma(&self) -> f64 {
        self.var.sqrt()
    }
}

impl DiffusionSchedule {
    /// Linear betas from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if !(1..=MAX_STEPS).contains(&steps) {
            return Err(Error::InvalidParameter(format!(
                "step count {steps} outside 1..={MAX_STEPS}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }

    /// Schedule from explicit `β_1..β_T`, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.len() > MAX_STEPS {
            return Err(Error::InvalidParameter(format!(
                "schedule length {} outside 1..={MAX_STEPS}",
                betas.len()
            )));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        if prod <= 0.0 {
            return Err(Error::InvalidParameter("alpha_bar underflows to zero".into()));
        }
        let mut all = Vec::with_capacity(betas.len() + 1);
        all.push(0.0);
        all.extend(betas);
        Ok(Self { betas: all, alpha_bars })
    }

    /// `T`
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_index(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParameter(format!(
                "time index {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `a_t`, `b_t` and the posterior variance `σ_t²` of the single step `t -> t-1`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<Transition> {
        self.check_index(t)?;
        let (ab, ab_prev, beta) = (self.alpha_bars[t], self.alpha_bars[t - 1], self.betas[t]);
        if t == 1 {
            return Ok(Transition {
                a: 1.0,
                b: 0.0,
                var: 0.0,
            });
        }
        Ok(Transition {
            a: ab_prev.sqrt() * beta / (1.0 - ab),
            b: self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            var: (1.0 - ab_prev) * beta / (1.0 - ab),
        })
    }

    /// Posterior standard deviation `σ_t`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_coeffs(t)?.sigma())
    }

    /// Reverse transition from `t` to any `prev < t`. Adjacent indices give exactly
    /// [`posterior_coeffs`](Self::posterior_coeffs).
    pub fn transition(&self, t: usize, prev: usize) -> Result<Transition> {
        self.check_index(t)?;
        if prev >= t {
            return Err(Error::InvalidParameter(format!(
                "transition {t} -> {prev} does not descend"
            )));
        }
        if prev + 1 == t {
            return self.posterior_coeffs(t);
        }
        if prev == 0 {
            return Ok(Transition {
                a: 1.0,
                b: 0.0,
                var: 0.0,
            });
        }
        let (ab, ab_prev) = (self.alpha_bars[t], self.alpha_bars[prev]);
        let alpha_eff = ab / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        Ok(Transition {
            a: ab_prev.sqrt() * beta_eff / (1.0 - ab),
            b: alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            var: (1.0 - ab_prev) * beta_eff / (1.0 - ab),
        })
    }

    /// `sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`
    pub fn forward_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_index(t)?;
        let ab = self.alpha_bars[t];
        x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
    }

    /// Mean scale and standard deviation of `q(x_to | x_from)` for `from < to`.
    pub fn jump(&self, from: usize, to: usize) -> Result<(f64, f64)> {
        self.check_index(to)?;
        if from >= to {
            return Err(Error::InvalidParameter(format!("jump {from} -> {to} does not ascend")));
        }
        let ratio = self.alpha_bars[to] / self.alpha_bars[from];
        Ok((ratio.sqrt(), (1.0 - ratio).sqrt()))
    }

    /// Times `[0, t_1, ..., t_S = T]` of an `S`-step grid, evenly spaced over `1..=T`.
    pub fn time_grid(&self, steps: usize) -> Result<Vec<usize>> {
        let big_t = self.steps();
        if !(1..=big_t).contains(&steps) {
            return Err(Error::InvalidParameter(format!(
                "sampling steps {steps} outside 1..={big_t}"
            )));
        }
        let mut grid = vec![0];
        if steps == 1 {
            grid.push(big_t);
            return Ok(grid);
        }
        grid.extend((0..steps).map(|i| 1 + ((big_t - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize));
        debug_assert!(grid.windows(2).all(|w| w[0] < w[1]));
        Ok(grid)
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::default_linear()
    }
}
