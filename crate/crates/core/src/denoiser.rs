//! Noise predictors `Z(x_t, t)`.
//!
//! [`AnalyticGmm`] returns the exact posterior-mean prediction for an isotropic
//! Gaussian-mixture prior. [`ExternalDenoiser`] shells out to a user command that
//! exchanges TEN1 files, one call at a time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::RngStream;
use crate::schedule::DiffusionSchedule;
use crate::tensor::{checked_numel, Tensor};

pub trait Denoiser: Send + Sync {
    /// Estimate of the noise `ε` in `x_t = sqrt(ᾱ_t) x₀ + sqrt(1 - ᾱ_t) ε`.
    fn predict_noise(&self, schedule: &DiffusionSchedule, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// Mixture `Σ w_k N(μ_k, s_k² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    shape: Vec<usize>,
    weights: Vec<f64>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl GmmPrior {
    /// `means` holds the K component means back to back, each of length `prod(shape)`.
    pub fn new(shape: &[usize], weights: Vec<f64>, means: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        let dim = checked_numel(shape)?;
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        if scales.len() != k || means.len() != k * dim {
            return Err(Error::InvalidParameter(format!(
                "{k} weights need {k} scales and {} mean values, got {} and {}",
                k * dim,
                scales.len(),
                means.len()
            )));
        }
        if weights.iter().chain(&scales).chain(&means).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("mixture parameters must be finite".into()));
        }
        if weights.iter().any(|&w| w < 0.0) || scales.iter().any(|&s| s < 0.0) {
            return Err(Error::InvalidParameter("weights and scales must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("weights sum to {total}, not 1")));
        }
        Ok(Self {
            shape: shape.to_vec(),
            weights,
            means,
            scales,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.len() / self.weights.len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Same prior with samples reported in a different shape of equal size.
    pub fn with_shape(mut self, shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: n,
                context: "prior shape",
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn mean_of(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.means[k * d..(k + 1) * d]
    }

    /// `Σ w_k μ_k`
    pub fn mixture_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for k in 0..self.components() {
            for (acc, v) in m.iter_mut().zip(self.mean_of(k)) {
                *acc += self.weights[k] * v;
            }
        }
        m
    }

    /// `E[x₀ | x_t]` when `x_t = sqrt(ab) x₀ + sqrt(1 - ab) ε`.
    pub fn posterior_mean_at(&self, alpha_bar: f64, x_t: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x_t.len(), self.dim());
        if alpha_bar >= 1.0 {
            return x_t.to_vec();
        }
        let d = self.dim() as f64;
        let sab = alpha_bar.sqrt();
        let log_r: Vec<f64> = (0..self.components())
            .map(|k| {
                if self.weights[k] == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let v = alpha_bar * self.scales[k].powi(2) + 1.0 - alpha_bar;
                let dist2: f64 = x_t
                    .iter()
                    .zip(self.mean_of(k))
                    .map(|(x, m)| (x - sab * m).powi(2))
                    .sum();
                self.weights[k].ln() - 0.5 * d * (std::f64::consts::TAU * v).ln() - dist2 / (2.0 * v)
            })
            .collect();
        let resp = softmax(&log_r);
        let mut out = vec![0.0; x_t.len()];
        for (k, &r) in resp.iter().enumerate() {
            if r == 0.0 {
                continue;
            }
            let v = alpha_bar * self.scales[k].powi(2) + 1.0 - alpha_bar;
            let shrink = self.scales[k].powi(2) * sab / v;
            for ((o, x), m) in out.iter_mut().zip(x_t).zip(self.mean_of(k)) {
                *o += r * (m + shrink * (x - sab * m));
            }
        }
        out
    }

    /// Component responsibilities at `x_t`; exposed for diagnostics.
    pub fn responsibilities(&self, alpha_bar: f64, x_t: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        let sab = alpha_bar.sqrt();
        let log_r: Vec<f64> = (0..self.components())
            .map(|k| {
                let v = alpha_bar * self.scales[k].powi(2) + 1.0 - alpha_bar;
                let dist2: f64 = x_t
                    .iter()
                    .zip(self.mean_of(k))
                    .map(|(x, m)| (x - sab * m).powi(2))
                    .sum();
                self.weights[k].ln() - 0.5 * d * (std::f64::consts::TAU * v).ln() - dist2 / (2.0 * v)
            })
            .collect();
        softmax(&log_r)
    }
}

fn softmax(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One draw from the prior, in the prior's shape.
pub fn gmm_sample(prior: &GmmPrior, rng: &mut RngStream) -> Tensor {
    let u = rng.uniform();
    let mut k = prior.components() - 1;
    let mut acc = 0.0;
    for (i, w) in prior.weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let mean = prior.mean_of(k);
    let s = prior.scales[k];
    let data = if s == 0.0 {
        mean.to_vec()
    } else {
        let mut z = vec![0.0; mean.len()];
        rng.fill_normal(&mut z);
        mean.iter().zip(&z).map(|(m, e)| m + s * e).collect()
    };
    Tensor::from_parts(data, prior.shape.clone())
}

/// Exact posterior mean `E[x₀ | x_t]` at schedule index `t`.
pub fn gmm_posterior_x0(prior: &GmmPrior, schedule: &DiffusionSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
    schedule.check_index(t)?;
    x_t.check_len(prior.dim(), "denoiser input")?;
    let m = prior.posterior_mean_at(schedule.alpha_bar(t), x_t.as_slice());
    Ok(Tensor::from_parts(m, x_t.shape().to_vec()))
}

/// Self-normalized importance estimate of `E[x₀ | x_t]` with per-coordinate standard
/// errors, drawing `x₀` from the prior.
pub fn mc_posterior_x0(
    prior: &GmmPrior,
    schedule: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    n: usize,
    rng: &mut RngStream,
) -> Result<(Tensor, Tensor)> {
    schedule.check_index(t)?;
    x_t.check_len(prior.dim(), "denoiser input")?;
    if n < 1000 {
        return Err(Error::InvalidParameter(format!("need at least 1000 samples, got {n}")));
    }
    let ab = schedule.alpha_bar(t);
    let (sab, var) = (ab.sqrt(), 1.0 - ab);
    let xs = x_t.as_slice();
    let start = rng.clone();

    // Pass 1: log weights. Later passes replay the same draws.
    let mut log_w = Vec::with_capacity(n);
    let mut first: Option<Vec<f64>> = None;
    for _ in 0..n {
        let x0 = gmm_sample(prior, rng);
        let d2: f64 = xs.iter().zip(x0.as_slice()).map(|(x, z)| (x - sab * z).powi(2)).sum();
        log_w.push(-d2 / (2.0 * var));
        first.get_or_insert_with(|| x0.into_vec());
    }
    let w = softmax(&log_w);
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    if !(ess >= 10.0) {
        return Err(Error::LowEffectiveSampleSize { ess });
    }

    // Offsets from the first draw keep a point-mass prior exact.
    let base = first.expect("n >= 1000");
    let mut shift = vec![0.0; base.len()];
    let mut replay = start.clone();
    for wi in &w {
        let x0 = gmm_sample(prior, &mut replay);
        for ((acc, z), b) in shift.iter_mut().zip(x0.as_slice()).zip(&base) {
            *acc += wi * (z - b);
        }
    }
    let mean: Vec<f64> = base.iter().zip(&shift).map(|(b, s)| b + s).collect();

    let mut se2 = vec![0.0; base.len()];
    let mut replay = start;
    for wi in &w {
        let x0 = gmm_sample(prior, &mut replay);
        for ((acc, z), m) in se2.iter_mut().zip(x0.as_slice()).zip(&mean) {
            *acc += wi * wi * (z - m).powi(2);
        }
    }
    let se: Vec<f64> = se2.into_iter().map(f64::sqrt).collect();
    Ok((
        Tensor::from_parts(mean, x_t.shape().to_vec()),
        Tensor::from_parts(se, x_t.shape().to_vec()),
    ))
}

/// Exact denoiser for a [`GmmPrior`].
#[derive(Clone, Debug)]
pub struct AnalyticGmm {
    prior: GmmPrior,
}

impl AnalyticGmm {
    pub fn new(prior: GmmPrior) -> Self {
        Self { prior }
    }

    pub fn prior(&self) -> &GmmPrior {
        &self.prior
    }
}

impl Denoiser for AnalyticGmm {
    fn predict_noise(&self, schedule: &DiffusionSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
        schedule.check_index(t)?;
        let ab = schedule.alpha_bar(t);
        if ab >= 1.0 {
            return Err(Error::Domain(format!("alpha_bar at t = {t} is 1; noise is undefined")));
        }
        let x0 = gmm_posterior_x0(&self.prior, schedule, x_t, t)?;
        let (sab, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
        x_t.zip(&x0, |x, m| (x - sab * m) / s1)
    }
}

/// Wraps a closure as a denoiser.
pub struct FnDenoiser<F>(pub F);

impl<F> Denoiser for FnDenoiser<F>
where
    F: Fn(&DiffusionSchedule, &Tensor, usize) -> Result<Tensor> + Send + Sync,
{
    fn predict_noise(&self, schedule: &DiffusionSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
        (self.0)(schedule, x_t, t)
    }
}

/// Runs `program args... <path_in> <t> <path_out>` per call, exchanging TEN1 files.
#[derive(Debug)]
pub struct ExternalDenoiser {
    program: String,
    args: Vec<String>,
    workdir: PathBuf,
    calls: AtomicU64,
    lock: Mutex<()>,
}

impl ExternalDenoiser {
    /// `command` is split on whitespace into program and leading arguments.
    pub fn new(command: &str, workdir: impl Into<PathBuf>) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidParameter("empty denoiser command".into()))?;
        Ok(Self {
            program,
            args: parts.collect(),
            workdir: workdir.into(),
            calls: AtomicU64::new(0),
            lock: Mutex::new(()),
        })
    }
}

impl Denoiser for ExternalDenoiser {
    fn predict_noise(&self, schedule: &DiffusionSchedule, x_t: &Tensor, t: usize) -> Result<Tensor> {
        schedule.check_index(t)?;
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let id = self.calls.fetch_add(1, Ordering::Relaxed);
        let tag = format!("ddnm-{}-{id}", std::process::id());
        let path_in = self.workdir.join(format!("{tag}-in.ten"));
        let path_out = self.workdir.join(format!("{tag}-out.ten"));
        io::write_ten1(&path_in, x_t)?;
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&path_in)
            .arg(t.to_string())
            .arg(&path_out)
            .status()
            .map_err(|e| Error::External(format!("cannot start `{}`: {e}", self.program)))?;
        let _ = std::fs::remove_file(&path_in);
        if !status.success() {
            return Err(Error::External(format!("`{}` exited with {status}", self.program)));
        }
        let eps = io::read_ten1(&path_out);
        let _ = std::fs::remove_file(&path_out);
        let eps = eps?;
        if eps.len() != x_t.len() {
            return Err(Error::External(format!(
                "denoiser returned {} values for an input of {}",
                eps.len(),
                x_t.len()
            )));
        }
        eps.reshape(x_t.shape())
    }
}

pub fn format_gmm1(prior: &GmmPrior) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "GMM1");
    let _ = writeln!(out, "dim {} components {}", prior.dim(), prior.components());
    for k in 0..prior.components() {
        let _ = writeln!(out, "{:.16e}", prior.weights[k]);
        let mean: Vec<String> = prior.mean_of(k).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", mean.join(" "));
        let _ = writeln!(out, "{:.16e}", prior.scales[k]);
    }
    out
}

pub fn parse_gmm1(text: &str, path: &Path) -> Result<GmmPrior> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "GMM1" => {}
        _ => return Err(err(1, "expected magic `GMM1`".into())),
    }
    let (dim, k) = match lines.next() {
        Some((n, l)) => {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f.as_slice() {
                ["dim", d, "components", k] => match (d.parse::<usize>(), k.parse::<usize>()) {
                    (Ok(d), Ok(k)) if d > 0 && k > 0 => (d, k),
                    _ => return Err(err(n, format!("bad header `{l}`"))),
                },
                _ => return Err(err(n, format!("expected `dim D components K`, found `{l}`"))),
            }
        }
        None => return Err(err(2, "missing header".into())),
    };
    let mut tokens = lines.flat_map(|(n, l)| l.split_whitespace().map(move |tok| (n, tok)));
    let mut next = |what: &str| -> Result<f64> {
        let (n, tok) = tokens
            .next()
            .ok_or_else(|| err(0, format!("file ends before {what}")))?;
        tok.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(n, format!("`{tok}` is not a finite number")))
    };
    let (mut weights, mut means, mut scales) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..k {
        weights.push(next(&format!("weight of component {c}"))?);
        for _ in 0..dim {
            means.push(next(&format!("mean of component {c}"))?);
        }
        scales.push(next(&format!("scale of component {c}"))?);
    }
    if let Some((n, tok)) = tokens.next() {
        return Err(err(n, format!("unexpected trailing token `{tok}`")));
    }
    GmmPrior::new(&[dim], weights, means, scales)
}

pub fn write_gmm1(path: impl AsRef<Path>, prior: &GmmPrior) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_gmm1(prior)).map_err(|e| Error::io(path, e))
}

pub fn read_gmm1(path: impl AsRef<Path>) -> Result<GmmPrior> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gmm1(&text, path)
}

/// Equal-weight prior over `patterns` image templates (flat colours, gradients,
/// checkerboards) in `[0, 1]`, each with isotropic scale `scale`.
pub fn image_pattern_prior(shape: &[usize], patterns: usize, scale: f64, seed: u64) -> Result<GmmPrior> {
    let (c, h, w) = match *shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "image prior needs [C,H,W], got {shape:?}"
            )))
        }
    };
    checked_numel(shape)?;
    if patterns == 0 {
        return Err(Error::InvalidParameter("need at least one pattern".into()));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale {scale} must be nonnegative")));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut means = Vec::with_capacity(patterns * c * h * w);
    for k in 0..patterns {
        let colour_a: Vec<f64> = (0..c).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
        let colour_b: Vec<f64> = (0..c).map(|_| 0.1 + 0.8 * rng.uniform()).collect();
        let cell = 2 + rng.below(3) as usize;
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let (fr, fc) = (r as f64 / (h.max(2) - 1) as f64, col as f64 / (w.max(2) - 1) as f64);
                    let v = match k % 4 {
                        0 => colour_a[ch],
                        1 => colour_a[ch] + (colour_b[ch] - colour_a[ch]) * fc,
                        2 => colour_a[ch] + (colour_b[ch] - colour_a[ch]) * fr,
                        _ => {
                            if (r / cell + col / cell) % 2 == 0 {
                                colour_a[ch]
                            } else {
                                colour_b[ch]
                            }
                        }
                    };
                    means.push(v);
                }
            }
        }
    }
    let weights = vec![1.0 / patterns as f64; patterns];
    GmmPrior::new(shape, weights, means, vec![scale; patterns])
}
