use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ddnm_core::denoiser::{image_pattern_prior, read_gmm1, write_gmm1};
use ddnm_core::io::{read_ten1, write_image, write_ten1};
use ddnm_core::{
    build_from_text, consistency, gaussian_sample, plan_tiles, psnr, run_ddnm, run_ddnm_plus, run_ddpm_uncond,
    run_ddrm, run_ilvr, run_mask_shift, run_repaint, ssim, AnalyticGmm, DiffusionSchedule, LinearOperator, PadMode,
    RepaintParams, RestorationProblem, RngStream, SamplerParams, SvdFactors, Tensor, TilePlan, TimeTravelParams,
};
use rayon::prelude::*;

use crate::args::{
    DegradeArgs, EvalArgs, MakePriorArgs, Method, Padding, ReplayArgs, RestoreArgs, RestoreParams, Sampler,
};
use crate::error::{CliError, CliResult};
use crate::manifest::{Manifest, RunRecord};
use crate::table::{append_row, Row};

/// η used when `--sampler ddim` is given without `--eta`.
const DEFAULT_DDIM_ETA: f64 = 0.85;

pub fn make_prior(args: &MakePriorArgs) -> CliResult<()> {
    let prior = image_pattern_prior(&args.dim.0, args.patterns, args.scale, args.seed)?;
    write_gmm1(&args.out, &prior)?;
    println!(
        "wrote {} ({} patterns, shape {:?})",
        args.out.display(),
        prior.components(),
        prior.shape()
    );
    Ok(())
}

pub fn degrade(args: &DegradeArgs) -> CliResult<()> {
    if !(args.sigma_y >= 0.0 && args.sigma_y.is_finite()) {
        return Err(CliError::Usage(format!(
            "--sigma-y must be nonnegative, got {}",
            args.sigma_y
        )));
    }
    let x = read_ten1(&args.input)?;
    let op = build_from_text(&args.op, x.shape())?;
    let mut y = op.apply(&x)?;
    if args.sigma_y > 0.0 {
        let z = gaussian_sample(&mut RngStream::new(args.seed, 0), y.shape())?;
        y = y.lincomb(1.0, &z, args.sigma_y)?;
    }
    write_ten1(&args.out, &y)?;
    let preview = write_preview(&args.out, &y)?;
    println!(
        "wrote {} shape {:?}{}",
        args.out.display(),
        y.shape(),
        preview
            .map(|p| format!(", preview {}", p.display()))
            .unwrap_or_default()
    );
    Ok(())
}

/// Writes a PGM/PPM next to `ten_path` when `t` is a 1- or 3-channel image.
fn write_preview(ten_path: &Path, t: &Tensor) -> CliResult<Option<PathBuf>> {
    let ext = match t.image_dims() {
        Some((1, _, _)) => "pgm",
        Some((3, _, _)) => "ppm",
        _ => return Ok(None),
    };
    let path = ten_path.with_extension(ext);
    write_image(&path, t, 1.0)?;
    Ok(Some(path))
}

/// Inputs shared by every seed of a restore run.
struct Setup {
    schedule: DiffusionSchedule,
    denoiser: AnalyticGmm,
    shape: Vec<usize>,
    op: Option<LinearOperator>,
    y: Option<Tensor>,
    factors: Option<Arc<SvdFactors>>,
    plan: Option<TilePlan>,
    tt: TimeTravelParams,
}

fn needs(what: &str, method: Method) -> CliError {
    CliError::Usage(format!("--{what} is required for --method {}", method.name()))
}

fn setup(p: &RestoreParams) -> CliResult<Setup> {
    let schedule = DiffusionSchedule::linear(p.t, p.beta_start, p.beta_end)?;
    let prior = read_gmm1(&p.prior)?;
    let shape = match &p.shape {
        Some(d) => d.0.clone(),
        None => square_image_shape(prior.dim()),
    };
    let tiled = p.tile.is_some() || p.shift.is_some();
    if tiled && p.method != Method::Ddnm {
        return Err(CliError::Core(ddnm_core::Error::Incompatible(format!(
            "Mask-Shift tiling is only available for ddnm, not {}",
            p.method.name()
        ))));
    }
    let plan = match (p.tile, p.shift) {
        (Some(tile), Some(shift)) => {
            let mode = match p.padding {
                Padding::RightAlign => PadMode::RightAlign,
                Padding::ZeroPad => PadMode::ZeroPad,
            };
            Some(plan_tiles(&shape, tile, shift, mode)?)
        }
        (None, None) => None,
        _ => return Err(CliError::Usage("--tile and --shift go together".into())),
    };
    let prior_shape = match &plan {
        Some(plan) => vec![plan.channels, plan.tile, plan.tile],
        None => shape.clone(),
    };
    let prior = prior.with_shape(&prior_shape)?;

    let (op, y) = if p.method == Method::Ddpm {
        (None, None)
    } else {
        let spec = p.op.as_deref().ok_or_else(|| needs("op", p.method))?;
        let y_path = p.y.as_ref().ok_or_else(|| needs("y", p.method))?;
        (Some(build_from_text(spec, &shape)?), Some(read_ten1(y_path)?))
    };
    let factors = match (&op, p.method) {
        (Some(op), Method::Ddrm) => Some(op.svd()?),
        (Some(op), Method::DdnmPlus) if p.spectral => Some(op.svd()?),
        _ => None,
    };
    if p.spectral && p.method != Method::DdnmPlus {
        return Err(CliError::Usage("--spectral applies to ddnm-plus only".into()));
    }
    Ok(Setup {
        schedule,
        denoiser: AnalyticGmm::new(prior),
        shape,
        op,
        y,
        factors,
        plan,
        tt: TimeTravelParams::new(p.l, p.s, p.r)?,
    })
}

/// GMM1 files carry only the dimension: `3*s*s` reads as `[3,s,s]`, `s*s` as `[1,s,s]`.
pub fn square_image_shape(dim: usize) -> Vec<usize> {
    let side = |n: usize| {
        let s = (n as f64).sqrt().round() as usize;
        (s * s == n).then_some(s)
    };
    if dim % 3 == 0 {
        if let Some(s) = side(dim / 3) {
            return vec![3, s, s];
        }
    }
    match side(dim) {
        Some(s) => vec![1, s, s],
        None => vec![dim],
    }
}

fn sampler_params(p: &RestoreParams, seed: u64) -> SamplerParams {
    let steps = p.steps.unwrap_or(p.t);
    let sampler = p
        .sampler
        .unwrap_or(if p.eta.is_some() { Sampler::Ddim } else { Sampler::Ddpm });
    match sampler {
        Sampler::Ddpm => SamplerParams::ddpm(steps, seed),
        Sampler::Ddim => SamplerParams::ddim(steps, p.eta.unwrap_or(DEFAULT_DDIM_ETA), seed),
    }
}

fn run_one(p: &RestoreParams, s: &Setup, seed: u64) -> CliResult<Tensor> {
    let params = sampler_params(p, seed);
    let d = &s.denoiser;
    let problem = || -> CliResult<RestorationProblem> {
        let (op, y) = (
            s.op.clone().expect("checked in setup"),
            s.y.clone().expect("checked in setup"),
        );
        Ok(RestorationProblem::new(op, y, p.sigma_y)?)
    };
    let out = match p.method {
        Method::Ddnm => match &s.plan {
            Some(plan) => run_mask_shift(&problem()?, d, &s.schedule, &params, plan)?,
            None => run_ddnm(&problem()?, d, &s.schedule, &params)?,
        },
        Method::DdnmPlus => run_ddnm_plus(&problem()?, d, &s.schedule, &params, &s.tt, s.factors.as_deref())?,
        Method::Ddpm => run_ddpm_uncond(d, &s.schedule, &params, &s.shape)?,
        Method::Repaint => {
            let rp = RepaintParams::constant(p.repaint_rounds)?;
            run_repaint(
                s.y.as_ref().expect("checked"),
                s.op.as_ref().expect("checked"),
                d,
                &s.schedule,
                &params,
                &rp,
            )?
        }
        Method::Ilvr => run_ilvr(
            s.y.as_ref().expect("checked"),
            s.op.as_ref().expect("checked"),
            d,
            &s.schedule,
            &params,
        )?,
        Method::Ddrm => {
            let f = s.factors.as_deref().expect("built in setup");
            run_ddrm(&problem()?, f, d, &s.schedule, &params)?
        }
    };
    Ok(out)
}

pub fn seed_path(out: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return out.to_path_buf();
    }
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-s{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-s{seed}"),
    };
    out.with_file_name(name)
}

/// Runs every seed, in parallel when `jobs > 1`. Results come back in seed order.
fn execute(p: &RestoreParams, jobs: usize) -> CliResult<Vec<(u64, Tensor, f64)>> {
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    if p.seeds.is_empty() {
        return Err(CliError::Usage("at least one --seed is required".into()));
    }
    let s = setup(p)?;
    let timed = |&seed: &u64| -> CliResult<(u64, Tensor, f64)> {
        let start = Instant::now();
        let x = run_one(p, &s, seed)?;
        Ok((seed, x, start.elapsed().as_secs_f64() * 1e3))
    };
    if jobs == 1 {
        return p.seeds.iter().map(timed).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| p.seeds.par_iter().map(timed).collect())
}

fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    std::env::current_dir()
        .map(|d| d.join(p))
        .unwrap_or_else(|_| p.to_path_buf())
}

pub fn restore(args: &RestoreArgs) -> CliResult<()> {
    let mut p = args.params.clone();
    p.prior = absolute(&p.prior);
    p.y = p.y.as_deref().map(absolute);
    p.reference = p.reference.as_deref().map(absolute);
    p.out = absolute(&p.out);

    let results = execute(&p, args.jobs)?;
    let reference = p.reference.as_ref().map(read_ten1).transpose()?;
    let op_y = match (p.method, &p.op, &p.y) {
        (Method::Ddpm | Method::Ilvr, _, _) => None,
        (_, Some(spec), Some(y)) => {
            let shape = results[0].1.shape().to_vec();
            Some((build_from_text(spec, &shape)?, read_ten1(y)?))
        }
        _ => None,
    };

    let many = p.seeds.len() > 1;
    let mut runs = Vec::with_capacity(results.len());
    for (seed, x, wall_ms) in results {
        let output = seed_path(&p.out, seed, many);
        write_ten1(&output, &x)?;
        let preview = write_preview(&output, &x)?;
        let (consistency_l1, consistency_max) = match &op_y {
            Some((op, y)) => {
                let r = op.apply(&x)?.sub(y)?;
                (Some(r.l1_norm()), Some(r.max_abs()))
            }
            None => (None, None),
        };
        let (psnr_db, ssim_v) = match &reference {
            Some(r) => (
                Some(psnr(&x, r, 1.0)?),
                x.image_dims().map(|_| ssim(&x, r)).transpose()?,
            ),
            None => (None, None),
        };
        println!(
            "{} seed {seed}: {} ({wall_ms:.1} ms{}{})",
            p.method.name(),
            output.display(),
            consistency_max
                .map(|c| format!(", |Ax-y|max {c:.2e}"))
                .unwrap_or_default(),
            psnr_db.map(|v| format!(", PSNR {v:.2} dB")).unwrap_or_default()
        );
        runs.push(RunRecord {
            seed,
            output,
            preview,
            wall_ms,
            consistency_l1,
            consistency_max,
            psnr: psnr_db,
            ssim: ssim_v,
        });
    }
    let manifest_path = args.manifest.clone().unwrap_or_else(|| p.out.with_extension("json"));
    Manifest::new(p, runs).write(&manifest_path)?;
    println!("manifest {}", manifest_path.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let reference = read_ten1(&args.reference)?;
    let out = read_ten1(&args.out)?;
    let manifest = args.manifest.as_deref().map(Manifest::read).transpose()?;
    let run = manifest.as_ref().and_then(|m| {
        let out = absolute(&args.out);
        m.runs.iter().find(|r| r.output == out)
    });

    let cons_l1 = match (&args.op, &args.y) {
        (Some(spec), Some(y)) => Some(consistency(&build_from_text(spec, out.shape())?, &out, &read_ten1(y)?)?),
        (None, None) => None,
        _ => return Err(CliError::Usage("--op and --y go together".into())),
    };
    let row = Row {
        id: args.id.clone().unwrap_or_else(|| {
            args.out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
        method: args
            .method
            .clone()
            .or_else(|| manifest.as_ref().map(|m| m.params.method.name().to_string()))
            .unwrap_or_default(),
        psnr: psnr(&out, &reference, 1.0)?,
        ssim: out.image_dims().map(|_| ssim(&out, &reference)).transpose()?,
        cons_l1,
        wall_ms: args.wall_ms.or(run.map(|r| r.wall_ms)),
        seed: args.seed.or(run.map(|r| r.seed)),
    };
    append_row(&args.csv, &row)?;
    println!(
        "{}: PSNR {:.2} dB{}{}",
        row.id,
        row.psnr,
        row.ssim.map(|s| format!(", SSIM {s:.4}")).unwrap_or_default(),
        row.cons_l1.map(|c| format!(", cons {c:.3e}")).unwrap_or_default()
    );
    Ok(())
}

fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.as_slice()
            .iter()
            .zip(b.as_slice())
            .all(|(u, v)| u.to_bits() == v.to_bits())
}

pub fn replay(args: &ReplayArgs) -> CliResult<()> {
    let manifest = Manifest::read(&args.manifest)?;
    let results = execute(&manifest.params, 1)?;
    let scratch = match &args.out_dir {
        Some(_) => None,
        None => Some(tempfile::tempdir().map_err(|e| CliError::io(std::env::temp_dir(), e))?),
    };
    let dir = args
        .out_dir
        .as_deref()
        .or(scratch.as_ref().map(|d| d.path()))
        .expect("one is set");
    let mut differing = Vec::new();
    for ((seed, x, _), run) in results.iter().zip(&manifest.runs) {
        let name = run
            .output
            .file_name()
            .map(PathBuf::from)
            .unwrap_or_else(|| format!("s{seed}.ten").into());
        write_ten1(dir.join(&name), x)?;
        let recorded = read_ten1(&run.output)?;
        let same = bitwise_eq(x, &recorded);
        println!("seed {seed}: {}", if same { "identical" } else { "differs" });
        if !same {
            differing.push(*seed);
        }
    }
    if results.len() != manifest.runs.len() {
        return Err(CliError::Mismatch(format!(
            "manifest lists {} runs, replay produced {}",
            manifest.runs.len(),
            results.len()
        )));
    }
    if !differing.is_empty() {
        return Err(CliError::Mismatch(format!(
            "seeds {differing:?} differ from the recorded outputs"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_paths() {
        assert_eq!(seed_path(Path::new("a/x.ten"), 3, false), PathBuf::from("a/x.ten"));
        assert_eq!(seed_path(Path::new("a/x.ten"), 3, true), PathBuf::from("a/x-s3.ten"));
        assert_eq!(seed_path(Path::new("x"), 4, true), PathBuf::from("x-s4"));
    }

    #[test]
    fn square_shapes() {
        assert_eq!(square_image_shape(768), vec![3, 16, 16]);
        assert_eq!(square_image_shape(64), vec![1, 8, 8]);
        assert_eq!(square_image_shape(10), vec![10]);
        assert_eq!(square_image_shape(48), vec![3, 4, 4]);
    }
}
