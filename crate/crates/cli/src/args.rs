use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(
    name = "ddnm",
    version,
    about = "Zero-shot diffusion restoration of linear inverse problems"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a Gaussian-mixture prior of image patterns.
    MakePrior(MakePriorArgs),
    /// Apply an operator and add seeded Gaussian noise.
    Degrade(DegradeArgs),
    /// Run a restoration method and write the result with a JSON manifest.
    Restore(RestoreArgs),
    /// Score a restoration and append a CSV row.
    Eval(EvalArgs),
    /// Re-run a manifest and compare the outputs bitwise.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
pub struct MakePriorArgs {
    /// Image shape as CxHxW, e.g. 3x16x16.
    #[arg(long, value_parser = parse_dims)]
    pub dim: Dims,
    #[arg(long, default_value_t = 8)]
    pub patterns: usize,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    /// Operator spec, e.g. `avgpool:4` or `compose(mask:m.pgm,grayscale,avgpool:4)`.
    #[arg(long)]
    pub op: String,
    /// Clean image (TEN1).
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub sigma_y: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ddnm,
    DdnmPlus,
    Ddpm,
    Repaint,
    Ilvr,
    Ddrm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ddnm => "ddnm",
            Method::DdnmPlus => "ddnm-plus",
            Method::Ddpm => "ddpm",
            Method::Repaint => "repaint",
            Method::Ilvr => "ilvr",
            Method::Ddrm => "ddrm",
        }
    }
}

#[derive(ValueEnum, Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    Ddpm,
    Ddim,
}

#[derive(ValueEnum, Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    #[default]
    RightAlign,
    ZeroPad,
}

/// Everything that determines a restoration's output. Serialized verbatim into the manifest.
#[derive(Args, Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RestoreParams {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Operator spec; the filter for `ilvr`. Not needed for `ddpm`.
    #[arg(long)]
    pub op: Option<String>,
    /// Observation (TEN1); the reference image for `ilvr`.
    #[arg(long)]
    pub y: Option<PathBuf>,
    /// GMM1 prior file.
    #[arg(long)]
    pub prior: PathBuf,
    /// Schedule length.
    #[arg(long = "T", default_value_t = 1000)]
    pub t: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.02)]
    pub beta_end: f64,
    /// Sampling steps; defaults to the schedule length.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Update rule; defaults to `ddim` when `--eta` is given and `ddpm` otherwise.
    #[arg(long, value_enum)]
    pub sampler: Option<Sampler>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub sigma_y: f64,
    /// Time-travel length (0 disables).
    #[arg(long, default_value_t = 0)]
    pub l: usize,
    /// Time-travel interval.
    #[arg(long, default_value_t = 1)]
    pub s: usize,
    /// Time-travel repeats.
    #[arg(long, default_value_t = 1)]
    pub r: usize,
    /// Use per-singular-value noise scaling (needs a materializable operator).
    #[arg(long)]
    pub spectral: bool,
    /// Resampling rounds per step for `repaint`.
    #[arg(long, default_value_t = 1)]
    pub repaint_rounds: usize,
    /// Restored image shape as CxHxW; defaults to the prior's shape.
    #[arg(long, value_parser = parse_dims)]
    pub shape: Option<Dims>,
    /// Tile size for Mask-Shift restoration (`ddnm` only).
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub shift: Option<usize>,
    #[arg(long, value_enum, default_value_t = Padding::RightAlign)]
    pub padding: Padding,
    /// Seeds; each one is an independent run. Repeat the flag for several.
    #[arg(long = "seed", default_value = "0")]
    pub seeds: Vec<u64>,
    /// Output TEN1; with several seeds `-s<seed>` is inserted before the extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground truth for PSNR/SSIM in the manifest.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[command(flatten)]
    pub params: RestoreParams,
    /// Manifest path; defaults to the output path with a `.json` extension.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Restored image (TEN1).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long)]
    pub y: Option<PathBuf>,
    #[arg(long)]
    pub csv: PathBuf,
    /// Manifest to take method, seed and timing from.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub wall_ms: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Directory for the replayed outputs; defaults to a temporary directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

/// Shape written as `CxHxW`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(transparent)]
pub struct Dims(pub Vec<usize>);

pub fn parse_dims(text: &str) -> Result<Dims, String> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad dimension `{p}` in `{text}`"))
        })
        .collect::<Result<_, _>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(format!("dimensions must be positive: `{text}`"));
    }
    Ok(Dims(dims))
}
