//! Mask-Shift restoration of images larger than the sampler's native size.
//!
//! Tiles are processed row-major. Pixels a tile shares with tiles already finished are
//! pinned: after every rectification the tile's estimate is overwritten there with the
//! finished values, so neighbouring outputs agree exactly on their overlap.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::linop::Window;
use crate::rng::RngStream;
use crate::sampler::{run_ddnm_stream, RestorationProblem, SamplerParams, StepHook};
use crate::schedule::DiffusionSchedule;
use crate::tensor::Tensor;

/// How the last tile meets a size that is not `tile + k * shift`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    /// Shift the last tile left (or up) so it ends at the border.
    #[default]
    RightAlign,
    /// Zero-pad the canvas up to the next regular size and crop at the end.
    ZeroPad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub window: Window,
    /// Leading columns shared with the tile to the left.
    pub left_overlap: usize,
    /// Leading rows shared with the tile above.
    pub top_overlap: usize,
}

impl Segment {
    /// Whether tile-local pixel `(r, c)` is pinned.
    pub fn is_pinned(&self, r: usize, c: usize) -> bool {
        r < self.top_overlap || c < self.left_overlap
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TilePlan {
    pub tile: usize,
    pub shift: usize,
    pub channels: usize,
    /// Target size.
    pub height: usize,
    pub width: usize,
    /// Canvas size; larger than the target only under [`PadMode::ZeroPad`].
    pub padded_height: usize,
    pub padded_width: usize,
    pub segments: Vec<Segment>,
}

/// Tile offsets along one axis of length `len`, and the canvas length.
pub fn axis_positions(len: usize, tile: usize, shift: usize, mode: PadMode) -> Result<(Vec<usize>, usize)> {
    if tile == 0 || shift == 0 || shift > tile {
        return Err(Error::InvalidParameter(format!(
            "need 0 < shift <= tile, got shift {shift} and tile {tile}"
        )));
    }
    if shift == tile && len > tile {
        return Err(Error::InvalidParameter("tiles must overlap: shift equals tile".into()));
    }
    if len < tile {
        return Err(Error::InvalidParameter(format!(
            "size {len} is smaller than the tile {tile}"
        )));
    }
    if len == tile {
        return Ok((vec![0], len));
    }
    let padded = match mode {
        PadMode::RightAlign => len,
        PadMode::ZeroPad => tile + (len - tile).div_ceil(shift) * shift,
    };
    let mut pos = Vec::new();
    let mut p = 0;
    loop {
        if p + tile >= padded {
            pos.push(padded - tile);
            break;
        }
        pos.push(p);
        p += shift;
    }
    Ok((pos, padded))
}

/// Row-major plan of square `tile x tile` windows over a `[C,H,W]` target.
pub fn plan_tiles(target_shape: &[usize], tile: usize, shift: usize, mode: PadMode) -> Result<TilePlan> {
    let (channels, height, width) = match *target_shape {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidParameter(format!(
                "tiling needs an image shape [C,H,W], got {target_shape:?}"
            )))
        }
    };
    let (rows, padded_height) = axis_positions(height, tile, shift, mode)?;
    let (cols, padded_width) = axis_positions(width, tile, shift, mode)?;
    let mut segments = Vec::with_capacity(rows.len() * cols.len());
    for (ri, &row) in rows.iter().enumerate() {
        for (ci, &col) in cols.iter().enumerate() {
            let top_overlap = if ri == 0 { 0 } else { rows[ri - 1] + tile - row };
            let left_overlap = if ci == 0 { 0 } else { cols[ci - 1] + tile - col };
            segments.push(Segment {
                window: Window {
                    row,
                    col,
                    height: tile,
                    width: tile,
                },
                left_overlap,
                top_overlap,
            });
        }
    }
    Ok(TilePlan {
        tile,
        shift,
        channels,
        height,
        width,
        padded_height,
        padded_width,
        segments,
    })
}

/// Final image plus every tile's own output, in plan order.
#[derive(Clone, Debug)]
pub struct MaskShiftOutput {
    pub image: Tensor,
    pub tiles: Vec<Tensor>,
}

pub fn run_mask_shift(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    plan: &TilePlan,
) -> Result<Tensor> {
    Ok(run_mask_shift_traced(problem, denoiser, schedule, params, plan)?.image)
}

pub fn run_mask_shift_traced(
    problem: &RestorationProblem,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    params: &SamplerParams,
    plan: &TilePlan,
) -> Result<MaskShiftOutput> {
    problem.validate()?;
    let target = [plan.channels, plan.height, plan.width];
    if problem.op.in_shape() != target {
        return Err(Error::Incompatible(format!(
            "plan covers {target:?} but the operator takes {:?}",
            problem.op.in_shape()
        )));
    }
    let canvas_shape = [plan.channels, plan.padded_height, plan.padded_width];
    let padded = canvas_shape != target;
    let op = if padded {
        problem.op.pad_to(&canvas_shape)?
    } else {
        problem.op.clone()
    };
    let y = if padded {
        pad_image(&problem.y, op.out_shape())?
    } else {
        problem.y.clone()
    };
    let (yc, yh, yw) = image3(op.out_shape())?;

    let (c, ph, pw) = (plan.channels, plan.padded_height, plan.padded_width);
    let mut canvas = vec![0.0; c * ph * pw];
    let base = RngStream::new(params.seed, 0);
    let mut tiles = Vec::with_capacity(plan.segments.len());
    for (i, seg) in plan.segments.iter().enumerate() {
        let (sub_op, out_win) = op.restrict(seg.window)?;
        let sub_y = crop(y.as_slice(), (yc, yh, yw), out_win);
        let sub = RestorationProblem::new(
            sub_op,
            Tensor::new(sub_y, vec![yc, out_win.height, out_win.width])?,
            problem.sigma_y,
        )?;
        let w = seg.window;
        let pinned = crop(&canvas, (c, ph, pw), w);
        let mut hook = Pin {
            seg: *seg,
            channels: c,
            values: pinned,
        };
        let rng = if i == 0 { base.clone() } else { base.child(i as u64) };
        let out = run_ddnm_stream(&sub, denoiser, schedule, params, rng, &mut hook)?;
        let data = out.as_slice();
        for ch in 0..c {
            for r in 0..w.height {
                for col in 0..w.width {
                    if seg.is_pinned(r, col) {
                        continue;
                    }
                    canvas[ch * ph * pw + (w.row + r) * pw + w.col + col] =
                        data[ch * w.height * w.width + r * w.width + col];
                }
            }
        }
        tiles.push(out);
    }

    let full = Window {
        row: 0,
        col: 0,
        height: plan.height,
        width: plan.width,
    };
    let image = Tensor::new(crop(&canvas, (c, ph, pw), full), target.to_vec())?;
    Ok(MaskShiftOutput { image, tiles })
}

struct Pin {
    seg: Segment,
    channels: usize,
    values: Vec<f64>,
}

impl StepHook for Pin {
    fn rectified(&mut self, _t: usize, x0hat: &mut Tensor) -> Result<()> {
        if self.seg.left_overlap == 0 && self.seg.top_overlap == 0 {
            return Ok(());
        }
        let (h, w) = (self.seg.window.height, self.seg.window.width);
        let mut data = x0hat.as_slice().to_vec();
        for ch in 0..self.channels {
            for r in 0..h {
                for c in 0..w {
                    if self.seg.is_pinned(r, c) {
                        let i = ch * h * w + r * w + c;
                        data[i] = self.values[i];
                    }
                }
            }
        }
        *x0hat = Tensor::new(data, vec![self.channels, h, w])?;
        Ok(())
    }
}

fn image3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Incompatible(format!(
            "tiling needs image-shaped outputs, got {shape:?}"
        ))),
    }
}

fn crop(data: &[f64], (c, h, w): (usize, usize, usize), win: Window) -> Vec<f64> {
    debug_assert!(win.row + win.height <= h && win.col + win.width <= w);
    let mut out = Vec::with_capacity(c * win.height * win.width);
    for ch in 0..c {
        for r in win.row..win.row + win.height {
            let start = ch * h * w + r * w + win.col;
            out.extend_from_slice(&data[start..start + win.width]);
        }
    }
    out
}

/// Places `y` in the top-left corner of a zero image of `shape`.
fn pad_image(y: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (c, h, w) = image3(y.shape())?;
    let (pc, ph, pw) = image3(shape)?;
    if pc != c || ph < h || pw < w {
        return Err(Error::Incompatible(format!("cannot pad {:?} to {shape:?}", y.shape())));
    }
    let mut out = vec![0.0; pc * ph * pw];
    for ch in 0..c {
        for r in 0..h {
            let src = ch * h * w + r * w;
            let dst = ch * ph * pw + r * pw;
            out[dst..dst + w].copy_from_slice(&y.as_slice()[src..src + w]);
        }
    }
    Tensor::new(out, shape.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{image_pattern_prior, AnalyticGmm};
    use crate::linop::{build_from_text, LinearOperator};
    use crate::rng::gaussian_sample;
    use crate::sampler::run_ddnm;

    #[test]
    fn seven_segments_for_the_walkthrough() {
        let (pos, padded) = axis_positions(256, 64, 32, PadMode::RightAlign).unwrap();
        assert_eq!(pos, vec![0, 32, 64, 96, 128, 160, 192]);
        assert_eq!(padded, 256);
        let plan = plan_tiles(&[3, 64, 256], 64, 32, PadMode::RightAlign).unwrap();
        assert_eq!(plan.segments.len(), 7);
        assert!(plan.segments[1..]
            .iter()
            .all(|s| s.left_overlap == 32 && s.top_overlap == 0));
    }

    #[test]
    fn single_tile() {
        let (pos, _) = axis_positions(64, 64, 32, PadMode::RightAlign).unwrap();
        assert_eq!(pos, vec![0]);
    }

    #[test]
    fn indivisible_width_right_aligns() {
        let (pos, padded) = axis_positions(250, 64, 32, PadMode::RightAlign).unwrap();
        assert_eq!(pos, vec![0, 32, 64, 96, 128, 160, 186]);
        assert_eq!(padded, 250);
        assert_eq!(pos[5] + 64 - pos[6], 38);
        let (pos, padded) = axis_positions(250, 64, 32, PadMode::ZeroPad).unwrap();
        assert_eq!(padded, 256);
        assert_eq!(*pos.last().unwrap(), 192);
    }

    #[test]
    fn bad_geometry() {
        assert!(axis_positions(100, 32, 40, PadMode::RightAlign).is_err());
        assert!(axis_positions(16, 32, 8, PadMode::RightAlign).is_err());
        assert!(axis_positions(64, 32, 32, PadMode::RightAlign).is_err());
    }

    #[test]
    fn two_d_plan_pins_top_and_left() {
        let plan = plan_tiles(&[1, 12, 12], 8, 4, PadMode::RightAlign).unwrap();
        assert_eq!(plan.segments.len(), 4);
        let s = plan.segments[3];
        assert_eq!(
            (s.window.row, s.window.col, s.top_overlap, s.left_overlap),
            (4, 4, 4, 4)
        );
        assert!(s.is_pinned(0, 7) && s.is_pinned(7, 0) && !s.is_pinned(4, 4));
    }

    fn setup(shape: [usize; 3], spec: &str) -> (AnalyticGmm, DiffusionSchedule, RestorationProblem) {
        let prior = image_pattern_prior(&[shape[0], 8, 8], 4, 0.05, 1).unwrap();
        let big = image_pattern_prior(&shape, 4, 0.05, 2).unwrap();
        let truth = crate::denoiser::gmm_sample(&big, &mut RngStream::new(3, 0));
        let op = build_from_text(spec, &shape).unwrap();
        let y = op.apply(&truth).unwrap();
        (
            AnalyticGmm::new(prior),
            DiffusionSchedule::linear(50, 1e-4, 0.05).unwrap(),
            RestorationProblem::new(op, y, 0.0).unwrap(),
        )
    }

    #[test]
    fn single_tile_equals_ddnm() {
        let (d, s, p) = setup([1, 8, 8], "avgpool:2");
        let params = SamplerParams::ddpm(50, 4);
        let plan = plan_tiles(&[1, 8, 8], 8, 4, PadMode::RightAlign).unwrap();
        let a = run_mask_shift(&p, &d, &s, &params, &plan).unwrap();
        let b = run_ddnm(&p, &d, &s, &params).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn overlaps_agree_and_result_is_consistent() {
        let (d, s, p) = setup([1, 8, 16], "avgpool:2");
        let params = SamplerParams::ddim(20, 0.85, 4);
        let plan = plan_tiles(&[1, 8, 16], 8, 4, PadMode::RightAlign).unwrap();
        let out = run_mask_shift_traced(&p, &d, &s, &params, &plan).unwrap();
        assert_eq!(out.tiles.len(), 3);
        for k in 1..3 {
            let (a, b) = (out.tiles[k - 1].as_slice(), out.tiles[k].as_slice());
            for r in 0..8 {
                for c in 0..4 {
                    assert_eq!(a[r * 8 + 4 + c].to_bits(), b[r * 8 + c].to_bits());
                }
            }
        }
        let resid = p.op.apply(&out.image).unwrap().sub(&p.y).unwrap().max_abs();
        assert!(resid <= 1e-6, "{resid}");
    }

    #[test]
    fn zero_padding_crops_back() {
        let (d, s, _) = setup([1, 8, 8], "identity");
        let op = LinearOperator::mask(&[1, 8, 10], (0..80).map(|i| i % 3 != 0).collect()).unwrap();
        let truth = gaussian_sample(&mut RngStream::new(1, 0), &[1, 8, 10]).unwrap();
        let y = op.apply(&truth).unwrap();
        let p = RestorationProblem::new(op, y, 0.0).unwrap();
        let plan = plan_tiles(&[1, 8, 10], 8, 4, PadMode::ZeroPad).unwrap();
        assert_eq!(plan.padded_width, 12);
        let out = run_mask_shift(&p, &d, &s, &SamplerParams::ddpm(50, 1), &plan).unwrap();
        assert_eq!(out.shape(), &[1, 8, 10]);
        assert!(p.op.apply(&out).unwrap().sub(&p.y).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn untileable_operator() {
        let (d, s, _) = setup([1, 8, 8], "identity");
        let op = build_from_text("blur:gauss:3:1.0", &[1, 8, 16]).unwrap();
        let p = RestorationProblem::new(op, Tensor::zeros(&[1, 8, 16]).unwrap(), 0.0).unwrap();
        let plan = plan_tiles(&[1, 8, 16], 8, 4, PadMode::RightAlign).unwrap();
        assert!(matches!(
            run_mask_shift(&p, &d, &s, &SamplerParams::ddpm(10, 0), &plan),
            Err(Error::Incompatible(_))
        ));
    }
}
