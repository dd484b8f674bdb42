//! Image quality and data consistency scores.

use crate::error::{Error, Result};
use crate::linop::LinearOperator;
use crate::tensor::Tensor;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 8;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Incompatible(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for signals of range `peak`.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    same_shape(x, reference)?;
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidParameter(format!("peak {peak} must be positive")));
    }
    if x.is_empty() {
        return Err(Error::InvalidParameter("psnr of an empty tensor".into()));
    }
    let mse = x
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if !mse.is_finite() {
        return Err(Error::Domain("non-finite error in psnr".into()));
    }
    if mse < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over 8x8 uniform windows (stride 1) and channels, for images in `[0, 1]`.
///
/// Planes smaller than the window use a single window covering the whole plane.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    same_shape(x, reference)?;
    let (c, h, w) = x
        .image_dims()
        .ok_or_else(|| Error::InvalidParameter(format!("ssim needs [C,H,W], got {:?}", x.shape())))?;
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (a, b) = (x.as_slice(), reference.as_slice());
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let plane = ch * h * w;
        for r0 in 0..=h - wh {
            for c0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in r0..r0 + wh {
                    for col in c0..c0 + ww {
                        let (p, q) = (a[plane + r * w + col], b[plane + r * w + col]);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidParameter("ssim of an empty image".into()));
    }
    let s = total / count as f64;
    if !s.is_finite() {
        return Err(Error::Domain("non-finite ssim".into()));
    }
    Ok(s)
}

/// `||A x - y||_1`.
pub fn consistency(op: &LinearOperator, x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(op.apply(x)?.sub(y)?.l1_norm())
}
