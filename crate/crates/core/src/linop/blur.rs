//! Blur kernels and their circulant matrices.

use crate::error::{Error, Result};
use crate::linop::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BlurKind {
    /// Isotropic Gaussian with standard deviation `width`.
    Gauss {
        width: f64,
    },
    Uniform,
    /// Axis-aligned Gaussian; `width_x` along columns, `width_y` along rows.
    Aniso {
        width_x: f64,
        width_y: f64,
    },
}

/// `size x size` kernel normalized to sum 1, row-major.
pub fn kernel(kind: BlurKind, size: usize) -> Result<Vec<f64>> {
    if size == 0 {
        return Err(Error::InvalidParameter("blur kernel size must be positive".into()));
    }
    let (wx, wy) = match kind {
        BlurKind::Gauss { width } => (width, width),
        BlurKind::Aniso { width_x, width_y } => (width_x, width_y),
        BlurKind::Uniform => return Ok(vec![1.0 / (size * size) as f64; size * size]),
    };
    if !(wx > 0.0 && wy > 0.0 && wx.is_finite() && wy.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "blur widths must be positive, got {wx} and {wy}"
        )));
    }
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|idx| {
            let dy = (idx / size) as f64 - c;
            let dx = (idx % size) as f64 - c;
            (-(dx * dx) / (2.0 * wx * wx) - (dy * dy) / (2.0 * wy * wy)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Circular convolution of an `h x w` plane with `kernel`, as an `hw x hw` matrix.
pub fn circulant_matrix(kernel: &[f64], size: usize, h: usize, w: usize) -> Matrix {
    let n = h * w;
    let center = size / 2;
    let mut m = Matrix::zeros(n, n);
    for r in 0..h {
        for c in 0..w {
            let out = r * w + c;
            for ki in 0..size {
                let rr = (r + h * size + ki - center) % h;
                for kj in 0..size {
                    let cc = (c + w * size + kj - center) % w;
                    m[(out, rr * w + cc)] += kernel[ki * size + kj];
                }
            }
        }
    }
    m
}
