use crate::error::{Error, Result};
use crate::rng::RngStream;

/// In-place fast Walsh–Hadamard transform scaled by `1/sqrt(n)` (orthonormal, self-inverse).
pub fn fwht_normalized(x: &mut [f64]) {
    let n = x.len();
    assert!(n.is_power_of_two(), "FWHT length must be a power of two");
    let mut h = 1;
    while h < n {
        for block in x.chunks_exact_mut(2 * h) {
            let (lo, hi) = block.split_at_mut(h);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let (u, v) = (*a, *b);
                *a = u + v;
                *b = u - v;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f64).sqrt();
    x.iter_mut().for_each(|v| *v *= scale);
}

/// Row subset of the normalized Walsh–Hadamard matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct WalshRows {
    dim: usize,
    rows: Vec<usize>,
}

impl WalshRows {
    /// Keeps `ceil(ratio * dim)` rows chosen by a permutation drawn from `(seed, 0)`,
    /// stored in ascending order.
    pub fn new(dim: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !dim.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "Walsh dimension {dim} is not a power of two"
            )));
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidParameter(format!("Walsh ratio {ratio} outside (0, 1]")));
        }
        let m = ((ratio * dim as f64).ceil() as usize).clamp(1, dim);
        let mut rows = RngStream::new(seed, 0).permutation(dim);
        rows.truncate(m);
        rows.sort_unstable();
        Ok(Self { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut w = x.to_vec();
        fwht_normalized(&mut w);
        self.rows.iter().map(|&r| w[r]).collect()
    }

    /// `Aᵀ y`; also the pseudo-inverse since the rows are orthonormal.
    pub fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for (&r, &v) in self.rows.iter().zip(y) {
            w[r] = v;
        }
        fwht_normalized(&mut w);
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_is_orthonormal_involution() {
        let x: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let mut y = x.clone();
        fwht_normalized(&mut y);
        let energy = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        assert!((energy(&x) - energy(&y)).abs() < 1e-12);
        fwht_normalized(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn hadamard_four_rows() {
        let mut e1 = vec![0.0, 1.0, 0.0, 0.0];
        fwht_normalized(&mut e1);
        assert_eq!(e1, vec![0.5, -0.5, 0.5, -0.5]);
    }

    #[test]
    fn row_count_and_validation() {
        let w = WalshRows::new(256, 0.25, 3).unwrap();
        assert_eq!(w.rows().len(), 64);
        assert!(w.rows().windows(2).all(|p| p[0] < p[1]));
        assert_eq!(WalshRows::new(256, 0.25, 3).unwrap(), w);
        assert_eq!(WalshRows::new(8, 0.3, 1).unwrap().rows().len(), 3);
        assert!(WalshRows::new(12, 0.5, 1).is_err());
        assert!(WalshRows::new(8, 0.0, 1).is_err());
    }

    #[test]
    fn rows_are_orthonormal() {
        let w = WalshRows::new(32, 0.5, 9).unwrap();
        let m = w.rows().len();
        for i in 0..m {
            let mut e = vec![0.0; m];
            e[i] = 1.0;
            let back = w.apply(&w.adjoint(&e));
            for (j, v) in back.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-14);
            }
        }
    }
}
