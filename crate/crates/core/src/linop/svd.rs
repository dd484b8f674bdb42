//! Dense SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! The shorter side of the matrix is orthogonalized column by column. The rotation
//! product gives one orthogonal factor. The normalized columns give the thin part of
//! the other, which is then completed to a full orthogonal basis with Householder
//! reflectors.

use crate::error::{Error, Result};
use crate::linop::matrix::Matrix;

/// Relative off-diagonal tolerance `|<a_j, a_k>| / (|a_j| |a_k|)`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 100;
/// Largest `d * D` materialized densely.
pub const MAX_DENSE_ENTRIES: usize = 1 << 22;
/// Singular values at or below this fraction of the largest count as zero.
pub const DEFAULT_ZERO_THRESHOLD: f64 = 1e-8;

/// `A = U diag(singulars) Vᵀ` with `U` d×d, `V` D×D, singulars nonincreasing.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Matrix,
    pub singulars: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn out_dim(&self) -> usize {
        self.u.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.v.rows()
    }

    pub fn max_singular(&self) -> f64 {
        self.singulars.first().copied().unwrap_or(0.0)
    }

    /// Singular value of V-column `i`; indices past `min(d, D)` are zero.
    pub fn singular(&self, i: usize) -> f64 {
        self.singulars.get(i).copied().unwrap_or(0.0)
    }

    /// Singulars extended with zeros to length D, one per column of `V`.
    pub fn padded_singulars(&self) -> Vec<f64> {
        (0..self.in_dim()).map(|i| self.singular(i)).collect()
    }

    pub fn reconstruct(&self) -> Matrix {
        let (d, dd) = (self.out_dim(), self.in_dim());
        let mut out = Matrix::zeros(d, dd);
        for (i, &s) in self.singulars.iter().enumerate() {
            if s == 0.0 {
                continue;
            }
            for r in 0..d {
                let us = self.u[(r, i)] * s;
                if us == 0.0 {
                    continue;
                }
                for c in 0..dd {
                    out[(r, c)] += us * self.v[(c, i)];
                }
            }
        }
        out
    }

    /// `max(|UᵀU - I|, |VᵀV - I|)`
    pub fn orthogonality_error(&self) -> f64 {
        let gram_err = |m: &Matrix| {
            let g = m.transpose().matmul(m);
            g.max_abs_diff(&Matrix::identity(m.cols()))
        };
        gram_err(&self.u).max(gram_err(&self.v))
    }

    /// Factors of `blockdiag(A, ..., A)` with `blocks` copies, given factors of `A`.
    pub fn block_diagonal(&self, blocks: usize) -> SvdFactors {
        let (db, big_db) = (self.out_dim(), self.in_dim());
        let r = self.singulars.len();
        let mut order: Vec<(usize, usize)> = (0..blocks).flat_map(|b| (0..r).map(move |i| (b, i))).collect();
        // Stable sort keeps block order among equal singular values.
        order.sort_by(|a, b| self.singulars[b.1].total_cmp(&self.singulars[a.1]));

        let mut u = Matrix::zeros(blocks * db, blocks * db);
        let mut v = Matrix::zeros(blocks * big_db, blocks * big_db);
        let mut singulars = Vec::with_capacity(blocks * r);
        for (j, &(b, i)) in order.iter().enumerate() {
            singulars.push(self.singulars[i]);
            for row in 0..db {
                u[(b * db + row, j)] = self.u[(row, i)];
            }
            for row in 0..big_db {
                v[(b * big_db + row, j)] = self.v[(row, i)];
            }
        }
        let mut j = order.len();
        for b in 0..blocks {
            for i in r..db {
                for row in 0..db {
                    u[(b * db + row, j)] = self.u[(row, i)];
                }
                j += 1;
            }
        }
        let mut j = order.len();
        for b in 0..blocks {
            for i in r..big_db {
                for row in 0..big_db {
                    v[(b * big_db + row, j)] = self.v[(row, i)];
                }
                j += 1;
            }
        }
        SvdFactors { u, singulars, v }
    }
}

pub fn check_dense_size(rows: usize, cols: usize) -> Result<()> {
    match rows.checked_mul(cols) {
        Some(n) if n <= MAX_DENSE_ENTRIES => Ok(()),
        _ => Err(Error::SizeLimit {
            rows,
            cols,
            cap: MAX_DENSE_ENTRIES,
        }),
    }
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    let (m, n) = (a.rows(), a.cols());
    check_dense_size(m, n)?;
    let tall = m >= n;
    // Work on the orientation whose columns are the shorter side.
    let mut cols: Vec<Vec<f64>> = if tall {
        (0..n).map(|j| a.column(j)).collect()
    } else {
        (0..m).map(|i| a.row(i).to_vec()).collect()
    };
    let q = cols.len();
    let mut rot: Vec<Vec<f64>> = (0..q)
        .map(|j| (0..q).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    jacobi_sweeps(&mut cols, &mut rot)?;

    let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut perm: Vec<usize> = (0..q).collect();
    perm.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let singulars: Vec<f64> = perm.iter().map(|&i| norms[i]).collect();

    let long_dim = if tall { m } else { n };
    let thin: Vec<Option<Vec<f64>>> = perm
        .iter()
        .map(|&i| (norms[i] > 0.0).then(|| cols[i].iter().map(|x| x / norms[i]).collect()))
        .collect();
    let long_basis = complete_basis(thin, long_dim);
    let short_basis: Vec<Vec<f64>> = perm.iter().map(|&i| rot[i].clone()).collect();

    let from_columns = |basis: &[Vec<f64>], dim: usize| Matrix::from_fn(dim, basis.len(), |r, c| basis[c][r]);
    let (u, v) = if tall {
        (from_columns(&long_basis, m), from_columns(&short_basis, n))
    } else {
        (from_columns(&short_basis, m), from_columns(&long_basis, n))
    };
    Ok(SvdFactors { u, singulars, v })
}

fn jacobi_sweeps(cols: &mut [Vec<f64>], rot: &mut [Vec<f64>]) -> Result<()> {
    let q = cols.len();
    let scale = cols.iter().map(|c| dot(c, c)).fold(0.0, f64::max);
    if q < 2 || scale == 0.0 {
        return Ok(());
    }
    // Columns this small relative to the largest are numerically zero.
    let negligible = scale * 1e-300_f64.max(f64::EPSILON * f64::EPSILON * 1e-4);
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0;
        for j in 0..q {
            for k in (j + 1)..q {
                let alpha = dot(&cols[j], &cols[j]);
                let beta = dot(&cols[k], &cols[k]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[j], &cols[k]);
                let rel = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(rel);
                if rel <= JACOBI_TOLERANCE {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + 1.0f64.hypot(zeta));
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(cols, j, k, c, s);
                rotate_pair(rot, j, k, c, s);
            }
        }
        if residual <= JACOBI_TOLERANCE {
            return Ok(());
        }
    }
    Err(Error::NonConvergence {
        sweeps: MAX_SWEEPS,
        residual,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], j: usize, k: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(k);
    for (xj, xk) in left[j].iter_mut().zip(right[0].iter_mut()) {
        let (a, b) = (*xj, *xk);
        *xj = c * a - s * b;
        *xk = s * a + c * b;
    }
}

/// Re-orthonormalizes the given columns (None = direction unknown) and fills every
/// gap plus the remaining `dim - len` slots with an orthonormal complement.
fn complete_basis(thin: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut slots: Vec<Option<usize>> = Vec::with_capacity(thin.len());
    for col in thin {
        let Some(mut v) = col else {
            slots.push(None);
            continue;
        };
        for _ in 0..2 {
            for a in &accepted {
                let p = dot(a, &v);
                v.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
            }
        }
        let nv = norm(&v);
        if nv < 0.5 {
            slots.push(None);
        } else {
            v.iter_mut().for_each(|x| *x /= nv);
            slots.push(Some(accepted.len()));
            accepted.push(v);
        }
    }

    let mut extra = householder_complement(&accepted, dim).into_iter();
    let mut out: Vec<Vec<f64>> = slots
        .into_iter()
        .map(|slot| match slot {
            Some(i) => accepted[i].clone(),
            None => extra.next().expect("complement has enough columns"),
        })
        .collect();
    out.extend(extra);
    debug_assert_eq!(out.len(), dim);
    out
}

/// Orthonormal basis of the orthogonal complement of `span(basis)` in `R^dim`.
fn householder_complement(basis: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let k = basis.len();
    let mut work: Vec<Vec<f64>> = basis.to_vec();
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k);
    for j in 0..k {
        let x = &work[j][j..];
        let nx = norm(x);
        if nx == 0.0 {
            reflectors.push((vec![0.0; dim - j], 0.0));
            continue;
        }
        let alpha = if x[0] >= 0.0 { -nx } else { nx };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        let beta = if vv == 0.0 { 0.0 } else { 2.0 / vv };
        for col in work.iter_mut().skip(j + 1) {
            let p = beta * dot(&v, &col[j..]);
            col[j..].iter_mut().zip(&v).for_each(|(c, vi)| *c -= p * vi);
        }
        reflectors.push((v, beta));
    }
    (k..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            for (j, (v, beta)) in reflectors.iter().enumerate().rev() {
                let p = beta * dot(v, &e[j..]);
                e[j..].iter_mut().zip(v).for_each(|(c, vi)| *c -= p * vi);
            }
            e
        })
        .collect()
}

/// `V diag(d) Uᵀ` with `d_i = 1/s_i` for `s_i > threshold * s_max`, else 0.
pub fn pinv_from_svd(f: &SvdFactors, threshold: f64) -> Matrix {
    let cutoff = threshold.max(0.0) * f.max_singular();
    let (d, dd) = (f.out_dim(), f.in_dim());
    let mut out = Matrix::zeros(dd, d);
    for (i, &s) in f.singulars.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        for r in 0..dd {
            let vr = f.v[(r, i)] * inv;
            if vr == 0.0 {
                continue;
            }
            for c in 0..d {
                out[(r, c)] += vr * f.u[(c, i)];
            }
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, 0);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    }

    fn check(a: &Matrix) -> SvdFactors {
        let f = svd(a).unwrap();
        assert_eq!(f.singulars.len(), a.rows().min(a.cols()));
        assert!(f.singulars.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.orthogonality_error() <= 1e-10, "orth {}", f.orthogonality_error());
        let err = f.reconstruct().max_abs_diff(a);
        assert!(err <= 1e-9 * f.max_singular().max(1e-300), "recon {err}");
        f
    }

    #[test]
    fn identity_has_unit_singulars() {
        let f = check(&Matrix::identity(3));
        assert_eq!(f.singulars, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn averaging_row_has_singular_one_half() {
        let a = Matrix::from_rows(1, 4, vec![0.25; 4]).unwrap();
        let f = check(&a);
        assert!((f.singulars[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_rectangular_shapes() {
        for (seed, (r, c)) in [(3, 5), (5, 3), (6, 10), (1, 7), (7, 1), (12, 12)]
            .into_iter()
            .enumerate()
        {
            check(&random_matrix(r, c, seed as u64));
        }
    }

    #[test]
    fn rank_deficient_and_zero() {
        // rank one 4x6
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7, 2.0, 0.0, 1.0];
        let a = Matrix::from_fn(4, 6, |i, j| u[i] * v[j]);
        let f = check(&a);
        assert!(f.singulars[1..].iter().all(|&s| s < 1e-12 * f.singulars[0]));
        let z = check(&Matrix::zeros(3, 2));
        assert_eq!(z.singulars, vec![0.0, 0.0]);
    }

    #[test]
    fn pinv_diag_rule() {
        let a = Matrix::from_rows(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let p = pinv_from_svd(&svd(&a).unwrap(), DEFAULT_ZERO_THRESHOLD);
        assert!(p.max_abs_diff(&Matrix::from_rows(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap()) < 1e-15);
        let i = pinv_from_svd(&svd(&Matrix::identity(4)).unwrap(), DEFAULT_ZERO_THRESHOLD);
        assert!(i.max_abs_diff(&Matrix::identity(4)) < 1e-15);
    }

    #[test]
    fn near_singular_value_is_dropped() {
        // A = Q diag(1, 1e-14) with Q a rotation: the tiny direction is dropped.
        let (c, s) = (0.6, 0.8);
        let q = Matrix::from_rows(2, 2, vec![c, -s, s, c]).unwrap();
        let a = q.matmul(&Matrix::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1e-14]).unwrap());
        let f = svd(&a).unwrap();
        let p = pinv_from_svd(&f, 1e-8);
        // Full-rank pinv of the truncated matrix diag(1, 0) rotated: Q e1 e1ᵀ ... = e1 (Q e1)ᵀ.
        let expected = Matrix::from_rows(2, 2, vec![c, s, 0.0, 0.0]).unwrap();
        assert!(p.max_abs_diff(&expected) < 1e-12, "{p:?}");
        let aapa = a.matmul(&p).matmul(&a);
        assert!(aapa.max_abs_diff(&a) <= 1e-10 * a.max_abs());
    }

    #[test]
    fn size_cap_enforced() {
        assert!(matches!(check_dense_size(1 << 11, 1 << 11), Ok(())));
        assert!(matches!(
            check_dense_size(1 << 11, (1 << 11) + 1),
            Err(Error::SizeLimit { .. })
        ));
    }

    #[test]
    fn block_diagonal_expansion_reconstructs() {
        let a = random_matrix(3, 4, 42);
        let f = svd(&a).unwrap().block_diagonal(3);
        let mut full = Matrix::zeros(9, 12);
        for b in 0..3 {
            for i in 0..3 {
                for j in 0..4 {
                    full[(3 * b + i, 4 * b + j)] = a[(i, j)];
                }
            }
        }
        assert!(f.singulars.windows(2).all(|w| w[0] >= w[1]));
        assert!(f.orthogonality_error() < 1e-12);
        assert!(f.reconstruct().max_abs_diff(&full) < 1e-12);
    }
}
