//! Dense symmetric eigen, SVD and pseudo-inverse helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{input, KoopmanError, Result};

/// Relative cut-off used for every rank decision.
pub const RANK_RTOL: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    /// Keeps the eigenpairs whose eigenvalue exceeds `rtol * max(λ_max, 0)`.
    pub fn truncated(&self, rtol: f64) -> SymEig {
        let top = self.values.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..self.values.len())
            .filter(|&i| top > 0.0 && self.values[i] > rtol * top)
            .collect();
        SymEig {
            values: DVector::from_iterator(keep.len(), keep.iter().map(|&i| self.values[i])),
            vectors: self.vectors.select_columns(&keep),
        }
    }
}

pub fn check_symmetric(m: &DMatrix<f64>, rtol: f64) -> Result<()> {
    if !m.is_square() {
        return input(format!("expected a square matrix, got {}x{}", m.nrows(), m.ncols()));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > rtol * scale {
        return input(format!("matrix is not symmetric (max asymmetry {asym:.3e})"));
    }
    Ok(())
}

pub fn sym_eig(m: &DMatrix<f64>) -> Result<SymEig> {
    check_symmetric(m, 1e-8)?;
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(SymEig {
        values: DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i])),
        vectors: eig.eigenvectors.select_columns(&order),
    })
}

/// Principal square root of a symmetric PSD matrix.
///
/// Negative eigenvalues are clamped to zero and eigenvalues at or below
/// `jitter * λ_max` are dropped.
pub fn psd_sqrt(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let eig = sym_eig(m)?.truncated(jitter);
    let roots = eig.values.map(f64::sqrt);
    Ok(scale_cols(&eig.vectors, &roots) * eig.vectors.transpose())
}

/// Thin SVD with singular values in descending order.
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    if m.nrows() == 0 || m.ncols() == 0 {
        let k = 0;
        return Ok(Svd {
            u: DMatrix::zeros(m.nrows(), k),
            s: DVector::zeros(k),
            v_t: DMatrix::zeros(k, m.ncols()),
        });
    }
    // nalgebra's SVD with vectors mis-reconstructs some rank-deficient inputs
    let fm = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
    let res = fm.thin_svd().map_err(|e| KoopmanError::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (fu, fs, fv) = (res.U(), res.S(), res.V());
    let k = m.nrows().min(m.ncols());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| fs[b].total_cmp(&fs[a]));
    Ok(Svd {
        u: DMatrix::from_fn(m.nrows(), k, |i, j| fu[(i, order[j])]),
        s: DVector::from_iterator(k, order.iter().map(|&i| fs[i])),
        v_t: DMatrix::from_fn(k, m.ncols(), |i, j| fv[(j, order[i])]),
    })
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut s: Vec<f64> = m.singular_values().iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

/// Numerical rank: singular values above `rtol * σ_max`.
pub fn rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    let s = singular_values(m);
    match s.get(0) {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v > rtol * top).count(),
        _ => 0,
    }
}

/// Moore–Penrose pseudo-inverse; singular values below `tol * σ_max` count as zero.
pub fn pinv(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let Ok(d) = svd(m) else {
        return DMatrix::from_element(m.ncols(), m.nrows(), f64::NAN);
    };
    let top = d.s.get(0).cloned().unwrap_or(0.0);
    let inv = d.s.map(|v| if top > 0.0 && v > tol * top { 1.0 / v } else { 0.0 });
    scale_cols(&d.v_t.transpose(), &inv) * d.u.transpose()
}

/// Operator, Frobenius and nuclear norms of `m`.
pub fn norms(m: &DMatrix<f64>) -> (f64, f64, f64) {
    let s = singular_values(m);
    let op = s.get(0).cloned().unwrap_or(0.0);
    (op, m.norm(), s.sum())
}

/// Smallest eigenvalue is at least `-rtol * trace`.
pub fn is_psd(m: &DMatrix<f64>, rtol: f64) -> bool {
    match sym_eig(m) {
        Ok(e) => {
            let min = e.values.iter().cloned().fold(f64::INFINITY, f64::min);
            m.is_empty() || min >= -rtol * m.trace().abs()
        }
        Err(_) => false,
    }
}

/// `m * diag(d)`.
pub fn scale_cols(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col *= d[j];
    }
    out
}

/// `diag(d) * m`.
pub fn scale_rows(m: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= d[i];
    }
    out
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(KoopmanError::Dimension { expected: ncols, got: bad.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn psd_sqrt_of_identity_and_diagonal() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((psd_sqrt(&i3, 1e-10).unwrap() - &i3).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let s = psd_sqrt(&d, 1e-10).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        assert!((s - want).amax() < 1e-14);
    }

    #[test]
    fn psd_sqrt_reconstructs_random_psd() {
        let x = random(6, 6, 1);
        let m = &x * x.transpose();
        let s = psd_sqrt(&m, 1e-10).unwrap();
        assert!((&s * &s - &m).norm() / m.norm() <= 1e-7);
        assert!((&s - s.transpose()).amax() < 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(psd_sqrt(&m, 1e-10).is_err());
    }

    #[test]
    fn pinv_basics() {
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert!((pinv(&i3, RANK_RTOL) - &i3).amax() < 1e-14);
        let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let want = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.0]);
        assert!((pinv(&d, RANK_RTOL) - want).amax() < 1e-14);
        let m = random(4, 3, 2);
        let p = pinv(&m, RANK_RTOL);
        assert!((&p * &m - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn pinv_penrose_identities() {
        let m = random(5, 2, 3) * random(2, 4, 4);
        let p = pinv(&m, RANK_RTOL);
        assert!((&m * &p * &m - &m).amax() < 1e-7);
        assert!((&p * &m * &p - &p).amax() < 1e-7);
        let mp = &m * &p;
        let pm = &p * &m;
        assert!((&mp - mp.transpose()).amax() < 1e-7);
        assert!((&pm - pm.transpose()).amax() < 1e-7);
    }

    #[test]
    fn svd_sorted_and_reconstructs() {
        let m = random(5, 7, 5);
        let d = svd(&m).unwrap();
        assert!(d.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
        let back = scale_cols(&d.u, &d.s) * &d.v_t;
        assert!((back - &m).amax() < 1e-12);
    }

    #[test]
    fn svd_of_rank_one_tall_matrix() {
        let m = DMatrix::from_column_slice(3, 2, &[
            -0.17318172104871557, 0.031280503594381726, 0.06113250530435356,
            0.18267761261869692, -0.032995674621600926, -0.06448451981406138,
        ]);
        let d = svd(&m).unwrap();
        assert!((d.s[0] - m.norm()).abs() < 1e-14);
        assert!((scale_cols(&d.u, &d.s) * &d.v_t - &m).amax() < 1e-14);
    }

    #[test]
    fn norm_ordering() {
        let (op, fro, nuc) = norms(&random(4, 6, 6));
        assert!(op <= fro + 1e-12 && fro <= nuc + 1e-12);
    }
}
