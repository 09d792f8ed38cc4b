//! Symmetric-matrix kernel: the sweep operator, Cholesky factorization, and
//! conditional distributions of a multivariate normal.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mvn_em::MvnParams;

/// Relative pivot tolerance used by [`sweep`] and [`reverse_sweep`].
pub const PIVOT_TOL: f64 = 1e-12;

/// A square symmetric matrix. Construction symmetrizes the input as
/// `(G + Gᵀ) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "expected a non-empty square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("matrix has non-finite entries".into()));
        }
        Ok(Self::symmetrized(m))
    }

    pub(crate) fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn from_row_slice(dim: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::Dimension(format!("{} entries for dim {dim}", entries.len())));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, entries))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        self.0.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// The principal sub-matrix on `idx`.
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix(DMatrix::from_fn(idx.len(), idx.len(), |a, b| self.0[(idx[a], idx[b])]))
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix(&self.0 * factor)
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| self.0[(i, j)])
            .collect()
    }

    pub fn is_positive_definite(&self) -> bool {
        nalgebra::Cholesky::new(self.0.clone()).is_some()
    }
}

fn check_pivot(g: &SymMatrix, k: usize) -> Result<()> {
    if k >= g.dim() {
        return Err(Error::Dimension(format!("pivot {k} out of range for dim {}", g.dim())));
    }
    Ok(())
}

/// Sweeps `g` on pivot `k` (0-based):
/// `h_kk = −1/g_kk`, `h_jk = g_jk/g_kk`, `h_jl = g_jl − g_jk g_kl / g_kk`.
pub fn sweep(g: &SymMatrix, k: usize) -> Result<SymMatrix> {
    check_pivot(g, k)?;
    let mut m = g.0.clone();
    sweep_in_place(&mut m, k, PIVOT_TOL * g.max_abs_diagonal(), 1.0)?;
    Ok(SymMatrix::symmetrized(m))
}

/// Inverse of [`sweep`]: `h_kk = −1/g_kk`, `h_jk = −g_jk/g_kk`,
/// `h_jl = g_jl − g_jk g_kl / g_kk`.
pub fn reverse_sweep(g: &SymMatrix, k: usize) -> Result<SymMatrix> {
    check_pivot(g, k)?;
    let mut m = g.0.clone();
    sweep_in_place(&mut m, k, PIVOT_TOL * g.max_abs_diagonal(), -1.0)?;
    Ok(SymMatrix::symmetrized(m))
}

/// `sign = 1` sweeps, `sign = -1` reverse-sweeps.
pub(crate) fn sweep_in_place(m: &mut DMatrix<f64>, k: usize, tol: f64, sign: f64) -> Result<()> {
    let d = m.nrows();
    let pivot = m[(k, k)];
    if !(pivot.abs() > tol) {
        return Err(Error::SingularPivot { index: k, value: pivot });
    }
    for j in 0..d {
        if j == k {
            continue;
        }
        let gjk = m[(j, k)];
        if gjk == 0.0 {
            continue;
        }
        for l in j..d {
            if l == k {
                continue;
            }
            let v = m[(j, l)] - gjk * m[(k, l)] / pivot;
            m[(j, l)] = v;
            m[(l, j)] = v;
        }
    }
    for j in 0..d {
        if j != k {
            let v = sign * m[(j, k)] / pivot;
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
    m[(k, k)] = -1.0 / pivot;
    Ok(())
}

/// Lower-triangular `L` with `L Lᵀ = g`.
pub fn cholesky(g: &SymMatrix) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(g.0.clone())
        .map(|c| c.unpack())
        .ok_or(Error::NotPositiveDefinite)
}

/// Cholesky-style factor of a positive semi-definite matrix. Pivots whose
/// residual falls within `tol · max|g_ii|` of zero produce zero columns;
/// a clearly negative residual is an error.
pub fn psd_factor(g: &SymMatrix, tol: f64) -> Result<DMatrix<f64>> {
    let d = g.dim();
    let eps = tol * g.max_abs_diagonal();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut s = g.get(j, j);
        for p in 0..j {
            s -= l[(j, p)] * l[(j, p)];
        }
        if s < -eps {
            return Err(Error::NotPositiveDefinite);
        }
        if s <= eps {
            continue;
        }
        let ljj = s.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut v = g.get(i, j);
            for p in 0..j {
                v -= l[(i, p)] * l[(j, p)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Inverse of an SPD matrix via its Cholesky factor.
pub fn spd_inverse(g: &SymMatrix) -> Result<SymMatrix> {
    let chol = nalgebra::Cholesky::new(g.0.clone()).ok_or(Error::NotPositiveDefinite)?;
    Ok(SymMatrix::symmetrized(chol.inverse()))
}

/// `log |g|` for SPD `g`.
pub fn spd_log_det(g: &SymMatrix) -> Result<f64> {
    let l = cholesky(g)?;
    Ok(2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Distribution of the target coordinates given the conditioning ones:
/// `y_T | y_G ~ N(intercepts + slopes · y_G, residual_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMvn {
    pub target_indices: Vec<usize>,
    pub given_indices: Vec<usize>,
    pub intercepts: DVector<f64>,
    /// `|targets| × |given|` regression slopes.
    pub slopes: DMatrix<f64>,
    pub residual_cov: SymMatrix,
}

impl ConditionalMvn {
    /// Conditional mean of the targets given values of the conditioning
    /// variables, in `given_indices` order.
    pub fn mean_given(&self, given: &[f64]) -> DVector<f64> {
        let mut mean = self.intercepts.clone();
        for (t, m) in mean.iter_mut().enumerate() {
            for (g, &v) in given.iter().enumerate() {
                *m += self.slopes[(t, g)] * v;
            }
        }
        mean
    }

    /// Conditional mean reading conditioning values out of a full row.
    pub fn mean_for_row(&self, row: &[f64]) -> DVector<f64> {
        let mut mean = self.intercepts.clone();
        for (t, m) in mean.iter_mut().enumerate() {
            for (g, &col) in self.given_indices.iter().enumerate() {
                *m += self.slopes[(t, g)] * row[col];
            }
        }
        mean
    }
}

/// Conditional distribution of the unobserved coordinates given `observed`,
/// obtained by sweeping `[[−1, μᵀ], [μ, Σ]]` on the observed positions.
pub fn conditional_mvn(params: &MvnParams, observed: &[usize]) -> Result<ConditionalMvn> {
    let k = params.dim();
    if observed.iter().any(|&j| j >= k) {
        return Err(Error::Dimension("observed index out of range".into()));
    }
    if !params.sigma.is_positive_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    let mut is_obs = vec![false; k];
    for &j in observed {
        is_obs[j] = true;
    }
    let given: Vec<usize> = (0..k).filter(|&j| is_obs[j]).collect();
    let targets: Vec<usize> = (0..k).filter(|&j| !is_obs[j]).collect();

    let mut aug = DMatrix::<f64>::zeros(k + 1, k + 1);
    aug[(0, 0)] = -1.0;
    for j in 0..k {
        aug[(0, j + 1)] = params.mu[j];
        aug[(j + 1, 0)] = params.mu[j];
        for l in 0..k {
            aug[(j + 1, l + 1)] = params.sigma.get(j, l);
        }
    }
    let tol = PIVOT_TOL * params.sigma.max_abs_diagonal();
    for &j in &given {
        sweep_in_place(&mut aug, j + 1, tol, 1.0)?;
    }

    let intercepts = DVector::from_iterator(targets.len(), targets.iter().map(|&t| aug[(0, t + 1)]));
    let slopes = DMatrix::from_fn(targets.len(), given.len(), |a, b| aug[(given[b] + 1, targets[a] + 1)]);
    let residual = DMatrix::from_fn(targets.len(), targets.len(), |a, b| {
        aug[(targets[a] + 1, targets[b] + 1)]
    });
    Ok(ConditionalMvn {
        target_indices: targets,
        given_indices: given,
        intercepts,
        slopes,
        residual_cov: SymMatrix::symmetrized(residual),
    })
}
