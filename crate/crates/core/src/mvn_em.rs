//! Maximum-likelihood estimation of a multivariate normal mean and covariance
//! from data with an arbitrary missingness pattern, by EM.
//!
//! Rows are grouped by missingness pattern and the conditional distribution
//! of the missing block is computed once per pattern per iteration.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{analyze_patterns, compute_mask, DataMatrix, Pattern};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, conditional_mvn, SymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mu: DVector<f64>,
    pub sigma: SymMatrix,
}

impl MvnParams {
    /// Validates dimensions and positive definiteness.
    pub fn new(mu: DVector<f64>, sigma: SymMatrix) -> Result<Self> {
        if mu.len() != sigma.dim() {
            return Err(Error::Dimension(format!(
                "mean has length {}, covariance is {}x{}",
                mu.len(),
                sigma.dim(),
                sigma.dim()
            )));
        }
        if !sigma.is_positive_definite() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(MvnParams { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Flattens to `(μ, vech Σ)` where `vech` lists `σ_jl` for `j ≤ l`
    /// row by row.
    pub fn to_vec(&self) -> Vec<f64> {
        let k = self.dim();
        let mut out: Vec<f64> = self.mu.iter().copied().collect();
        for j in 0..k {
            for l in j..k {
                out.push(self.sigma.get(j, l));
            }
        }
        out
    }

    /// Inverse of [`MvnParams::to_vec`]; does not check definiteness.
    pub fn from_vec(k: usize, v: &[f64]) -> Result<Self> {
        if v.len() != k + k * (k + 1) / 2 {
            return Err(Error::Dimension("parameter vector has wrong length".into()));
        }
        let mu = DVector::from_column_slice(&v[..k]);
        let mut s = DMatrix::zeros(k, k);
        let mut idx = k;
        for j in 0..k {
            for l in j..k {
                s[(j, l)] = v[idx];
                s[(l, j)] = v[idx];
                idx += 1;
            }
        }
        Ok(MvnParams {
            mu,
            sigma: SymMatrix::new(s)?,
        })
    }

    /// Names matching [`MvnParams::to_vec`], e.g. `mu_1`, `sigma_1_2`
    /// (1-based).
    pub fn labels(k: usize) -> Vec<String> {
        let mut out: Vec<String> = (1..=k).map(|j| format!("mu_{j}")).collect();
        for j in 1..=k {
            for l in j..=k {
                out.push(format!("sigma_{j}_{l}"));
            }
        }
        out
    }
}

/// Expected complete-data sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub t1: DVector<f64>,
    pub t2: SymMatrix,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub params: MvnParams,
    /// Observed-data loglikelihood at the initial value and after each
    /// iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmResultJson {
    pub mu: Vec<f64>,
    /// Row-major.
    pub sigma: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl EmResult {
    pub fn to_json(&self) -> EmResultJson {
        EmResultJson {
            mu: self.params.mu.iter().copied().collect(),
            sigma: self.params.sigma.to_row_major(),
            loglik_trace: self.loglik_trace.clone(),
            iterations: self.iterations,
            converged: self.converged,
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum EmInit {
    /// Available-case means and variances with zero covariances.
    #[default]
    Moments,
    Params(MvnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOptions {
    /// Absolute loglikelihood change.
    pub tol: f64,
    /// Largest parameter change, each `μ_j` change scaled by `√σ_jj` and each
    /// `σ_jl` change by `√(σ_jj σ_ll)`.
    pub param_tol: f64,
    pub max_iter: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol: 1e-8,
            param_tol: 1e-6,
            max_iter: 10_000,
        }
    }
}

fn patterns_of(data: &DataMatrix) -> Vec<Pattern> {
    analyze_patterns(&compute_mask(data)).patterns
}

pub fn e_step(data: &DataMatrix, params: &MvnParams) -> Result<SufficientStats> {
    e_step_patterns(data, &patterns_of(data), params)
}

pub(crate) fn e_step_patterns(data: &DataMatrix, patterns: &[Pattern], params: &MvnParams) -> Result<SufficientStats> {
    let k = data.n_cols();
    if params.dim() != k {
        return Err(Error::Dimension("parameter and data dimensions differ".into()));
    }
    let mut t1 = DVector::<f64>::zeros(k);
    let mut t2 = DMatrix::<f64>::zeros(k, k);
    let mut yhat = vec![0.0; k];
    for pattern in patterns {
        let cond = conditional_mvn(params, &pattern.observed_indices())?;
        let targets = &cond.target_indices;
        for &i in &pattern.rows {
            let row = data.row(i);
            yhat.copy_from_slice(row);
            if !targets.is_empty() {
                let mean = cond.mean_for_row(row);
                for (a, &t) in targets.iter().enumerate() {
                    yhat[t] = mean[a];
                }
            }
            for j in 0..k {
                t1[j] += yhat[j];
                for l in j..k {
                    t2[(j, l)] += yhat[j] * yhat[l];
                }
            }
            for (a, &ta) in targets.iter().enumerate() {
                for (b, &tb) in targets.iter().enumerate() {
                    if ta <= tb {
                        t2[(ta, tb)] += cond.residual_cov.get(a, b);
                    }
                }
            }
        }
    }
    for j in 0..k {
        for l in 0..j {
            t2[(j, l)] = t2[(l, j)];
        }
    }
    Ok(SufficientStats {
        t1,
        t2: SymMatrix::symmetrized(t2),
        n: data.n_rows(),
    })
}

fn moment_covariance(stats: &SufficientStats) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if stats.n < 2 {
        return Err(Error::InsufficientCases(format!(
            "M-step needs n >= 2, got {}",
            stats.n
        )));
    }
    let n = stats.n as f64;
    let mu = &stats.t1 / n;
    let sigma = stats.t2.as_matrix() / n - &mu * mu.transpose();
    Ok((mu, sigma))
}

/// `μ = t1/n`, `Σ = t2/n − μμᵀ`.
pub fn m_step(stats: &SufficientStats) -> Result<MvnParams> {
    let (mu, sigma) = moment_covariance(stats)?;
    let sigma = SymMatrix::symmetrized(sigma);
    if !sigma.is_positive_definite() {
        return Err(Error::DegenerateCovariance(
            "expected cross-products are not positive definite".into(),
        ));
    }
    Ok(MvnParams { mu, sigma })
}

/// Observed-data loglikelihood: the sum over rows of the log-density of the
/// observed sub-vector. Fully missing rows contribute zero.
pub fn observed_loglik(data: &DataMatrix, params: &MvnParams) -> Result<f64> {
    observed_loglik_patterns(data, &patterns_of(data), params)
}

pub(crate) fn observed_loglik_patterns(data: &DataMatrix, patterns: &[Pattern], params: &MvnParams) -> Result<f64> {
    if params.dim() != data.n_cols() {
        return Err(Error::Dimension("parameter and data dimensions differ".into()));
    }
    if !params.sigma.is_positive_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    let mut total = 0.0;
    for pattern in patterns {
        let obs = pattern.observed_indices();
        if obs.is_empty() {
            continue;
        }
        let sub = params.sigma.submatrix(&obs);
        let chol = nalgebra::Cholesky::new(sub.into_inner()).ok_or(Error::NotPositiveDefinite)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let constant = -0.5 * (obs.len() as f64 * (2.0 * PI).ln() + log_det);
        for &i in &pattern.rows {
            let row = data.row(i);
            let e = DVector::from_iterator(obs.len(), obs.iter().map(|&j| row[j] - params.mu[j]));
            let z = chol.solve(&e);
            total += constant - 0.5 * e.dot(&z);
        }
    }
    Ok(total)
}

/// Gradient of [`observed_loglik`] in the [`MvnParams::to_vec`]
/// parameterization.
pub fn observed_score(data: &DataMatrix, params: &MvnParams) -> Result<Vec<f64>> {
    let k = data.n_cols();
    let mut g_mu = DVector::<f64>::zeros(k);
    let mut g_sigma = DMatrix::<f64>::zeros(k, k);
    for pattern in patterns_of(data) {
        let obs = pattern.observed_indices();
        if obs.is_empty() {
            continue;
        }
        let sub = params.sigma.submatrix(&obs);
        let inv = crate::linalg::spd_inverse(&sub)?.into_inner();
        for &i in &pattern.rows {
            let row = data.row(i);
            let e = DVector::from_iterator(obs.len(), obs.iter().map(|&j| row[j] - params.mu[j]));
            let w = &inv * &e;
            // d/dS of -½(log|S| + eᵀS⁻¹e) = ½(S⁻¹eeᵀS⁻¹ − S⁻¹)
            let d = (&w * w.transpose() - &inv) * 0.5;
            for (a, &ja) in obs.iter().enumerate() {
                g_mu[ja] += w[a];
                for (b, &jb) in obs.iter().enumerate() {
                    g_sigma[(ja, jb)] += d[(a, b)];
                }
            }
        }
    }
    let mut out: Vec<f64> = g_mu.iter().copied().collect();
    for j in 0..k {
        for l in j..k {
            // an off-diagonal σ_jl appears at (j,l) and (l,j)
            let f = if j == l { 1.0 } else { 2.0 };
            out.push(f * g_sigma[(j, l)]);
        }
    }
    Ok(out)
}

/// Available-case means and variances (denominator = observed count), zero
/// covariances.
pub fn moments_init(data: &DataMatrix) -> Result<MvnParams> {
    let k = data.n_cols();
    let mut mu = DVector::zeros(k);
    let mut var = vec![0.0; k];
    for j in 0..k {
        let xs: Vec<f64> = data.observed_column(j).collect();
        if xs.is_empty() {
            return Err(Error::InsufficientCases(format!(
                "column `{}` has no observed values",
                data.columns()[j].name
            )));
        }
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        mu[j] = m;
        var[j] = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        if !(var[j] > 0.0) {
            return Err(Error::DegenerateCovariance(format!(
                "column `{}` has zero observed variance",
                data.columns()[j].name
            )));
        }
    }
    Ok(MvnParams {
        mu,
        sigma: SymMatrix::from_diagonal(&var),
    })
}

pub(crate) fn require_observed(data: &DataMatrix, min: usize) -> Result<()> {
    for (j, c) in data.columns().iter().enumerate() {
        let r = data.observed_count(j);
        if r < min {
            return Err(Error::InsufficientCases(format!(
                "column `{}` has {r} observed values, need at least {min}",
                c.name
            )));
        }
    }
    Ok(())
}

fn max_scaled_change(old: &MvnParams, new: &MvnParams) -> f64 {
    let k = old.dim();
    let sd: Vec<f64> = (0..k).map(|j| old.sigma.get(j, j).sqrt()).collect();
    let mut worst = 0.0_f64;
    for j in 0..k {
        worst = worst.max((new.mu[j] - old.mu[j]).abs() / sd[j]);
        for l in j..k {
            worst = worst.max((new.sigma.get(j, l) - old.sigma.get(j, l)).abs() / (sd[j] * sd[l]));
        }
    }
    worst
}

fn m_step_with_ridge(stats: &SufficientStats, warnings: &mut Vec<String>, ridge_used: &mut bool) -> Result<MvnParams> {
    match m_step(stats) {
        Ok(p) => Ok(p),
        Err(Error::DegenerateCovariance(msg)) if !*ridge_used => {
            let (mu, mut sigma) = moment_covariance(stats)?;
            let k = sigma.nrows();
            let ridge = 1e-10 * sigma.trace() / k as f64;
            for j in 0..k {
                sigma[(j, j)] += ridge;
            }
            let sigma = SymMatrix::symmetrized(sigma);
            if !sigma.is_positive_definite() {
                return Err(Error::DegenerateCovariance(msg));
            }
            *ridge_used = true;
            warnings.push(format!(
                "covariance lost definiteness; added ridge {ridge:e} to the diagonal"
            ));
            Ok(MvnParams { mu, sigma })
        }
        Err(e) => Err(e),
    }
}

pub fn fit_em(data: &DataMatrix, init: &EmInit, options: &EmOptions) -> Result<EmResult> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidParameter("EM tolerance must be positive".into()));
    }
    require_observed(data, 2)?;
    let patterns = patterns_of(data);
    let mut params = match init {
        EmInit::Moments => moments_init(data)?,
        EmInit::Params(p) => {
            if p.dim() != data.n_cols() {
                return Err(Error::Dimension("initial parameters have the wrong dimension".into()));
            }
            p.clone()
        }
    };
    cholesky(&params.sigma)?;
    let complete = data.is_complete();
    let mut trace = vec![observed_loglik_patterns(data, &patterns, &params)?];
    let mut warnings = Vec::new();
    let mut ridge_used = false;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < options.max_iter {
        let step = e_step_patterns(data, &patterns, &params)
            .and_then(|stats| m_step_with_ridge(&stats, &mut warnings, &mut ridge_used))
            .and_then(|next| Ok((observed_loglik_patterns(data, &patterns, &next)?, next)));
        let (ll, next) = match step {
            Ok(v) => v,
            // The maximum lies on the boundary (too little overlap between
            // columns); keep the last nonsingular iterate.
            Err(e @ (Error::SingularPivot { .. } | Error::DegenerateCovariance(_))) => {
                warnings.push(format!(
                    "covariance became singular after {iterations} iterations ({e}); \
                     returning the last nonsingular estimate"
                ));
                break;
            }
            Err(e) => return Err(e),
        };
        let delta = ll - trace[trace.len() - 1];
        let change = max_scaled_change(&params, &next);
        trace.push(ll);
        params = next;
        iterations += 1;
        // Without missing cells the E-step ignores the parameters, so the
        // first M-step is already the fixed point.
        if complete || (delta.abs() < options.tol && change < options.param_tol) {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        params,
        loglik_trace: trace,
        iterations,
        converged,
        warnings,
    })
}

/// Maximum-likelihood mean and covariance (denominator `n`) of complete
/// data.
pub fn complete_data_mle(data: &DataMatrix) -> Result<MvnParams> {
    if !data.is_complete() {
        return Err(Error::InvalidData("complete_data_mle requires complete data".into()));
    }
    let k = data.n_cols();
    let mut t1 = DVector::<f64>::zeros(k);
    let mut t2 = DMatrix::<f64>::zeros(k, k);
    for i in 0..data.n_rows() {
        let y = DVector::from_column_slice(data.row(i));
        t2 += &y * y.transpose();
        t1 += y;
    }
    m_step(&SufficientStats {
        t1,
        t2: SymMatrix::symmetrized(t2),
        n: data.n_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bivariate(rows: &[(f64, Option<f64>)]) -> DataMatrix {
        let rows: Vec<Vec<Option<f64>>> = rows.iter().map(|&(a, b)| vec![Some(a), b]).collect();
        DataMatrix::from_rows(&["y1", "y2"], &rows).unwrap()
    }

    fn params(mu: &[f64], sigma: &[f64]) -> MvnParams {
        MvnParams::new(
            DVector::from_column_slice(mu),
            SymMatrix::from_row_slice(mu.len(), sigma).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn boundary_maximum_stops_with_warning() {
        // Three rows observe a, b and c together, so the partial correlation
        // of b and c given a rests on one degree of freedom and the maximum
        // has singular Σ.
        let holes = b"010110000101011001100101101001100101000110100101100100011001";
        let mut rng = crate::RngStream::new(4475014254469270862, 0);
        let rows: Vec<Vec<Option<f64>>> = (0..30)
            .map(|i| {
                let a = rng.standard_normal();
                let b = 0.5 * a + rng.standard_normal();
                let c = -0.3 * a + 0.4 * b + rng.standard_normal();
                vec![
                    Some(a),
                    (holes[2 * i] == b'0').then_some(b),
                    (holes[2 * i + 1] == b'0').then_some(c),
                ]
            })
            .collect();
        let data = DataMatrix::from_rows(&["a", "b", "c"], &rows).unwrap();
        let fit = fit_em(&data, &EmInit::Moments, &EmOptions::default()).unwrap();
        assert!(!fit.converged);
        assert!(
            fit.warnings.iter().any(|w| w.contains("singular")),
            "{:?}",
            fit.warnings
        );
        assert!(fit.params.sigma.is_positive_definite());
        assert_eq!(fit.loglik_trace.len(), fit.iterations + 1);
        for w in fit.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
    }

    #[test]
    fn e_step_complete_data_is_raw_sums() {
        let data = DataMatrix::from_complete(&["a", "b"], 3, vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5]).unwrap();
        let s = e_step(&data, &params(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(s.t1.as_slice(), &[3.0, 7.5]);
        assert_eq!(s.t2.get(0, 0), 1.0 + 9.0 + 1.0);
        assert_eq!(s.t2.get(0, 1), 2.0 + 15.0 - 0.5);
        assert_eq!(s.t2.get(1, 1), 4.0 + 25.0 + 0.25);
        assert_eq!(s.n, 3);
    }

    #[test]
    fn e_step_fully_missing_row_gives_unconditional_moments() {
        let data = DataMatrix::from_rows(&["a", "b"], &[vec![None, None]]).unwrap();
        let p = params(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        let s = e_step(&data, &p).unwrap();
        assert_eq!(s.t1.as_slice(), &[1.0, 2.0]);
        let expect = p.sigma.as_matrix() + &p.mu * p.mu.transpose();
        for (a, b) in s.t2.as_matrix().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn e_step_conditional_row() {
        // μ = 0, Σ = [[1, .5], [.5, 1]], y1 = 2: E[y2|y1] = 1, Var = 0.75.
        let data = bivariate(&[(2.0, None)]);
        let s = e_step(&data, &params(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0])).unwrap();
        assert!((s.t1[1] - 1.0).abs() < 1e-14);
        assert!((s.t2.get(1, 1) - (1.0 + 0.75)).abs() < 1e-14);
        assert!((s.t2.get(0, 1) - 2.0).abs() < 1e-14);
        assert_eq!(s.t2.get(0, 0), 4.0);
    }

    #[test]
    fn m_step_collinear_is_degenerate() {
        let data = DataMatrix::from_complete(&["a", "b"], 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let s = e_step(&data, &params(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert!(matches!(m_step(&s), Err(Error::DegenerateCovariance(_))));
        let (mu, sigma) = moment_covariance(&s).unwrap();
        assert_eq!(mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(sigma.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn m_step_matches_sample_moments() {
        let data = DataMatrix::from_complete(&["a", "b"], 3, vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5]).unwrap();
        let s = e_step(&data, &params(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let p = m_step(&s).unwrap();
        assert!((p.mu[0] - 1.0).abs() < 1e-14);
        assert!((p.mu[1] - 2.5).abs() < 1e-14);
        let var0 = (0.0 + 4.0 + 4.0) / 3.0;
        assert!((p.sigma.get(0, 0) - var0).abs() < 1e-14);
        let cov = ((1.0 - 1.0) * (2.0 - 2.5) + (3.0 - 1.0) * (5.0 - 2.5) + (-1.0 - 1.0) * (0.5 - 2.5)) / 3.0;
        assert!((p.sigma.get(0, 1) - cov).abs() < 1e-14);
    }

    #[test]
    fn m_step_needs_two_cases() {
        let s = SufficientStats {
            t1: DVector::zeros(1),
            t2: SymMatrix::identity(1),
            n: 1,
        };
        assert!(m_step(&s).is_err());
    }

    #[test]
    fn loglik_standard_normal_at_zero() {
        let data = DataMatrix::from_complete(&["a"], 1, vec![0.0]).unwrap();
        let ll = observed_loglik(&data, &params(&[0.0], &[1.0])).unwrap();
        assert!((ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn loglik_fully_missing_row_contributes_zero() {
        let p = params(&[0.3, -0.1], &[1.3, 0.4, 0.4, 0.9]);
        let with = DataMatrix::from_rows(&["a", "b"], &[vec![Some(1.0), Some(2.0)], vec![None, None]]).unwrap();
        let without = DataMatrix::from_rows(&["a", "b"], &[vec![Some(1.0), Some(2.0)]]).unwrap();
        assert_eq!(
            observed_loglik(&with, &p).unwrap(),
            observed_loglik(&without, &p).unwrap()
        );
    }

    #[test]
    fn loglik_matches_quadrature_over_missing_coordinate() {
        // For a row with y2 missing, integrate the bivariate density over y2
        // with a fine trapezoid grid and compare with the marginal formula.
        let p = params(&[0.5, -1.0], &[1.5, 0.6, 0.6, 2.0]);
        let data = bivariate(&[(0.2, Some(-0.4)), (1.1, None), (-0.7, Some(0.3)), (2.0, None)]);
        let inv = crate::linalg::spd_inverse(&p.sigma).unwrap();
        let det = p.sigma.get(0, 0) * p.sigma.get(1, 1) - p.sigma.get(0, 1).powi(2);
        let dens = |a: f64, b: f64| {
            let e = [a - p.mu[0], b - p.mu[1]];
            let q = e[0] * e[0] * inv.get(0, 0) + 2.0 * e[0] * e[1] * inv.get(0, 1) + e[1] * e[1] * inv.get(1, 1);
            (-0.5 * q).exp() / (2.0 * PI * det.sqrt())
        };
        let mut oracle = 0.0;
        for i in 0..data.n_rows() {
            let a = data.value(i, 0);
            match data.get(i, 1) {
                Some(b) => oracle += dens(a, b).ln(),
                None => {
                    let (lo, hi, m) = (-25.0, 25.0, 200_000);
                    let h = (hi - lo) / m as f64;
                    let mut s = 0.5 * (dens(a, lo) + dens(a, hi));
                    for t in 1..m {
                        s += dens(a, lo + t as f64 * h);
                    }
                    oracle += (s * h).ln();
                }
            }
        }
        let ll = observed_loglik(&data, &p).unwrap();
        assert!((ll - oracle).abs() < 1e-9, "{ll} vs {oracle}");
    }

    #[test]
    fn score_matches_finite_differences() {
        let data = bivariate(&[
            (0.2, Some(-0.4)),
            (1.1, None),
            (-0.7, Some(0.3)),
            (2.0, None),
            (0.4, Some(1.0)),
        ]);
        let p = params(&[0.5, -1.0], &[1.5, 0.6, 0.6, 2.0]);
        let g = observed_score(&data, &p).unwrap();
        let v = p.to_vec();
        let h = 1e-5;
        for i in 0..v.len() {
            let mut up = v.clone();
            up[i] += h;
            let mut dn = v.clone();
            dn[i] -= h;
            let fu = observed_loglik(&data, &MvnParams::from_vec(2, &up).unwrap()).unwrap();
            let fd = observed_loglik(&data, &MvnParams::from_vec(2, &dn).unwrap()).unwrap();
            let fdg = (fu - fd) / (2.0 * h);
            assert!((fdg - g[i]).abs() < 1e-6, "component {i}: {fdg} vs {}", g[i]);
        }
    }

    #[test]
    fn complete_data_converges_in_one_iteration() {
        let data = DataMatrix::from_complete(&["a", "b"], 4, vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5, 0.0, 1.0]).unwrap();
        let r = fit_em(&data, &EmInit::Moments, &EmOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
        let mle = complete_data_mle(&data).unwrap();
        assert_eq!(r.params, mle);
    }

    #[test]
    fn fully_missing_column_rejected() {
        let data = DataMatrix::from_rows(
            &["a", "b"],
            &[vec![Some(1.0), None], vec![Some(2.0), None], vec![Some(3.0), None]],
        )
        .unwrap();
        assert!(matches!(
            fit_em(&data, &EmInit::Moments, &EmOptions::default()),
            Err(Error::InsufficientCases(_))
        ));
    }

    #[test]
    fn ascent_and_stationarity_on_general_pattern() {
        let rows = vec![
            vec![Some(1.0), Some(2.1), None],
            vec![Some(0.3), None, Some(1.2)],
            vec![None, Some(0.5), Some(-0.4)],
            vec![Some(-1.2), Some(-0.8), Some(0.1)],
            vec![Some(0.8), Some(1.9), Some(0.6)],
            vec![Some(2.2), None, None],
            vec![Some(-0.4), Some(0.2), Some(-1.1)],
            vec![None, Some(1.4), Some(0.9)],
            vec![Some(1.5), Some(2.6), Some(0.2)],
            vec![Some(0.1), Some(-0.3), None],
        ];
        let data = DataMatrix::from_rows(&["a", "b", "c"], &rows).unwrap();
        let tight = EmOptions {
            tol: 1e-14,
            param_tol: 1e-12,
            max_iter: 100_000,
        };
        let r = fit_em(&data, &EmInit::Moments, &tight).unwrap();
        assert!(r.converged);
        assert!(r.loglik_trace.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        let g = observed_score(&data, &r.params).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "score norm {norm}");
    }

    #[test]
    fn to_vec_round_trip() {
        let p = params(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(p.to_vec(), vec![1.0, 2.0, 2.0, 0.5, 1.0]);
        assert_eq!(MvnParams::from_vec(2, &p.to_vec()).unwrap(), p);
        assert_eq!(
            MvnParams::labels(2),
            vec!["mu_1", "mu_2", "sigma_1_1", "sigma_1_2", "sigma_2_2"]
        );
    }
}
