//! Combining rules for multiply imputed estimates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// Estimate and covariance from one completed dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PerImputationEstimate {
    pub theta_hat: DVector<f64>,
    pub v_hat: SymMatrix,
}

impl PerImputationEstimate {
    pub fn new(theta_hat: DVector<f64>, v_hat: SymMatrix) -> Result<Self> {
        if theta_hat.len() != v_hat.dim() {
            return Err(Error::Dimension("estimate and covariance sizes differ".into()));
        }
        if theta_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("estimate must be finite".into()));
        }
        Ok(PerImputationEstimate { theta_hat, v_hat })
    }

    pub fn scalar(theta: f64, v: f64) -> Result<Self> {
        if !(v >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "variance must be non-negative, got {v}"
            )));
        }
        Self::new(DVector::from_element(1, theta), SymMatrix::from_row_slice(1, &[v])?)
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledEstimate {
    pub theta_bar: DVector<f64>,
    pub v_bar: SymMatrix,
    pub b: SymMatrix,
    pub t_total: SymMatrix,
    /// Per component; `f64::INFINITY` when there is no between-imputation
    /// variance and no complete-data df was supplied.
    pub df: Vec<f64>,
    pub fmi: Vec<f64>,
    pub n_imputations: usize,
}

impl PooledEstimate {
    pub fn dim(&self) -> usize {
        self.theta_bar.len()
    }

    pub fn se(&self, j: usize) -> f64 {
        self.t_total.get(j, j).sqrt()
    }
}

/// Pools `D ≥ 2` estimates. Degrees of freedom follow
/// `ν = (D−1)(1 + 1/r)²`, `r = (1+1/D)·b_jj / v̄_jj`; when `nu_com` is given
/// this is combined with the observed-data df as `(1/ν + 1/ν_obs)⁻¹`.
pub fn pool(estimates: &[PerImputationEstimate], nu_com: Option<f64>) -> Result<PooledEstimate> {
    let d = estimates.len();
    if d < 2 {
        return Err(Error::InvalidParameter(format!(
            "pooling needs at least 2 imputations, got {d}"
        )));
    }
    let p = estimates[0].dim();
    if estimates.iter().any(|e| e.dim() != p) {
        return Err(Error::Dimension("estimates have different dimensions".into()));
    }
    if let Some(nu) = nu_com {
        if !(nu > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "complete-data df must be positive, got {nu}"
            )));
        }
    }
    let df_d = d as f64;
    let mut theta_bar = estimates.iter().fold(DVector::zeros(p), |acc, e| acc + &e.theta_hat) / df_d;
    for j in 0..p {
        // keep B exactly zero when the summation would round
        let first = estimates[0].theta_hat[j];
        if estimates.iter().all(|e| e.theta_hat[j] == first) {
            theta_bar[j] = first;
        }
    }
    let v_bar = estimates
        .iter()
        .fold(DMatrix::zeros(p, p), |acc, e| acc + e.v_hat.as_matrix())
        / df_d;
    let mut b = DMatrix::<f64>::zeros(p, p);
    for e in estimates {
        let dev = &e.theta_hat - &theta_bar;
        b += &dev * dev.transpose();
    }
    b /= df_d - 1.0;
    let inflate = 1.0 + 1.0 / df_d;
    let t_total = &v_bar + &b * inflate;
    let mut df = Vec::with_capacity(p);
    let mut fmi = Vec::with_capacity(p);
    for j in 0..p {
        let (bj, vj, tj) = (b[(j, j)], v_bar[(j, j)], t_total[(j, j)]);
        let gamma = if tj > 0.0 {
            (inflate * bj / tj).clamp(0.0, 1.0)
        } else {
            0.0
        };
        fmi.push(gamma);
        let nu_rs = if bj > 0.0 {
            // r → ∞ as v̄ → 0, giving D − 1.
            let inv_r = vj / (inflate * bj);
            (df_d - 1.0) * (1.0 + inv_r).powi(2)
        } else {
            f64::INFINITY
        };
        let nu = match nu_com {
            None => nu_rs,
            Some(nc) => {
                let nu_obs = (nc + 1.0) / (nc + 3.0) * nc * (1.0 - gamma);
                if nu_obs <= 0.0 {
                    nu_obs.max(f64::MIN_POSITIVE)
                } else {
                    1.0 / (1.0 / nu_rs + 1.0 / nu_obs)
                }
            }
        };
        df.push(nu);
    }
    Ok(PooledEstimate {
        theta_bar,
        v_bar: SymMatrix::symmetrized(v_bar),
        b: SymMatrix::symmetrized(b),
        t_total: SymMatrix::symmetrized(t_total),
        df,
        fmi,
        n_imputations: d,
    })
}

/// Two-sided quantile `q` with `P(|T| ≤ q) = level` for a Student t with
/// `df` degrees of freedom, or the normal when `df` is infinite.
pub fn t_multiplier(df: f64, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if !(df > 0.0) {
        return Err(Error::InvalidParameter(format!("df must be positive, got {df}")));
    }
    let p = (1.0 + level) / 2.0;
    if df.is_infinite() {
        let n = Normal::standard();
        return Ok(n.inverse_cdf(p));
    }
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(t.inverse_cdf(p))
}

/// `θ̄_j ± t_{df_j}·sqrt(T_jj)`.
pub fn interval(pooled: &PooledEstimate, component: usize, level: f64) -> Result<(f64, f64)> {
    if component >= pooled.dim() {
        return Err(Error::Dimension(format!(
            "component {component} out of range for a {}-vector",
            pooled.dim()
        )));
    }
    let half = t_multiplier(pooled.df[component], level)? * pooled.se(component);
    let c = pooled.theta_bar[component];
    Ok((c - half, c + half))
}

/// Scalar summary used for reports. Infinite df is written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSummary {
    pub theta_bar: Vec<f64>,
    pub se: Vec<f64>,
    /// Diagonals of the within, between and total variance.
    pub v_bar: Vec<f64>,
    pub b: Vec<f64>,
    pub t: Vec<f64>,
    pub df: Vec<Option<f64>>,
    pub fmi: Vec<f64>,
    pub interval: Vec<[f64; 2]>,
    pub level: f64,
    pub n_imputations: usize,
}

impl PooledSummary {
    pub fn new(pooled: &PooledEstimate, level: f64) -> Result<Self> {
        let p = pooled.dim();
        Ok(PooledSummary {
            theta_bar: pooled.theta_bar.iter().copied().collect(),
            se: (0..p).map(|j| pooled.se(j)).collect(),
            v_bar: (0..p).map(|j| pooled.v_bar.get(j, j)).collect(),
            b: (0..p).map(|j| pooled.b.get(j, j)).collect(),
            t: (0..p).map(|j| pooled.t_total.get(j, j)).collect(),
            df: pooled.df.iter().map(|&v| v.is_finite().then_some(v)).collect(),
            fmi: pooled.fmi.clone(),
            interval: (0..p)
                .map(|j| interval(pooled, j, level).map(|(lo, hi)| [lo, hi]))
                .collect::<Result<_>>()?,
            level,
            n_imputations: pooled.n_imputations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalars(pairs: &[(f64, f64)]) -> Vec<PerImputationEstimate> {
        pairs
            .iter()
            .map(|&(t, v)| PerImputationEstimate::scalar(t, v).unwrap())
            .collect()
    }

    #[test]
    fn hand_fixture() {
        let p = pool(&scalars(&[(1.0, 0.5), (3.0, 0.5)]), None).unwrap();
        assert!((p.theta_bar[0] - 2.0).abs() < 1e-12);
        assert!((p.b.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((p.t_total.get(0, 0) - 3.5).abs() < 1e-12);
        // r = 3/0.5 = 6, ν = (1 + 1/6)².
        assert!((p.df[0] - (7.0f64 / 6.0).powi(2)).abs() < 1e-12);
        assert!((p.fmi[0] - 3.0 / 3.5).abs() < 1e-12);
    }

    #[test]
    fn identical_estimates() {
        let p = pool(&scalars(&[(0.1, 0.2); 3]), None).unwrap();
        assert_eq!(p.b.get(0, 0), 0.0);
        assert_eq!(p.t_total.get(0, 0), p.v_bar.get(0, 0));
        assert_eq!(p.fmi[0], 0.0);
        assert!(p.df[0].is_infinite());
        let (lo, hi) = interval(&p, 0, 0.95).unwrap();
        assert!((hi - lo - 2.0 * 1.959964 * 0.2f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn zero_within_variance_uses_d_minus_one() {
        let p = pool(&scalars(&[(1.0, 0.0), (2.0, 0.0), (4.0, 0.0)]), None).unwrap();
        assert!((p.df[0] - 2.0).abs() < 1e-12);
        assert!((p.fmi[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(pool(&scalars(&[(1.0, 0.5)]), None).is_err());
        let mut e = scalars(&[(1.0, 0.5), (3.0, 0.5)]);
        e.push(PerImputationEstimate::new(DVector::zeros(2), SymMatrix::identity(2)).unwrap());
        assert!(matches!(pool(&e, None), Err(Error::Dimension(_))));
        let p = pool(&scalars(&[(1.0, 0.5), (3.0, 0.5)]), None).unwrap();
        assert!(interval(&p, 0, 1.0).is_err());
        assert!(interval(&p, 0, 0.0).is_err());
        assert!(interval(&p, 1, 0.9).is_err());
    }

    #[test]
    fn t_quantiles_match_tables() {
        assert!((t_multiplier(4.0, 0.95).unwrap() - 2.776445).abs() < 1e-6);
        assert!((t_multiplier(f64::INFINITY, 0.95).unwrap() - 1.959964).abs() < 1e-6);
        assert!((t_multiplier(10.0, 0.90).unwrap() - 1.812461).abs() < 1e-6);
        assert!((t_multiplier(1.0, 0.95).unwrap() - 12.706205).abs() < 1e-5);
    }

    #[test]
    fn vector_pooling_componentwise() {
        let e: Vec<_> = [(1.0, 10.0), (2.0, 14.0), (3.0, 9.0)]
            .iter()
            .map(|&(a, b)| {
                PerImputationEstimate::new(
                    DVector::from_vec(vec![a, b]),
                    SymMatrix::from_row_slice(2, &[0.3, 0.1, 0.1, 2.0]).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let p = pool(&e, None).unwrap();
        let a = pool(&scalars(&[(1.0, 0.3), (2.0, 0.3), (3.0, 0.3)]), None).unwrap();
        let b = pool(&scalars(&[(10.0, 2.0), (14.0, 2.0), (9.0, 2.0)]), None).unwrap();
        assert!((p.df[0] - a.df[0]).abs() < 1e-12);
        assert!((p.df[1] - b.df[0]).abs() < 1e-12);
        // Off-diagonal B from the cross-products of deviations.
        assert!((p.b.get(0, 1) - (-1.0 * -1.0 + 0.0 + 1.0 * -2.0) / 2.0).abs() < 1e-12);
    }

    fn pairs() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-10.0..10.0f64, 0.0..5.0f64), 2..12)
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut v in pairs()) {
            let a = pool(&scalars(&v), Some(30.0)).unwrap();
            v.reverse();
            let b = pool(&scalars(&v), Some(30.0)).unwrap();
            prop_assert!((a.theta_bar[0] - b.theta_bar[0]).abs() < 1e-12);
            prop_assert!((a.t_total.get(0, 0) - b.t_total.get(0, 0)).abs() < 1e-10);
            prop_assert!((a.df[0] - b.df[0]).abs() <= 1e-9 * a.df[0].abs().max(1.0) || a.df[0] == b.df[0]);
        }

        #[test]
        fn affine_equivariant(v in pairs(), a in 0.1..5.0f64, c in -5.0..5.0f64, neg in any::<bool>()) {
            let a = if neg { -a } else { a };
            let base = pool(&scalars(&v), None).unwrap();
            let moved: Vec<_> = v.iter().map(|&(t, var)| (a * t + c, a * a * var)).collect();
            let m = pool(&scalars(&moved), None).unwrap();
            prop_assert!((m.theta_bar[0] - (a * base.theta_bar[0] + c)).abs() < 1e-9);
            prop_assert!((m.t_total.get(0, 0) - a * a * base.t_total.get(0, 0)).abs() < 1e-8 * (1.0 + m.t_total.get(0, 0)));
            prop_assert!((m.fmi[0] - base.fmi[0]).abs() < 1e-9);
            if base.df[0].is_finite() {
                prop_assert!((m.df[0] - base.df[0]).abs() < 1e-6 * base.df[0]);
            }
        }

        #[test]
        fn small_sample_df_bounded(v in pairs(), nu_com in 1.0..500.0f64) {
            let rs = pool(&scalars(&v), None).unwrap();
            let br = pool(&scalars(&v), Some(nu_com)).unwrap();
            prop_assert!(br.df[0] > 0.0);
            prop_assert!(br.df[0] <= rs.df[0] * (1.0 + 1e-12));
            prop_assert!(br.df[0] <= nu_com * (1.0 + 1e-12));
            prop_assert!((0.0..=1.0).contains(&br.fmi[0]));
        }
    }
}
