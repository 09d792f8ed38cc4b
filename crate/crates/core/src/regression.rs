//! Least squares and binary-response maximum likelihood, shared by the
//! regression-based imputation methods.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, spd_inverse, SymMatrix};
use crate::sampler::{draw_chisq, draw_mvn_factor, RngStream};

/// Coefficient norm beyond which a binary-response fit is declared separated.
pub const SEPARATION_NORM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub beta: DVector<f64>,
    pub xtx_inv: SymMatrix,
    pub rss: f64,
    pub n: usize,
}

impl LeastSquares {
    pub fn n_coef(&self) -> usize {
        self.beta.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        x.iter().zip(self.beta.iter()).map(|(a, b)| a * b).sum()
    }
}

pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquares> {
    let (n, q) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension("design and response lengths differ".into()));
    }
    if n < q {
        return Err(Error::RankDeficient(format!("{n} cases for {q} coefficients")));
    }
    let xtx = SymMatrix::symmetrized(x.transpose() * x);
    let xtx_inv = spd_inverse(&xtx).map_err(|_| Error::RankDeficient("XᵀX is singular".into()))?;
    // reject numerically singular designs that Cholesky let through
    let scale = xtx.max_abs_diagonal() * xtx_inv.max_abs_diagonal();
    if !(scale < 1e14) {
        return Err(Error::RankDeficient(format!("XᵀX condition estimate {scale:e}")));
    }
    let beta = xtx_inv.as_matrix() * (x.transpose() * y);
    let resid = y - x * &beta;
    Ok(LeastSquares {
        beta,
        xtx_inv,
        rss: resid.norm_squared(),
        n,
    })
}

/// Posterior draw for normal linear regression under the uniform prior on
/// `(β, log σ)`: `σ² = rss / χ²_{n−q}`, `β ~ N(β̂, σ² (XᵀX)⁻¹)`.
pub fn draw_linear_posterior(fit: &LeastSquares, rng: &mut RngStream) -> Result<(DVector<f64>, f64)> {
    let df = fit.n as f64 - fit.n_coef() as f64;
    if !(df > 0.0) {
        return Err(Error::InsufficientCases(format!(
            "{} cases for {} coefficients leaves no residual df",
            fit.n,
            fit.n_coef()
        )));
    }
    let sigma2 = fit.rss / draw_chisq(rng, df)?;
    let l = cholesky(&fit.xtx_inv)? * sigma2.sqrt();
    Ok((draw_mvn_factor(rng, &fit.beta, &l), sigma2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `φ(η)/Φ(η)` with the asymptotic form where `Φ` underflows.
fn mills(eta: f64) -> f64 {
    let c = std_normal_cdf(eta);
    if c > 1e-300 {
        std_normal_pdf(eta) / c
    } else {
        -eta
    }
}

impl Link {
    /// Probability of a 1 at linear predictor `eta`.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
            Link::Probit => std_normal_cdf(eta),
        }
    }

    /// Log-likelihood contribution, its first and second derivatives in
    /// `eta`.
    fn terms(self, eta: f64, y: f64) -> (f64, f64, f64) {
        match self {
            Link::Logit => {
                let p = self.inverse(eta);
                // log(1 + e^eta), stable
                let softplus = if eta > 0.0 {
                    eta + (-eta).exp().ln_1p()
                } else {
                    eta.exp().ln_1p()
                };
                (y * eta - softplus, y - p, -p * (1.0 - p))
            }
            Link::Probit => {
                let s = if y > 0.5 { 1.0 } else { -1.0 };
                let z = s * eta;
                let c = std_normal_cdf(z);
                let ll = if c > 0.0 {
                    c.ln()
                } else {
                    -0.5 * z * z - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                };
                let lam = mills(z);
                (ll, s * lam, -lam * (z + lam))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFit {
    pub beta: DVector<f64>,
    /// Inverse observed information at the MLE.
    pub cov: SymMatrix,
    pub link: Link,
    pub iterations: usize,
    pub grad_norm: f64,
}

pub fn binary_loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, link: Link) -> f64 {
    let eta = x * beta;
    eta.iter().zip(y).map(|(&e, &yi)| link.terms(e, yi).0).sum()
}

pub fn binary_gradient(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, link: Link) -> DVector<f64> {
    let eta = x * beta;
    let d: DVector<f64> = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(&e, &yi)| link.terms(e, yi).1));
    x.transpose() * d
}

fn binary_hessian(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, link: Link) -> DMatrix<f64> {
    let eta = x * beta;
    let q = x.ncols();
    let mut h = DMatrix::<f64>::zeros(q, q);
    for (i, (&e, &yi)) in eta.iter().zip(y).enumerate() {
        let w = link.terms(e, yi).2;
        let row = x.row(i);
        for a in 0..q {
            let ra = row[a] * w;
            for b in a..q {
                h[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

/// Maximum likelihood for a binary response by Newton–Raphson with step
/// halving. Stops when the gradient norm falls below `grad_tol`.
pub fn fit_binary(x: &DMatrix<f64>, y: &[f64], link: Link, grad_tol: f64) -> Result<BinaryFit> {
    let (n, q) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension("design and response lengths differ".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidData("binary response must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == n {
        return Err(Error::InvalidData("binary response has a single class".into()));
    }
    let mut beta = DVector::<f64>::zeros(q);
    let mut ll = binary_loglik(x, y, &beta, link);
    const MAX_ITER: usize = 200;
    for iter in 0..MAX_ITER {
        let g = binary_gradient(x, y, &beta, link);
        let gn = g.norm();
        let neg_h = SymMatrix::symmetrized(-binary_hessian(x, y, &beta, link));
        if gn < grad_tol {
            if perfectly_separated(x, y, &beta, link) {
                return Err(Error::Separation { norm: beta.norm() });
            }
            let cov = spd_inverse(&neg_h).map_err(|_| Error::RankDeficient("information matrix is singular".into()))?;
            return Ok(BinaryFit {
                beta,
                cov,
                link,
                iterations: iter,
                grad_norm: gn,
            });
        }
        let chol = nalgebra::Cholesky::new(neg_h.into_inner())
            .ok_or_else(|| Error::RankDeficient("information matrix is singular".into()))?;
        let step = chol.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let cand_ll = binary_loglik(x, y, &cand, link);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let norm = beta.norm();
        if norm > SEPARATION_NORM {
            return Err(Error::Separation { norm });
        }
        if !accepted {
            break;
        }
    }
    let gn = binary_gradient(x, y, &beta, link).norm();
    if gn < grad_tol.max(1e-6) && !perfectly_separated(x, y, &beta, link) {
        let neg_h = SymMatrix::symmetrized(-binary_hessian(x, y, &beta, link));
        let cov = spd_inverse(&neg_h).map_err(|_| Error::RankDeficient("information matrix is singular".into()))?;
        return Ok(BinaryFit {
            beta,
            cov,
            link,
            iterations: MAX_ITER,
            grad_norm: gn,
        });
    }
    Err(Error::Separation { norm: beta.norm() })
}

/// Every fitted probability within 1e-6 of its observed class: the MLE
/// only exists at infinity and the Newton iterate stopped on a flat gradient.
fn perfectly_separated(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, link: Link) -> bool {
    let eta = x * beta;
    eta.iter().zip(y).all(|(&e, &yi)| (link.inverse(e) - yi).abs() < 1e-6)
}

/// Approximate posterior draw `N(β̂, I(β̂)⁻¹)`.
pub fn draw_binary_posterior(fit: &BinaryFit, rng: &mut RngStream) -> Result<DVector<f64>> {
    let l = cholesky(&fit.cov)?;
    Ok(draw_mvn_factor(rng, &fit.beta, &l))
}
