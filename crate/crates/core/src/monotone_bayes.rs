//! Factored-likelihood estimation and exact posterior draws for monotone
//! missingness.
//!
//! With columns ordered so that `Y_k` is observed whenever `Y_{k+1}` is, the
//! likelihood factors into the marginal of `Y_1` and the regressions of each
//! `Y_k` on `Y_1..Y_{k−1}`, each fitted on the cases where `Y_k` is observed.
//! Under independent uniform priors per block, posterior draws of the block
//! parameters are independent standard regression draws.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::{analyze_patterns, compute_mask, DataMatrix};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::mvn_em::MvnParams;
use crate::regression::{draw_linear_posterior, least_squares, LeastSquares};
use crate::sampler::RngStream;

/// Maps the values of the preceding variables (in monotone order) to the
/// regression features of one block, excluding the intercept.
pub type FeatureMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Per-block regression features. Blocks without a map use the preceding
/// variables linearly.
#[derive(Clone, Default)]
pub struct MonotoneModel {
    features: Vec<Option<FeatureMap>>,
}

impl fmt::Debug for MonotoneModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonotoneModel")
            .field("custom_blocks", &self.features.iter().filter(|m| m.is_some()).count())
            .finish()
    }
}

impl MonotoneModel {
    pub fn linear() -> Self {
        Self::default()
    }

    /// Uses `map` for the block at position `k` (0-based) of the monotone
    /// order.
    pub fn with_block(mut self, k: usize, map: FeatureMap) -> Self {
        if self.features.len() <= k {
            self.features.resize(k + 1, None);
        }
        self.features[k] = Some(map);
        self
    }

    fn map(&self, k: usize) -> Option<&FeatureMap> {
        self.features.get(k).and_then(Option::as_ref)
    }

    fn is_linear(&self) -> bool {
        self.features.iter().all(Option::is_none)
    }

    fn design_row(&self, k: usize, preceding: &[f64]) -> Vec<f64> {
        let mut row = vec![1.0];
        match self.map(k) {
            Some(f) => row.extend(f(preceding)),
            None => row.extend_from_slice(preceding),
        }
        row
    }
}

/// One factor of the likelihood: the regression of a variable on those
/// before it in monotone order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRegression {
    /// Original column index of the response.
    pub column: usize,
    /// Intercept first, then feature coefficients.
    pub coefficients: DVector<f64>,
    pub residual_variance: f64,
    /// Cases with this variable observed (`r_k`).
    pub n_cases: usize,
}

impl BlockRegression {
    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.coefficients.as_slice()[1..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredParams {
    /// Column permutation making the pattern monotone.
    pub order: Vec<usize>,
    pub blocks: Vec<BlockRegression>,
}

impl FactoredParams {
    /// Back-substitutes the block regressions into the joint mean and
    /// covariance, in original column order. Only meaningful for linear
    /// blocks.
    pub fn to_mvn(&self) -> Result<MvnParams> {
        let k = self.order.len();
        let mut mu = vec![0.0; k];
        let mut s = DMatrix::<f64>::zeros(k, k);
        for (pos, block) in self.blocks.iter().enumerate() {
            let b = block.slopes();
            if b.len() != pos {
                return Err(Error::InvalidParameter(
                    "joint normal parameters need linear blocks".into(),
                ));
            }
            let mut m = block.intercept();
            for (p, &bp) in b.iter().enumerate() {
                m += bp * mu[p];
            }
            mu[pos] = m;
            for p in 0..pos {
                let c: f64 = b.iter().enumerate().map(|(q, &bq)| bq * s[(q, p)]).sum();
                s[(pos, p)] = c;
                s[(p, pos)] = c;
            }
            let mut v = block.residual_variance;
            for (p, &bp) in b.iter().enumerate() {
                for (q, &bq) in b.iter().enumerate() {
                    v += bp * bq * s[(p, q)];
                }
            }
            s[(pos, pos)] = v;
        }
        let mut mu_orig = DVector::zeros(k);
        let mut s_orig = DMatrix::zeros(k, k);
        for (a, &ca) in self.order.iter().enumerate() {
            mu_orig[ca] = mu[a];
            for (b, &cb) in self.order.iter().enumerate() {
                s_orig[(ca, cb)] = s[(a, b)];
            }
        }
        Ok(MvnParams {
            mu: mu_orig,
            sigma: SymMatrix::symmetrized(s_orig),
        })
    }
}

/// Least-squares fit of every block, kept for posterior drawing.
#[derive(Debug, Clone)]
pub struct FactoredFit {
    pub params: FactoredParams,
    /// Joint normal ML estimate; present when every block is linear.
    pub mvn: Option<MvnParams>,
    model: MonotoneModel,
    ls: Vec<LeastSquares>,
}

impl FactoredFit {
    pub fn model(&self) -> &MonotoneModel {
        &self.model
    }
}

pub fn monotone_order(data: &DataMatrix) -> Result<Vec<usize>> {
    analyze_patterns(&compute_mask(data))
        .monotone_order
        .ok_or(Error::NotMonotone)
}

pub fn fit_factored_ml(data: &DataMatrix) -> Result<FactoredFit> {
    fit_factored_ml_with(data, &MonotoneModel::linear())
}

pub fn fit_factored_ml_with(data: &DataMatrix, model: &MonotoneModel) -> Result<FactoredFit> {
    let order = monotone_order(data)?;
    let mut blocks = Vec::with_capacity(order.len());
    let mut fits = Vec::with_capacity(order.len());
    for (pos, &col) in order.iter().enumerate() {
        let rows: Vec<usize> = (0..data.n_rows()).filter(|&i| !data.is_missing(i, col)).collect();
        let design: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| {
                let preceding: Vec<f64> = order[..pos].iter().map(|&c| data.value(i, c)).collect();
                model.design_row(pos, &preceding)
            })
            .collect();
        let q = design.first().map_or(pos + 1, Vec::len);
        let r = rows.len();
        if r < q {
            return Err(Error::InsufficientCases(format!(
                "column `{}` has {r} observed cases, its regression needs at least {q}",
                data.columns()[col].name
            )));
        }
        let x = DMatrix::from_fn(r, q, |a, b| design[a][b]);
        let y = DVector::from_iterator(r, rows.iter().map(|&i| data.value(i, col)));
        let ls = least_squares(&x, &y)?;
        blocks.push(BlockRegression {
            column: col,
            coefficients: ls.beta.clone(),
            residual_variance: ls.rss / r as f64,
            n_cases: r,
        });
        fits.push(ls);
    }
    let params = FactoredParams { order, blocks };
    let mvn = if model.is_linear() {
        Some(params.to_mvn()?)
    } else {
        None
    };
    Ok(FactoredFit {
        params,
        mvn,
        model: model.clone(),
        ls: fits,
    })
}

/// One posterior draw of the block parameters: per block,
/// `σ²⁽ᵈ⁾ = r_k σ̂²_k / χ²_{r_k − q_k}` and
/// `β⁽ᵈ⁾ ~ N(β̂_k, σ²⁽ᵈ⁾ (XᵀX)⁻¹)` with `q_k` coefficients.
pub fn draw_factored_params(fit: &FactoredFit, rng: &mut RngStream) -> Result<FactoredParams> {
    let mut blocks = Vec::with_capacity(fit.ls.len());
    for (block, ls) in fit.params.blocks.iter().zip(&fit.ls) {
        let (coefficients, residual_variance) = draw_linear_posterior(ls, rng)?;
        blocks.push(BlockRegression {
            column: block.column,
            coefficients,
            residual_variance,
            n_cases: block.n_cases,
        });
    }
    Ok(FactoredParams {
        order: fit.params.order.clone(),
        blocks,
    })
}

/// `n_draws` independent posterior draws of the joint normal parameters;
/// draw `d` uses substream `d` of `rng`.
pub fn draw_factored_posterior(data: &DataMatrix, n_draws: usize, rng: &RngStream) -> Result<Vec<MvnParams>> {
    let fit = fit_factored_ml(data)?;
    (0..n_draws)
        .into_par_iter()
        .map(|d| {
            let mut stream = rng.substream(d as u64);
            draw_factored_params(&fit, &mut stream)?.to_mvn()
        })
        .collect()
}

/// Fills missing cells block by block in monotone order with
/// `β·features + ε`, `ε ~ N(0, σ²)`; `noise = false` imputes the regression
/// prediction itself.
pub fn impute_with_params(
    data: &DataMatrix,
    params: &FactoredParams,
    model: &MonotoneModel,
    noise: bool,
    rng: &mut RngStream,
) -> Result<DataMatrix> {
    let mut out = data.clone();
    for (pos, block) in params.blocks.iter().enumerate() {
        let col = block.column;
        let sd = block.residual_variance.sqrt();
        for i in 0..data.n_rows() {
            if !data.is_missing(i, col) {
                continue;
            }
            let preceding: Vec<f64> = params.order[..pos].iter().map(|&c| out.value(i, c)).collect();
            let x = model.design_row(pos, &preceding);
            let mean: f64 = x.iter().zip(block.coefficients.iter()).map(|(a, b)| a * b).sum();
            let value = if noise { mean + sd * rng.standard_normal() } else { mean };
            out.set(i, col, value);
        }
    }
    Ok(out)
}

/// `d_count` multiple imputations, each from its own posterior draw of the
/// block parameters (imputation `d` uses substream `d`).
pub fn impute_monotone_m(data: &DataMatrix, d_count: usize, rng: &RngStream) -> Result<Vec<DataMatrix>> {
    impute_monotone_m_with(data, &MonotoneModel::linear(), d_count, rng)
}

pub fn impute_monotone_m_with(
    data: &DataMatrix,
    model: &MonotoneModel,
    d_count: usize,
    rng: &RngStream,
) -> Result<Vec<DataMatrix>> {
    let fit = fit_factored_ml_with(data, model)?;
    (0..d_count)
        .into_par_iter()
        .map(|d| {
            let mut stream = rng.substream(d as u64);
            let params = draw_factored_params(&fit, &mut stream)?;
            impute_with_params(data, &params, &fit.model, true, &mut stream)
        })
        .collect()
}
