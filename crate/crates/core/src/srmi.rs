//! Sequential regression (chained equations) imputation for mixed
//! continuous and binary variables.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataMatrix, VariableKind};
use crate::error::{Error, Result};
use crate::regression::{draw_binary_posterior, draw_linear_posterior, fit_binary, least_squares, Link};
use crate::sampler::{draw_bernoulli, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Linear,
    Logistic,
}

impl Family {
    pub fn for_kind(kind: VariableKind) -> Family {
        match kind {
            VariableKind::Continuous => Family::Linear,
            VariableKind::Binary => Family::Logistic,
        }
    }
}

/// Conditional model for one column, by column name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModelSpec {
    pub target: String,
    /// Defaults to every other column.
    #[serde(default)]
    pub predictors: Option<Vec<String>>,
    /// Defaults to the family matching the column kind.
    #[serde(default)]
    pub family: Option<Family>,
}

/// A spec with names resolved to column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSpec {
    pub target: usize,
    pub predictors: Vec<usize>,
    pub family: Family,
}

/// One spec per column with missing cells, in column order.
pub fn default_specs(data: &DataMatrix) -> Vec<ConditionalModelSpec> {
    (0..data.n_cols())
        .filter(|&j| data.observed_count(j) < data.n_rows())
        .map(|j| ConditionalModelSpec {
            target: data.columns()[j].name.clone(),
            predictors: None,
            family: None,
        })
        .collect()
}

pub fn resolve_specs(data: &DataMatrix, specs: &[ConditionalModelSpec]) -> Result<Vec<ResolvedSpec>> {
    let lookup = |name: &str| {
        data.column_index(name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown column `{name}`")))
    };
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let target = lookup(&spec.target)?;
        let predictors = match &spec.predictors {
            Some(names) => names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?,
            None => (0..data.n_cols()).filter(|&j| j != target).collect(),
        };
        if predictors.contains(&target) {
            return Err(Error::InvalidParameter(format!(
                "column `{}` cannot predict itself",
                spec.target
            )));
        }
        let kind = data.columns()[target].kind;
        let family = spec.family.unwrap_or(Family::for_kind(kind));
        if family != Family::for_kind(kind) {
            return Err(Error::InvalidParameter(format!(
                "family {family:?} does not match the kind of column `{}`",
                spec.target
            )));
        }
        out.push(ResolvedSpec {
            target,
            predictors,
            family,
        });
    }
    for j in 0..data.n_cols() {
        if data.observed_count(j) < data.n_rows() && !out.iter().any(|s| s.target == j) {
            return Err(Error::InvalidParameter(format!(
                "column `{}` has missing cells but no model",
                data.columns()[j].name
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrmiConfig {
    pub n_cycles: usize,
    pub n_imputations: usize,
}

impl Default for SrmiConfig {
    fn default() -> Self {
        SrmiConfig {
            n_cycles: 10,
            n_imputations: 5,
        }
    }
}

impl SrmiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_cycles == 0 {
            return Err(Error::InvalidParameter("n_cycles must be at least 1".into()));
        }
        if self.n_imputations == 0 {
            return Err(Error::InvalidParameter("n_imputations must be at least 1".into()));
        }
        Ok(())
    }
}

/// `Noiseless` replaces every draw by its centre (estimates and fitted
/// values), which turns a cycle into deterministic regression prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DrawMode {
    #[default]
    Posterior,
    Noiseless,
}

/// Fills missing cells with draws from each column's observed values
/// (continuous) or a Bernoulli at the observed rate (binary).
pub fn initial_impute(data: &DataMatrix, rng: &mut RngStream) -> Result<DataMatrix> {
    let mut out = data.clone();
    for j in 0..data.n_cols() {
        if data.observed_count(j) == data.n_rows() {
            continue;
        }
        let observed: Vec<f64> = data.observed_column(j).collect();
        if observed.len() < 2 {
            return Err(Error::InsufficientCases(format!(
                "column `{}` has {} observed values, at least 2 are needed",
                data.columns()[j].name,
                observed.len()
            )));
        }
        let rate = observed.iter().sum::<f64>() / observed.len() as f64;
        for i in 0..data.n_rows() {
            if data.is_missing(i, j) {
                let v = match data.columns()[j].kind {
                    VariableKind::Continuous => observed[rng.index(observed.len())],
                    VariableKind::Binary => draw_bernoulli(rng, rate)? as f64,
                };
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Drawn parameters of one conditional model. `sigma2` is `None` for the
/// logistic family.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDraw {
    pub beta: DVector<f64>,
    pub sigma2: Option<f64>,
}

fn design_row(values: &[f64], spec: &ResolvedSpec) -> Vec<f64> {
    std::iter::once(1.0)
        .chain(spec.predictors.iter().map(|&p| values[p]))
        .collect()
}

/// Draws the parameters of `spec` from their posterior given the rows of
/// `original` where the target is observed, with predictors taken from
/// `completed`.
pub fn draw_model_posterior(
    original: &DataMatrix,
    completed: &DataMatrix,
    spec: &ResolvedSpec,
    mode: DrawMode,
    rng: &mut RngStream,
) -> Result<ModelDraw> {
    let rows: Vec<usize> = (0..original.n_rows())
        .filter(|&i| !original.is_missing(i, spec.target))
        .collect();
    let q = spec.predictors.len() + 1;
    let x = DMatrix::from_fn(rows.len(), q, |a, b| {
        if b == 0 {
            1.0
        } else {
            completed.value(rows[a], spec.predictors[b - 1])
        }
    });
    let y: Vec<f64> = rows.iter().map(|&i| completed.value(i, spec.target)).collect();
    match spec.family {
        Family::Linear => {
            let fit = least_squares(&x, &DVector::from_vec(y))?;
            match mode {
                DrawMode::Noiseless => {
                    let sigma2 = fit.rss / fit.n as f64;
                    Ok(ModelDraw {
                        beta: fit.beta,
                        sigma2: Some(sigma2),
                    })
                }
                DrawMode::Posterior => {
                    let (beta, sigma2) = draw_linear_posterior(&fit, rng)?;
                    Ok(ModelDraw {
                        beta,
                        sigma2: Some(sigma2),
                    })
                }
            }
        }
        Family::Logistic => {
            let fit = fit_binary(&x, &y, Link::Logit, 1e-8)?;
            let beta = match mode {
                DrawMode::Noiseless => fit.beta,
                DrawMode::Posterior => draw_binary_posterior(&fit, rng)?,
            };
            Ok(ModelDraw { beta, sigma2: None })
        }
    }
}

/// One pass over `specs` in order: draw each model's parameters, then
/// redraw the originally missing cells of its target given the current
/// values of every other column.
pub fn srmi_cycle(
    original: &DataMatrix,
    completed: &DataMatrix,
    specs: &[ResolvedSpec],
    mode: DrawMode,
    rng: &mut RngStream,
) -> Result<DataMatrix> {
    if !completed.is_complete() {
        return Err(Error::InvalidData("a cycle needs a completed dataset".into()));
    }
    if completed.n_rows() != original.n_rows() || completed.n_cols() != original.n_cols() {
        return Err(Error::Dimension("completed and original data differ in shape".into()));
    }
    let mut current = completed.clone();
    for spec in specs {
        if original.observed_count(spec.target) == original.n_rows() {
            continue;
        }
        let draw = draw_model_posterior(original, &current, spec, mode, rng)?;
        for i in 0..original.n_rows() {
            if !original.is_missing(i, spec.target) {
                continue;
            }
            let x = design_row(current.row(i), spec);
            let eta: f64 = x.iter().zip(draw.beta.iter()).map(|(a, b)| a * b).sum();
            let v = match (spec.family, mode) {
                (Family::Linear, DrawMode::Posterior) => rng.normal(eta, draw.sigma2.unwrap_or(0.0).sqrt()),
                (Family::Linear, DrawMode::Noiseless) => eta,
                (Family::Logistic, DrawMode::Posterior) => draw_bernoulli(rng, Link::Logit.inverse(eta))? as f64,
                (Family::Logistic, DrawMode::Noiseless) => {
                    if eta >= 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            current.set(i, spec.target, v);
        }
    }
    Ok(current)
}

#[derive(Debug, Clone)]
pub struct SrmiResult {
    pub datasets: Vec<DataMatrix>,
    /// `traces[d][t][s]`: mean of the target of spec `s` after cycle `t`
    /// of chain `d`, for convergence diagnostics.
    pub traces: Vec<Vec<Vec<f64>>>,
}

/// `config.n_imputations` independent chains, chain `d` on substream `d`,
/// each started from [`initial_impute`] and run for `config.n_cycles`.
pub fn run_srmi(
    data: &DataMatrix,
    specs: &[ConditionalModelSpec],
    config: &SrmiConfig,
    rng: &RngStream,
) -> Result<SrmiResult> {
    run_srmi_with(data, specs, config, DrawMode::Posterior, rng)
}

pub fn run_srmi_with(
    data: &DataMatrix,
    specs: &[ConditionalModelSpec],
    config: &SrmiConfig,
    mode: DrawMode,
    rng: &RngStream,
) -> Result<SrmiResult> {
    config.validate()?;
    let resolved = resolve_specs(data, specs)?;
    let chains: Vec<(DataMatrix, Vec<Vec<f64>>)> = (0..config.n_imputations)
        .into_par_iter()
        .map(|d| {
            let mut stream = rng.substream(d as u64);
            let mut current = initial_impute(data, &mut stream)?;
            let mut trace = Vec::with_capacity(config.n_cycles);
            for _ in 0..config.n_cycles {
                current = srmi_cycle(data, &current, &resolved, mode, &mut stream)?;
                let n = current.n_rows() as f64;
                trace.push(
                    resolved
                        .iter()
                        .map(|s| current.column(s.target).iter().sum::<f64>() / n)
                        .collect(),
                );
            }
            Ok((current, trace))
        })
        .collect::<Result<_>>()?;
    let (datasets, traces) = chains.into_iter().unzip();
    Ok(SrmiResult { datasets, traces })
}
