//! Frequentist calibration of the Bayesian machinery: coverage simulation,
//! posterior predictive checks, and the potential scale reduction factor.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{compute_mask, format_cell, DataMatrix, MissingMask};
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, SymMatrix};
use crate::mi_pool::{interval, pool, PerImputationEstimate};
use crate::monotone_bayes::impute_monotone_m;
use crate::mvn_da::{impute_da_m, DaConfig};
use crate::mvn_em::MvnParams;
use crate::pspp::{impute_pspp_m, PsppConfig};
use crate::regression::Link;
use crate::sampler::{draw_mvn_factor, RngStream};
use crate::srmi::{default_specs, run_srmi, SrmiConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "one")]
    pub sd: f64,
}

fn one() -> f64 {
    1.0
}

/// `coef · covariate^power`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTerm {
    pub covariate: String,
    #[serde(default = "first_power")]
    pub power: u32,
    pub coef: f64,
}

fn first_power() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSpec {
    pub name: String,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub terms: Vec<OutcomeTerm>,
    #[serde(default = "one")]
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    /// Rows from `N(μ, Σ)`, `Σ` row-major. Columns are `names` or
    /// `y1, y2, …`.
    Mvn {
        mu: Vec<f64>,
        sigma: Vec<f64>,
        #[serde(default)]
        names: Option<Vec<String>>,
    },
    /// Independent normal covariates and a polynomial outcome with normal
    /// noise; the outcome is the last column.
    Structural {
        covariates: Vec<CovariateSpec>,
        outcome: OutcomeSpec,
    },
}

impl Truth {
    pub fn names(&self) -> Vec<String> {
        match self {
            Truth::Mvn { mu, names, .. } => names
                .clone()
                .unwrap_or_else(|| (1..=mu.len()).map(|j| format!("y{j}")).collect()),
            Truth::Structural { covariates, outcome } => covariates
                .iter()
                .map(|c| c.name.clone())
                .chain(std::iter::once(outcome.name.clone()))
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let names = self.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() || names.is_empty() {
            return Err(Error::InvalidParameter(
                "truth column names must be unique and nonempty".into(),
            ));
        }
        match self {
            Truth::Mvn { mu, sigma, .. } => {
                let s = SymMatrix::from_row_slice(mu.len(), sigma)?;
                MvnParams::new(DVector::from_column_slice(mu), s)?;
            }
            Truth::Structural { covariates, outcome } => {
                if covariates.iter().any(|c| !(c.sd > 0.0)) || !(outcome.noise_sd >= 0.0) {
                    return Err(Error::InvalidParameter("standard deviations must be positive".into()));
                }
                for t in &outcome.terms {
                    if !covariates.iter().any(|c| c.name == t.covariate) {
                        return Err(Error::InvalidParameter(format!(
                            "outcome term uses unknown covariate `{}`",
                            t.covariate
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn generate(&self, n: usize, rng: &mut RngStream) -> Result<DataMatrix> {
        let names = self.names();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let k = names.len();
        let mut values = Vec::with_capacity(n * k);
        match self {
            Truth::Mvn { mu, sigma, .. } => {
                let mean = DVector::from_column_slice(mu);
                let l = psd_factor(&SymMatrix::from_row_slice(k, sigma)?, 1e-12)?;
                for _ in 0..n {
                    values.extend(draw_mvn_factor(rng, &mean, &l).iter());
                }
            }
            Truth::Structural { covariates, outcome } => {
                for _ in 0..n {
                    let x: Vec<f64> = covariates.iter().map(|c| rng.normal(c.mean, c.sd)).collect();
                    let mut y = outcome.intercept;
                    for t in &outcome.terms {
                        let j = covariates.iter().position(|c| c.name == t.covariate).unwrap_or(0);
                        y += t.coef * x[j].powi(t.power as i32);
                    }
                    y += outcome.noise_sd * rng.standard_normal();
                    values.extend(x);
                    values.push(y);
                }
            }
        }
        DataMatrix::from_complete(&refs, n, values)
    }

    /// Population value of `estimand`.
    pub fn value(&self, estimand: &Estimand) -> Result<f64> {
        let name = estimand.column();
        let j = self
            .names()
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown estimand column `{name}`")))?;
        match (self, estimand) {
            (Truth::Mvn { mu, .. }, Estimand::Mean(_)) => Ok(mu[j]),
            (Truth::Mvn { mu, sigma, .. }, Estimand::Variance(_)) => Ok(sigma[j * mu.len() + j]),
            (Truth::Structural { covariates, .. }, Estimand::Mean(_)) if j < covariates.len() => Ok(covariates[j].mean),
            (Truth::Structural { covariates, .. }, Estimand::Variance(_)) if j < covariates.len() => {
                Ok(covariates[j].sd.powi(2))
            }
            (Truth::Structural { covariates, outcome }, Estimand::Mean(_)) => {
                let mut m = outcome.intercept;
                for t in &outcome.terms {
                    let c = covariates
                        .iter()
                        .find(|c| c.name == t.covariate)
                        .ok_or_else(|| Error::InvalidParameter(format!("unknown covariate `{}`", t.covariate)))?;
                    m += t.coef * normal_moment(c.mean, c.sd, t.power)?;
                }
                Ok(m)
            }
            (Truth::Structural { covariates, outcome }, Estimand::Variance(_)) => {
                let mut v = outcome.noise_sd.powi(2);
                let mut seen = Vec::new();
                for t in &outcome.terms {
                    if t.power != 1 || seen.contains(&&t.covariate) {
                        return Err(Error::InvalidParameter(
                            "outcome variance is only available for distinct linear terms".into(),
                        ));
                    }
                    seen.push(&t.covariate);
                    let c = covariates
                        .iter()
                        .find(|c| c.name == t.covariate)
                        .ok_or_else(|| Error::InvalidParameter(format!("unknown covariate `{}`", t.covariate)))?;
                    v += (t.coef * c.sd).powi(2);
                }
                Ok(v)
            }
        }
    }
}

/// `E[X^p]` for `X ~ N(m, s²)`, `p ≤ 4`.
fn normal_moment(m: f64, s: f64, p: u32) -> Result<f64> {
    let v = s * s;
    Ok(match p {
        0 => 1.0,
        1 => m,
        2 => m * m + v,
        3 => m.powi(3) + 3.0 * m * v,
        4 => m.powi(4) + 6.0 * m * m * v + 3.0 * v * v,
        _ => return Err(Error::InvalidParameter(format!("outcome term power {p} is above 4"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Each cell of `columns` is deleted independently with probability
    /// `rate`.
    Mcar { rate: f64, columns: Vec<String> },
    /// `target` is observed with probability `inverse_link(intercept +
    /// Σ coefs_j x_j + Σ quadratic_j x_j²)`, all `x_j` always observed.
    Mar {
        target: String,
        #[serde(default)]
        intercept: f64,
        #[serde(default)]
        coefs: BTreeMap<String, f64>,
        #[serde(default)]
        quadratic: BTreeMap<String, f64>,
        #[serde(default)]
        link: Link,
    },
}

impl Mechanism {
    fn validate(&self, names: &[String]) -> Result<()> {
        let known = |n: &String| {
            names
                .contains(n)
                .then_some(())
                .ok_or_else(|| Error::InvalidParameter(format!("mechanism references unknown column `{n}`")))
        };
        match self {
            Mechanism::Mcar { rate, columns } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::InvalidParameter(format!(
                        "MCAR rate must lie in [0, 1), got {rate}"
                    )));
                }
                columns.iter().try_for_each(known)
            }
            Mechanism::Mar {
                target,
                coefs,
                quadratic,
                ..
            } => {
                known(target)?;
                for name in coefs.keys().chain(quadratic.keys()) {
                    known(name)?;
                    if name == target {
                        return Err(Error::InvalidParameter(
                            "MAR coefficients must reference always-observed columns".into(),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn apply(&self, data: &DataMatrix, rng: &mut RngStream) -> Result<DataMatrix> {
        let n = data.n_rows();
        let k = data.n_cols();
        let col = |name: &str| {
            data.column_index(name)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown column `{name}`")))
        };
        let mut missing = vec![false; n * k];
        match self {
            Mechanism::Mcar { rate, columns } => {
                let cols = columns.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
                for i in 0..n {
                    for &j in &cols {
                        missing[i * k + j] = rng.uniform() < *rate;
                    }
                }
            }
            Mechanism::Mar {
                target,
                intercept,
                coefs,
                quadratic,
                link,
            } => {
                let t = col(target)?;
                let lin = coefs
                    .iter()
                    .map(|(c, b)| Ok((col(c)?, *b)))
                    .collect::<Result<Vec<_>>>()?;
                let quad = quadratic
                    .iter()
                    .map(|(c, b)| Ok((col(c)?, *b)))
                    .collect::<Result<Vec<_>>>()?;
                for i in 0..n {
                    let row = data.row(i);
                    let eta = intercept
                        + lin.iter().map(|&(j, b)| b * row[j]).sum::<f64>()
                        + quad.iter().map(|&(j, b)| b * row[j] * row[j]).sum::<f64>();
                    missing[i * k + t] = rng.uniform() >= link.inverse(eta);
                }
            }
        }
        Ok(data.with_missing(|i, j| missing[i * k + j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Mean(String),
    Variance(String),
}

impl Estimand {
    pub fn column(&self) -> &str {
        match self {
            Estimand::Mean(c) | Estimand::Variance(c) => c,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Estimand::Mean(c) => format!("mean:{c}"),
            Estimand::Variance(c) => format!("variance:{c}"),
        }
    }

    /// Complete-data estimate and its variance: `(ȳ, s²/n)` for a mean,
    /// `(s², 2s⁴/(n−1))` for a variance.
    pub fn estimate(&self, completed: &DataMatrix) -> Result<PerImputationEstimate> {
        let j = completed
            .column_index(self.column())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown estimand column `{}`", self.column())))?;
        let y = completed.column(j);
        let n = y.len() as f64;
        if n < 2.0 {
            return Err(Error::InsufficientCases("estimands need at least 2 rows".into()));
        }
        let mean = y.iter().sum::<f64>() / n;
        let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        match self {
            Estimand::Mean(_) => PerImputationEstimate::scalar(mean, s2 / n),
            Estimand::Variance(_) => PerImputationEstimate::scalar(s2, 2.0 * s2 * s2 / (n - 1.0)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Da,
    Srmi,
    Monotone,
    Pspp,
}

fn default_level() -> f64 {
    0.95
}

fn default_d() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub truth: Truth,
    pub mechanism: Mechanism,
    pub n: usize,
    pub replicates: usize,
    pub method: Method,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    pub estimand: Estimand,
    /// Complete-data df for the small-sample correction; default `n − 1`.
    #[serde(default)]
    pub nu_com: Option<f64>,
    /// Data-augmentation burn-in; default 200.
    #[serde(default)]
    pub burn_in: Option<usize>,
    /// Chained-equation cycles; default 10.
    #[serde(default)]
    pub n_cycles: Option<usize>,
    #[serde(default)]
    pub pspp: Option<PsppConfig>,
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("replicates must be at least 1".into()));
        }
        if self.n < 3 {
            return Err(Error::InvalidParameter("n must be at least 3".into()));
        }
        if self.d < 2 {
            return Err(Error::InvalidParameter("D must be at least 2 for pooling".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        self.truth.validate()?;
        self.mechanism.validate(&self.truth.names())?;
        self.truth.value(&self.estimand)?;
        Ok(())
    }

    /// `D` completed datasets from `data` under the scenario's method.
    pub fn impute(&self, data: &DataMatrix, rng: &RngStream) -> Result<Vec<DataMatrix>> {
        if data.is_complete() {
            return Ok(vec![data.clone(); self.d]);
        }
        match self.method {
            Method::Da => {
                let config = DaConfig {
                    n_chains: 1,
                    burn_in: self.burn_in.unwrap_or(200),
                    n_draws: 0,
                    ..DaConfig::default()
                };
                Ok(impute_da_m(data, &config, self.d, rng)?.datasets)
            }
            Method::Srmi => {
                let config = SrmiConfig {
                    n_cycles: self.n_cycles.unwrap_or(10),
                    n_imputations: self.d,
                };
                Ok(run_srmi(data, &default_specs(data), &config, rng)?.datasets)
            }
            Method::Monotone => impute_monotone_m(data, self.d, rng),
            Method::Pspp => {
                let config = self.pspp.clone().unwrap_or_default();
                Ok(impute_pspp_m(data, &config, self.d, rng)?.datasets)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    pub covered: bool,
    /// `None` when infinite.
    pub df: Option<f64>,
    pub fmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub estimand: String,
    pub method: Method,
    pub truth: f64,
    pub replicates: usize,
    pub level: f64,
    pub coverage: f64,
    pub avg_width: f64,
    pub bias: f64,
    /// `sqrt(c(1 − c)/R)`.
    pub mc_se: f64,
    pub mean_fmi: f64,
}

/// One simulated replicate: generate, delete, impute, pool.
pub fn run_replicate(scenario: &SimScenario, truth: f64, index: usize, rng: &RngStream) -> Result<ReplicateRecord> {
    let stream = rng.substream(index as u64);
    let mut gen = stream.substream(0);
    let full = scenario.truth.generate(scenario.n, &mut gen)?;
    let data = scenario.mechanism.apply(&full, &mut gen)?;
    let completed = scenario.impute(&data, &stream.substream(1))?;
    let estimates = completed
        .iter()
        .map(|c| scenario.estimand.estimate(c))
        .collect::<Result<Vec<_>>>()?;
    let nu_com = scenario.nu_com.unwrap_or(scenario.n as f64 - 1.0);
    let pooled = pool(&estimates, Some(nu_com))?;
    let (lower, upper) = interval(&pooled, 0, scenario.level)?;
    Ok(ReplicateRecord {
        replicate: index,
        estimate: pooled.theta_bar[0],
        se: pooled.se(0),
        lower,
        upper,
        covered: lower <= truth && truth <= upper,
        df: pooled.df[0].is_finite().then_some(pooled.df[0]),
        fmi: pooled.fmi[0],
    })
}

/// Runs every replicate (in parallel, replicate `r` on substream `r`) and
/// summarizes interval coverage of the true estimand.
pub fn run_coverage(scenario: &SimScenario, rng: &RngStream) -> Result<(CoverageReport, Vec<ReplicateRecord>)> {
    scenario.validate()?;
    let truth = scenario.truth.value(&scenario.estimand)?;
    let records: Vec<ReplicateRecord> = (0..scenario.replicates)
        .into_par_iter()
        .map(|r| run_replicate(scenario, truth, r, rng))
        .collect::<Result<_>>()?;
    let r = records.len() as f64;
    let coverage = records.iter().filter(|x| x.covered).count() as f64 / r;
    Ok((
        CoverageReport {
            estimand: scenario.estimand.label(),
            method: scenario.method,
            truth,
            replicates: records.len(),
            level: scenario.level,
            coverage,
            avg_width: records.iter().map(|x| x.upper - x.lower).sum::<f64>() / r,
            bias: records.iter().map(|x| x.estimate - truth).sum::<f64>() / r,
            mc_se: (coverage * (1.0 - coverage) / r).sqrt(),
            mean_fmi: records.iter().map(|x| x.fmi).sum::<f64>() / r,
        },
        records,
    ))
}

pub fn write_replicates_csv<W: Write>(records: &[ReplicateRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "estimate", "se", "lower", "upper", "covered", "df", "fmi"])?;
    for r in records {
        w.write_record([
            r.replicate.to_string(),
            format_cell(r.estimate),
            format_cell(r.se),
            format_cell(r.lower),
            format_cell(r.upper),
            u8::from(r.covered).to_string(),
            r.df.map_or_else(|| "inf".to_string(), format_cell),
            format_cell(r.fmi),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Potential scale reduction factor for `m ≥ 2` chains of equal length
/// `n ≥ 4`: `sqrt(V̂/W)` with `V̂ = (n−1)/n·W + B/n`, `W` the mean
/// within-chain variance and `B/n` the variance of the chain means, floored
/// at 1. Zero within-chain variance gives 1 when the chains agree and
/// infinity otherwise.
pub fn psrf(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 chains, got {m}")));
    }
    let n = chains[0].len();
    if n < 4 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::InvalidParameter(
            "chains must share a length of at least 4".into(),
        ));
    }
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mc)| c.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b_over_n = means.iter().map(|mc| (mc - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    // Spread below rounding noise of the values counts as none.
    let scale = chains
        .iter()
        .flatten()
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let noise = (1e-14 * scale).powi(2);
    if w <= noise {
        return Ok(if b_over_n <= noise { 1.0 } else { f64::INFINITY });
    }
    let v_hat = (nf - 1.0) / nf * w + b_over_n;
    Ok((v_hat / w).sqrt().max(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsrfReport {
    pub parameters: Vec<String>,
    /// `None` stands for the infinite sentinel.
    pub rhat: Vec<Option<f64>>,
    pub n_chains: usize,
    pub n_draws: usize,
}

impl PsrfReport {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().map(|r| r.unwrap_or(f64::INFINITY)).fold(1.0, f64::max)
    }
}

/// [`psrf`] for every parameter; `traces[c][t][p]` is parameter `p` at
/// draw `t` of chain `c`.
pub fn psrf_report(parameters: &[String], traces: &[Vec<Vec<f64>>]) -> Result<PsrfReport> {
    let n_draws = traces.first().map_or(0, Vec::len);
    let rhat = (0..parameters.len())
        .map(|p| {
            let chains: Vec<Vec<f64>> = traces.iter().map(|c| c.iter().map(|d| d[p]).collect()).collect();
            psrf(&chains).map(|r| r.is_finite().then_some(r))
        })
        .collect::<Result<_>>()?;
    Ok(PsrfReport {
        parameters: parameters.to_vec(),
        rhat,
        n_chains: traces.len(),
        n_draws,
    })
}

/// Built-in discrepancy statistics, each evaluated on observed cells only.
#[derive(Debug, Clone, PartialEq)]
pub enum Discrepancy {
    Mean(usize),
    Variance(usize),
    /// Sample excess kurtosis.
    Kurtosis(usize),
    /// Largest absolute pairwise correlation over rows observing both.
    MaxCorrelation,
}

impl Discrepancy {
    /// Parses `mean:<col>`, `variance:<col>`, `kurtosis:<col>` or
    /// `max_correlation`.
    pub fn parse(name: &str, data: &DataMatrix) -> Result<Self> {
        if name == "max_correlation" {
            return Ok(Discrepancy::MaxCorrelation);
        }
        let (kind, col) = name
            .split_once(':')
            .ok_or_else(|| Error::UnknownDiscrepancy(name.to_string()))?;
        let j = data
            .column_index(col)
            .ok_or_else(|| Error::UnknownDiscrepancy(name.to_string()))?;
        match kind {
            "mean" => Ok(Discrepancy::Mean(j)),
            "variance" => Ok(Discrepancy::Variance(j)),
            "kurtosis" => Ok(Discrepancy::Kurtosis(j)),
            _ => Err(Error::UnknownDiscrepancy(name.to_string())),
        }
    }

    pub fn evaluate(&self, data: &DataMatrix) -> f64 {
        let central = |j: usize| {
            let v: Vec<f64> = data.observed_column(j).collect();
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            (v, n, m)
        };
        match *self {
            Discrepancy::Mean(j) => central(j).2,
            Discrepancy::Variance(j) => {
                let (v, n, m) = central(j);
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
            }
            Discrepancy::Kurtosis(j) => {
                let (v, n, m) = central(j);
                let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
                let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
                m4 / (m2 * m2) - 3.0
            }
            Discrepancy::MaxCorrelation => {
                let k = data.n_cols();
                let mut best = 0.0f64;
                for a in 0..k {
                    for b in a + 1..k {
                        let pairs: Vec<(f64, f64)> = (0..data.n_rows())
                            .filter_map(|i| Some((data.get(i, a)?, data.get(i, b)?)))
                            .collect();
                        let n = pairs.len() as f64;
                        if n < 3.0 {
                            continue;
                        }
                        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
                        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
                        let sab: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
                        let saa: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
                        let sbb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
                        if saa > 0.0 && sbb > 0.0 {
                            best = best.max((sab / (saa * sbb).sqrt()).abs());
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcResult {
    pub discrepancy: String,
    pub observed: f64,
    pub replicates: Vec<f64>,
    /// Fraction of replicate discrepancies at or above the observed one.
    pub ppp: f64,
}

/// Minimum number of parameter draws for [`ppc`].
pub const PPC_MIN_DRAWS: usize = 100;

/// Posterior predictive check: for each drawn `(μ, Σ)` simulate a dataset
/// of the same size, delete the cells missing in `data`, and compare the
/// discrepancy with its value on the observed data.
pub fn ppc(data: &DataMatrix, draws: &[MvnParams], discrepancy: &str, rng: &RngStream) -> Result<PpcResult> {
    let disc = Discrepancy::parse(discrepancy, data)?;
    if draws.len() < PPC_MIN_DRAWS {
        return Err(Error::InvalidParameter(format!(
            "posterior predictive checks need at least {PPC_MIN_DRAWS} draws, got {}",
            draws.len()
        )));
    }
    let mask = compute_mask(data);
    let observed = disc.evaluate(data);
    let replicates: Vec<f64> = draws
        .par_iter()
        .enumerate()
        .map(|(d, p)| {
            let rep = replicate_dataset(data, &mask, p, &mut rng.substream(d as u64))?;
            Ok(disc.evaluate(&rep))
        })
        .collect::<Result<_>>()?;
    let ppp = replicates.iter().filter(|&&v| v >= observed).count() as f64 / replicates.len() as f64;
    Ok(PpcResult {
        discrepancy: discrepancy.to_string(),
        observed,
        replicates,
        ppp,
    })
}

/// Draws a dataset from `params` with the missingness of `mask`.
pub fn replicate_dataset(
    data: &DataMatrix,
    mask: &MissingMask,
    params: &MvnParams,
    rng: &mut RngStream,
) -> Result<DataMatrix> {
    let k = data.n_cols();
    if params.dim() != k {
        return Err(Error::Dimension("parameter and data dimensions differ".into()));
    }
    let l = psd_factor(&params.sigma, 1e-12)?;
    let mut values = Vec::with_capacity(data.n_rows() * k);
    for i in 0..data.n_rows() {
        let y = draw_mvn_factor(rng, &params.mu, &l);
        values.extend((0..k).map(|j| if mask.is_missing(i, j) { f64::NAN } else { y[j] }));
    }
    let names: Vec<&str> = data.columns().iter().map(|c| c.name.as_str()).collect();
    let rows: Vec<Vec<Option<f64>>> = values
        .chunks(k)
        .map(|r| r.iter().map(|&v| (!v.is_nan()).then_some(v)).collect())
        .collect();
    DataMatrix::from_rows(&names, &rows)
}
