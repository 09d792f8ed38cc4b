//! Data augmentation for the multivariate normal with a general missingness
//! pattern: alternate an imputation step (draw the missing cells given the
//! current parameters) with a posterior step (draw parameters given the
//! completed data).

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{analyze_patterns, compute_mask, format_cell, DataMatrix, Pattern};
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, sweep_in_place, SymMatrix, PIVOT_TOL};
use crate::mvn_em::{fit_em, moments_init, require_observed, EmInit, EmOptions, MvnParams};
use crate::sampler::{draw_inv_wishart, draw_mvn_factor, RngStream};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Prior {
    /// `π(μ, Σ) ∝ |Σ|^{−(K+1)/2}`.
    #[default]
    Jeffreys,
    /// `μ | Σ ~ N(m0, Σ/k0)`, `Σ ~ IW(v0, S0)`.
    NormalInvWishart {
        m0: Vec<f64>,
        k0: f64,
        v0: f64,
        /// Row-major `K × K`.
        s0: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum DaInit {
    /// EM estimate, falling back to moment estimates when EM fails.
    #[default]
    Em,
    Moments,
    Params(MvnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaConfig {
    pub n_chains: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Retained draws per chain in [`run_da`].
    pub n_draws: usize,
    /// Multiple imputations are taken every `thin · spacing_factor`
    /// iterations.
    pub spacing_factor: usize,
    pub prior: Prior,
    pub init: DaInit,
    /// Keep the completed dataset with every retained draw.
    pub keep_datasets: bool,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig {
            n_chains: 4,
            burn_in: 500,
            thin: 1,
            n_draws: 1000,
            spacing_factor: 10,
            prior: Prior::Jeffreys,
            init: DaInit::Em,
            keep_datasets: false,
        }
    }
}

impl DaConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.n_chains == 0 {
            return Err(Error::InvalidParameter("n_chains must be at least 1".into()));
        }
        if self.thin == 0 || self.spacing_factor == 0 {
            return Err(Error::InvalidParameter(
                "thin and spacing_factor must be at least 1".into(),
            ));
        }
        if let Prior::NormalInvWishart { m0, k0, v0, s0 } = &self.prior {
            if m0.len() != k || s0.len() != k * k {
                return Err(Error::Dimension("prior hyperparameters do not match the data".into()));
            }
            if !(*k0 > 0.0) {
                return Err(Error::InvalidParameter("prior k0 must be positive".into()));
            }
            if !(*v0 > k as f64 - 1.0) {
                return Err(Error::InvalidParameter("prior v0 must exceed K - 1".into()));
            }
            if !SymMatrix::from_row_slice(k, s0)?.is_positive_definite() {
                return Err(Error::InvalidParameter("prior S0 must be positive definite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub params: MvnParams,
    pub completed: Option<DataMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaChain {
    pub draws: Vec<ChainState>,
    pub seed: u64,
    pub stream_id: u64,
}

impl DaChain {
    /// Trace of one scalar in the [`MvnParams::to_vec`] layout.
    pub fn trace(&self, index: usize) -> Vec<f64> {
        self.draws.iter().map(|s| s.params.to_vec()[index]).collect()
    }
}

/// Per-pattern imputation distribution. Requires only the observed block of
/// `Σ` to be nonsingular, so degenerate conditionals impute their mean.
struct PatternDraw {
    targets: Vec<usize>,
    given: Vec<usize>,
    intercepts: Vec<f64>,
    slopes: DMatrix<f64>,
    factor: DMatrix<f64>,
}

fn pattern_draw(params: &MvnParams, pattern: &Pattern) -> Result<PatternDraw> {
    let k = params.dim();
    let given = pattern.observed_indices();
    let targets = pattern.missing_indices();
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
    let residual = SymMatrix::symmetrized(DMatrix::from_fn(targets.len(), targets.len(), |a, b| {
        aug[(targets[a] + 1, targets[b] + 1)]
    }));
    let factor = if targets.is_empty() {
        DMatrix::zeros(0, 0)
    } else {
        psd_factor(&residual, 1e-12)?
    };
    Ok(PatternDraw {
        intercepts: targets.iter().map(|&t| aug[(0, t + 1)]).collect(),
        slopes: DMatrix::from_fn(targets.len(), given.len(), |a, b| aug[(given[b] + 1, targets[a] + 1)]),
        factor,
        targets,
        given,
    })
}

fn patterns_of(data: &DataMatrix) -> Vec<Pattern> {
    analyze_patterns(&compute_mask(data)).patterns
}

/// Draws every missing cell from its conditional normal given the row's
/// observed cells and `params`. Observed cells are copied unchanged.
pub fn i_step(data: &DataMatrix, params: &MvnParams, rng: &mut RngStream) -> Result<DataMatrix> {
    i_step_patterns(data, &patterns_of(data), params, rng)
}

fn i_step_patterns(
    data: &DataMatrix,
    patterns: &[Pattern],
    params: &MvnParams,
    rng: &mut RngStream,
) -> Result<DataMatrix> {
    if params.dim() != data.n_cols() {
        return Err(Error::Dimension("parameter and data dimensions differ".into()));
    }
    psd_factor(&params.sigma, 1e-12)?;
    let mut out = data.clone();
    for pattern in patterns {
        if pattern.observed.iter().all(|&o| o) {
            continue;
        }
        let pd = pattern_draw(params, pattern)?;
        let t = pd.targets.len();
        for &i in &pattern.rows {
            let row = data.row(i);
            let mut mean = DVector::from_column_slice(&pd.intercepts);
            for a in 0..t {
                for (b, &g) in pd.given.iter().enumerate() {
                    mean[a] += pd.slopes[(a, b)] * row[g];
                }
            }
            let draw = draw_mvn_factor(rng, &mean, &pd.factor);
            for (a, &col) in pd.targets.iter().enumerate() {
                out.set(i, col, draw[a]);
            }
        }
    }
    Ok(out)
}

/// Draws `(μ, Σ)` from the complete-data posterior.
///
/// Jeffreys: `Σ ~ IW(n − 1, n·S)` with `S` the ML covariance, then
/// `μ | Σ ~ N(ȳ, Σ/n)`. Normal-inverse-Wishart: the conjugate update.
pub fn p_step(completed: &DataMatrix, prior: &Prior, rng: &mut RngStream) -> Result<MvnParams> {
    if !completed.is_complete() {
        return Err(Error::InvalidData("P-step needs a completed dataset".into()));
    }
    let n = completed.n_rows();
    let k = completed.n_cols();
    let nf = n as f64;
    let mut ybar = DVector::<f64>::zeros(k);
    for i in 0..n {
        for j in 0..k {
            ybar[j] += completed.value(i, j);
        }
    }
    ybar /= nf;
    let mut ss = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let row = completed.row(i);
        for j in 0..k {
            let dj = row[j] - ybar[j];
            for l in j..k {
                ss[(j, l)] += dj * (row[l] - ybar[l]);
            }
        }
    }
    for j in 0..k {
        for l in 0..j {
            ss[(j, l)] = ss[(l, j)];
        }
    }
    let (df, scale, mean, kappa) = match prior {
        Prior::Jeffreys => {
            if n <= k {
                return Err(Error::InsufficientCases(format!(
                    "Jeffreys prior needs n > K, got n = {n}, K = {k}"
                )));
            }
            (nf - 1.0, ss, ybar, nf)
        }
        Prior::NormalInvWishart { m0, k0, v0, s0 } => {
            if m0.len() != k || s0.len() != k * k {
                return Err(Error::Dimension("prior hyperparameters do not match the data".into()));
            }
            let m0 = DVector::from_column_slice(m0);
            let kn = k0 + nf;
            let mn = (&m0 * *k0 + &ybar * nf) / kn;
            let d = &ybar - &m0;
            let sn = DMatrix::from_row_slice(k, k, s0) + ss + (&d * d.transpose()) * (k0 * nf / kn);
            (v0 + nf, sn, mn, kn)
        }
    };
    let scale = SymMatrix::symmetrized(scale);
    if !scale.is_positive_definite() {
        return Err(Error::DegenerateCovariance(
            "completed-data scatter matrix is singular".into(),
        ));
    }
    let sigma = draw_inv_wishart(rng, df, &scale)?;
    let l = crate::linalg::cholesky(&sigma)? / kappa.sqrt();
    let mu = draw_mvn_factor(rng, &mean, &l);
    Ok(MvnParams { mu, sigma })
}

fn initial_params(data: &DataMatrix, init: &DaInit) -> Result<MvnParams> {
    match init {
        DaInit::Params(p) => {
            if p.dim() != data.n_cols() {
                return Err(Error::Dimension("initial parameters have the wrong dimension".into()));
            }
            Ok(p.clone())
        }
        DaInit::Moments => moments_init(data),
        DaInit::Em => match fit_em(data, &EmInit::Moments, &EmOptions::default()) {
            Ok(r) => Ok(r.params),
            Err(_) => moments_init(data),
        },
    }
}

struct ChainRun {
    chain: DaChain,
    imputations: Vec<DataMatrix>,
}

/// Runs one chain for `burn_in + length` iterations. Draws are retained
/// every `thin` post-burn-in iterations and completed datasets every
/// `spacing` iterations, up to `n_imputations`.
#[allow(clippy::too_many_arguments)]
fn run_chain(
    data: &DataMatrix,
    patterns: &[Pattern],
    init: &MvnParams,
    config: &DaConfig,
    length: usize,
    spacing: usize,
    n_imputations: usize,
    mut rng: RngStream,
) -> Result<ChainRun> {
    let mut params = init.clone();
    let mut draws = Vec::new();
    let mut imputations = Vec::with_capacity(n_imputations);
    for iter in 0..config.burn_in + length {
        let completed = i_step_patterns(data, patterns, &params, &mut rng)?;
        params = p_step(&completed, &config.prior, &mut rng)?;
        if iter < config.burn_in {
            continue;
        }
        let t = iter - config.burn_in + 1;
        if imputations.len() < n_imputations && t.is_multiple_of(spacing) {
            imputations.push(completed.clone());
        }
        if t.is_multiple_of(config.thin) {
            draws.push(ChainState {
                params: params.clone(),
                completed: config.keep_datasets.then_some(completed),
            });
        }
    }
    Ok(ChainRun {
        chain: DaChain {
            draws,
            seed: rng.seed(),
            stream_id: rng.stream_id(),
        },
        imputations,
    })
}

/// Runs `config.n_chains` chains in parallel; chain `c` uses substream `c`
/// of `rng`. Each retains `config.n_draws` draws after burn-in.
pub fn run_da(data: &DataMatrix, config: &DaConfig, rng: &RngStream) -> Result<Vec<DaChain>> {
    config.validate(data.n_cols())?;
    require_observed(data, 2)?;
    let patterns = patterns_of(data);
    let init = initial_params(data, &config.init)?;
    (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            run_chain(
                data,
                &patterns,
                &init,
                config,
                config.n_draws * config.thin,
                usize::MAX,
                0,
                rng.substream(c as u64),
            )
            .map(|r| r.chain)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DaImputation {
    pub datasets: Vec<DataMatrix>,
    pub chains: Vec<DaChain>,
}

/// `d_count` completed datasets taken every `thin · spacing_factor`
/// post-burn-in iterations. Imputation `d` comes from chain
/// `d mod n_chains`; every chain also retains at least `config.n_draws`
/// thinned parameter draws for diagnostics.
pub fn impute_da_m(data: &DataMatrix, config: &DaConfig, d_count: usize, rng: &RngStream) -> Result<DaImputation> {
    config.validate(data.n_cols())?;
    require_observed(data, 2)?;
    let patterns = patterns_of(data);
    let init = initial_params(data, &config.init)?;
    let spacing = config.thin * config.spacing_factor;
    let runs: Vec<ChainRun> = (0..config.n_chains)
        .into_par_iter()
        .map(|c| {
            let share = (c..d_count).step_by(config.n_chains).count();
            let length = (share * spacing).max(config.n_draws * config.thin);
            run_chain(
                data,
                &patterns,
                &init,
                config,
                length,
                spacing,
                share,
                rng.substream(c as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut datasets = Vec::with_capacity(d_count);
    for d in 0..d_count {
        datasets.push(runs[d % config.n_chains].imputations[d / config.n_chains].clone());
    }
    Ok(DaImputation {
        datasets,
        chains: runs.into_iter().map(|r| r.chain).collect(),
    })
}

/// Writes retained parameter draws as CSV: `chain,draw,mu_1,…,sigma_K_K`.
pub fn write_chains_csv<W: Write>(chains: &[DaChain], k: usize, writer: W) -> Result<()> {
    let params: Vec<Vec<MvnParams>> = chains
        .iter()
        .map(|c| c.draws.iter().map(|s| s.params.clone()).collect())
        .collect();
    write_param_draws_csv(&params, k, writer)
}

/// Writes parameter draws grouped by chain as CSV.
pub fn write_param_draws_csv<W: Write>(chains: &[Vec<MvnParams>], k: usize, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(MvnParams::labels(k));
    w.write_record(&header)?;
    for (c, chain) in chains.iter().enumerate() {
        for (d, p) in chain.iter().enumerate() {
            let mut rec = vec![c.to_string(), d.to_string()];
            rec.extend(p.to_vec().into_iter().map(format_cell));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
