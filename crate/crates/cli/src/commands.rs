use std::collections::hash_map::RandomState;
use std::fs;
use std::hash::{BuildHasher, Hasher};
use std::path::{Path, PathBuf};

use calibra_core::calibrate::{self, psrf_report, run_coverage, write_replicates_csv, PsrfReport, SimScenario};
use calibra_core::dataset::{format_cell, load_csv, CsvOptions, DataMatrix};
use calibra_core::mi_pool::{pool, PerImputationEstimate, PooledSummary};
use calibra_core::monotone_bayes::{draw_factored_posterior, impute_monotone_m};
use calibra_core::mvn_da::{i_step, impute_da_m, write_param_draws_csv, DaConfig, DaInit, Prior};
use calibra_core::mvn_em::{fit_em, EmInit, EmOptions, MvnParams};
use calibra_core::pspp::{impute_pspp_m, PsppConfig};
use calibra_core::srmi::{default_specs, run_srmi, ConditionalModelSpec, SrmiConfig};
use calibra_core::RngStream;
use serde::{Deserialize, Serialize};

pub use crate::manifest::RunRecord;
use crate::manifest::{read_manifest, write_manifest, CommandKind, Manifest, MethodArg, MANIFEST_FILE};

/// R̂ above this is reported as a warning.
const RHAT_WARN: f64 = 1.1;
const DRAWS_FILE: &str = "draws.csv";
const TRACES_FILE: &str = "traces.csv";

#[derive(Debug, Default)]
pub struct Outcome {
    pub warnings: Vec<String>,
}

pub fn random_seed() -> u64 {
    RandomState::new().build_hasher().finish()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn parse_config<T: for<'de> Deserialize<'de> + Default>(rec: &RunRecord) -> Result<T, String> {
    match &rec.config {
        None => Ok(T::default()),
        Some(text) => serde_json::from_str(text).map_err(|e| format!("invalid configuration: {e}")),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(err)?;
    fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
}

struct Writer<'a> {
    dir: &'a Path,
    outputs: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self, String> {
        fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
        Ok(Writer {
            dir,
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), String> {
        let p = self.path(name);
        write_json(&p, value)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), String> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| format!("cannot write {}: {e}", p.display()))
    }
}

pub fn execute(rec: &RunRecord, out: &Path) -> Result<Outcome, String> {
    let mut w = Writer::new(out)?;
    let (warnings, rhat) = match rec.command {
        CommandKind::Em => (cmd_em(rec, &mut w)?, None),
        CommandKind::Impute => cmd_impute(rec, &mut w)?,
        CommandKind::Pool => (cmd_pool(rec, &mut w)?, None),
        CommandKind::Check => cmd_check(rec, &mut w)?,
        CommandKind::Simulate => (cmd_simulate(rec, &mut w)?, None),
    };
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        run: rec.clone(),
        outputs: w.outputs.clone(),
        rhat,
        warnings: warnings.clone(),
    };
    write_manifest(out, &manifest)?;
    Ok(Outcome { warnings })
}

fn load_input(rec: &RunRecord) -> Result<DataMatrix, String> {
    load_csv(rec.input_path()?, &CsvOptions::default()).map_err(err)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EmConfig {
    tol: f64,
    param_tol: f64,
    max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        let o = EmOptions::default();
        EmConfig {
            tol: o.tol,
            param_tol: o.param_tol,
            max_iter: o.max_iter,
        }
    }
}

impl EmConfig {
    fn options(&self) -> EmOptions {
        EmOptions {
            tol: self.tol,
            param_tol: self.param_tol,
            max_iter: self.max_iter,
        }
    }
}

fn cmd_em(rec: &RunRecord, w: &mut Writer) -> Result<Vec<String>, String> {
    let data = load_input(rec)?;
    let config: EmConfig = parse_config(rec)?;
    let result = fit_em(&data, &EmInit::Moments, &config.options()).map_err(err)?;
    w.json("em.json", &result.to_json())?;
    let mut warnings = result.warnings.clone();
    if !result.converged {
        warnings.push(format!("EM did not converge in {} iterations", result.iterations));
    }
    Ok(warnings)
}

/// The input file as text, so observed cells are written back verbatim.
struct RawTable {
    header: csv::StringRecord,
    rows: Vec<csv::StringRecord>,
}

impl RawTable {
    fn load(path: &Path) -> Result<Self, String> {
        let mut r = csv::Reader::from_path(path).map_err(err)?;
        let header = r.headers().map_err(err)?.clone();
        let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok(RawTable { header, rows })
    }

    fn write_completed(&self, completed: &DataMatrix, source: &DataMatrix) -> Result<Vec<u8>, String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(&self.header).map_err(err)?;
        for (i, row) in self.rows.iter().enumerate() {
            let rec: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(j, tok)| {
                    if source.is_missing(i, j) {
                        format_cell(completed.value(i, j))
                    } else {
                        tok.to_string()
                    }
                })
                .collect();
            wr.write_record(&rec).map_err(err)?;
        }
        wr.into_inner().map_err(err)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DaSettings {
    n_chains: usize,
    burn_in: usize,
    thin: usize,
    n_draws: usize,
    spacing_factor: usize,
    prior: Prior,
    init: InitArg,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InitArg {
    Em,
    Moments,
}

impl Default for DaSettings {
    fn default() -> Self {
        let c = DaConfig::default();
        DaSettings {
            n_chains: c.n_chains,
            burn_in: c.burn_in,
            thin: c.thin,
            n_draws: c.n_draws,
            spacing_factor: c.spacing_factor,
            prior: c.prior,
            init: InitArg::Em,
        }
    }
}

impl DaSettings {
    fn config(&self) -> DaConfig {
        DaConfig {
            n_chains: self.n_chains,
            burn_in: self.burn_in,
            thin: self.thin,
            n_draws: self.n_draws,
            spacing_factor: self.spacing_factor,
            prior: self.prior.clone(),
            init: match self.init {
                InitArg::Em => DaInit::Em,
                InitArg::Moments => DaInit::Moments,
            },
            keep_datasets: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SrmiSettings {
    n_cycles: usize,
    specs: Option<Vec<ConditionalModelSpec>>,
}

impl Default for SrmiSettings {
    fn default() -> Self {
        SrmiSettings {
            n_cycles: SrmiConfig::default().n_cycles,
            specs: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MonotoneSettings {
    /// Posterior draws saved for later checks.
    n_draws: usize,
}

impl Default for MonotoneSettings {
    fn default() -> Self {
        MonotoneSettings { n_draws: 1000 }
    }
}

fn traces_csv(names: &[String], traces: &[Vec<Vec<f64>>]) -> Result<Vec<u8>, String> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["chain".to_string(), "iteration".to_string()];
    header.extend(names.iter().cloned());
    wr.write_record(&header).map_err(err)?;
    for (c, chain) in traces.iter().enumerate() {
        for (t, row) in chain.iter().enumerate() {
            let mut rec = vec![c.to_string(), t.to_string()];
            rec.extend(row.iter().map(|&v| format_cell(v)));
            wr.write_record(&rec).map_err(err)?;
        }
    }
    wr.into_inner().map_err(err)
}

fn rhat_of(names: &[String], traces: &[Vec<Vec<f64>>]) -> Option<PsrfReport> {
    if traces.len() < 2 || traces.iter().any(|t| t.len() < 4) {
        return None;
    }
    psrf_report(names, traces).ok()
}

fn input_stem(rec: &RunRecord) -> Result<String, String> {
    Ok(rec
        .input_path()?
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".to_string()))
}

type ImputeOutput = (Vec<String>, Option<PsrfReport>);

fn cmd_impute(rec: &RunRecord, w: &mut Writer) -> Result<ImputeOutput, String> {
    let data = load_input(rec)?;
    let raw = RawTable::load(rec.input_path()?)?;
    let d = rec.d.unwrap_or(5);
    if d == 0 {
        return Err("--d must be at least 1".into());
    }
    let method = rec.method.unwrap_or(MethodArg::Da);
    let rng = RngStream::new(rec.seed, 0);
    let k = data.n_cols();
    let (datasets, rhat) = match method {
        MethodArg::Da => {
            let settings: DaSettings = parse_config(rec)?;
            let imp = impute_da_m(&data, &settings.config(), d, &rng).map_err(err)?;
            let draws: Vec<Vec<MvnParams>> = imp
                .chains
                .iter()
                .map(|c| c.draws.iter().map(|s| s.params.clone()).collect())
                .collect();
            let mut buf = Vec::new();
            write_param_draws_csv(&draws, k, &mut buf).map_err(err)?;
            w.bytes(DRAWS_FILE, &buf)?;
            let traces: Vec<Vec<Vec<f64>>> = draws
                .iter()
                .map(|c| c.iter().map(MvnParams::to_vec).collect())
                .collect();
            (imp.datasets, rhat_of(&MvnParams::labels(k), &traces))
        }
        MethodArg::Srmi => {
            let settings: SrmiSettings = parse_config(rec)?;
            let specs = settings.specs.clone().unwrap_or_else(|| default_specs(&data));
            let config = SrmiConfig {
                n_cycles: settings.n_cycles,
                n_imputations: d,
            };
            let res = run_srmi(&data, &specs, &config, &rng).map_err(err)?;
            let names: Vec<String> = specs.iter().map(|s| format!("mean_{}", s.target)).collect();
            w.bytes(TRACES_FILE, &traces_csv(&names, &res.traces)?)?;
            (res.datasets, rhat_of(&names, &res.traces))
        }
        MethodArg::Monotone => {
            let settings: MonotoneSettings = parse_config(rec)?;
            let datasets = impute_monotone_m(&data, d, &rng).map_err(err)?;
            let draws = draw_factored_posterior(&data, settings.n_draws, &RngStream::new(rec.seed, 1)).map_err(err)?;
            let mut buf = Vec::new();
            write_param_draws_csv(&[draws], k, &mut buf).map_err(err)?;
            w.bytes(DRAWS_FILE, &buf)?;
            (datasets, None)
        }
        MethodArg::Pspp => {
            let config: PsppConfig = parse_config(rec)?;
            let imp = impute_pspp_m(&data, &config, d, &rng).map_err(err)?;
            let traces: Vec<Vec<Vec<f64>>> = imp
                .sigma2_traces
                .iter()
                .zip(&imp.mu_traces)
                .map(|(s, m)| s.iter().zip(m).map(|(&a, &b)| vec![a, b]).collect())
                .collect();
            let names = vec!["sigma2".to_string(), "mu".to_string()];
            w.bytes(TRACES_FILE, &traces_csv(&names, &traces)?)?;
            (imp.datasets, rhat_of(&names, &traces))
        }
        MethodArg::Em => {
            // Draws from the conditional normal at the EM estimate; no
            // parameter uncertainty.
            let config: EmConfig = parse_config(rec)?;
            let fit = fit_em(&data, &EmInit::Moments, &config.options()).map_err(err)?;
            let datasets = (0..d)
                .map(|i| i_step(&data, &fit.params, &mut rng.substream(i as u64)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(err)?;
            (datasets, None)
        }
    };
    let stem = input_stem(rec)?;
    for (i, completed) in datasets.iter().enumerate() {
        w.bytes(
            &format!("{stem}_imp{}.csv", i + 1),
            &raw.write_completed(completed, &data)?,
        )?;
    }
    let mut warnings = Vec::new();
    if let Some(r) = &rhat {
        let worst = r.max_rhat();
        if worst > RHAT_WARN {
            warnings.push(format!("largest R-hat {worst:.3} exceeds {RHAT_WARN}"));
        }
    }
    Ok((warnings, rhat))
}

fn cmd_pool(rec: &RunRecord, w: &mut Writer) -> Result<Vec<String>, String> {
    let table = load_input(rec)?;
    let thetas: Vec<usize> = (1..).map_while(|j| table.column_index(&format!("theta_{j}"))).collect();
    if thetas.is_empty() {
        return Err("estimates file needs columns theta_1.. and se_1..".into());
    }
    let ses = (1..=thetas.len())
        .map(|j| {
            table
                .column_index(&format!("se_{j}"))
                .ok_or_else(|| format!("estimates file lacks column se_{j}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if !table.is_complete() {
        return Err("estimates file has missing cells".into());
    }
    let estimates = (0..table.n_rows())
        .map(|i| {
            let theta: Vec<f64> = thetas.iter().map(|&j| table.value(i, j)).collect();
            let var: Vec<f64> = ses.iter().map(|&j| table.value(i, j).powi(2)).collect();
            PerImputationEstimate::new(theta.into(), calibra_core::SymMatrix::from_diagonal(&var))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let pooled = pool(&estimates, rec.nu_com).map_err(err)?;
    let summary = PooledSummary::new(&pooled, rec.level.unwrap_or(0.95)).map_err(err)?;
    w.json("pool.json", &summary)?;
    Ok(Vec::new())
}

#[derive(Debug, Serialize)]
struct PpcSummary {
    discrepancy: String,
    observed: f64,
    ppp: f64,
    n_draws: usize,
}

#[derive(Debug, Serialize)]
struct CheckReport {
    method: Option<MethodArg>,
    psrf: Option<PsrfReport>,
    ppc: Vec<PpcSummary>,
}

/// Chains of rows from a `chain,<index>,values…` file.
/// `traces[chain][draw][parameter]`.
type Traces = Vec<Vec<Vec<f64>>>;

fn read_chains(path: &Path) -> Result<(Vec<String>, Traces), String> {
    let table = load_csv(path, &CsvOptions::default()).map_err(err)?;
    let names: Vec<String> = table.columns()[2..].iter().map(|c| c.name.clone()).collect();
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::new();
    for i in 0..table.n_rows() {
        let c = table.value(i, 0) as usize;
        if chains.len() <= c {
            chains.resize(c + 1, Vec::new());
        }
        chains[c].push(table.row(i)[2..].to_vec());
    }
    Ok((names, chains))
}

fn cmd_check(rec: &RunRecord, w: &mut Writer) -> Result<(Vec<String>, Option<PsrfReport>), String> {
    let manifest_path = rec.input_path()?;
    let source = read_manifest(manifest_path)?;
    if source.run.command != CommandKind::Impute {
        return Err("check needs the manifest of an impute run".into());
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    if fs::canonicalize(w.dir).ok() == fs::canonicalize(dir).ok() {
        return Err(format!(
            "check output would overwrite the impute run's {MANIFEST_FILE}; choose another --out"
        ));
    }
    let data = load_csv(source.run.input_path()?, &CsvOptions::default()).map_err(err)?;
    let mut warnings = Vec::new();
    let mut report = CheckReport {
        method: source.run.method,
        psrf: None,
        ppc: Vec::new(),
    };
    let draws_path = dir.join(DRAWS_FILE);
    let traces_path = dir.join(TRACES_FILE);
    if source.outputs.iter().any(|o| o == DRAWS_FILE) {
        let (names, chains) = read_chains(&draws_path)?;
        report.psrf = rhat_of(&names, &chains);
        let k = data.n_cols();
        let params = chains
            .iter()
            .flatten()
            .map(|v| MvnParams::from_vec(k, v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let discrepancies = if rec.discrepancies.is_empty() {
            let mut d: Vec<String> = data
                .columns()
                .iter()
                .flat_map(|c| [format!("mean:{}", c.name), format!("variance:{}", c.name)])
                .collect();
            if k > 1 {
                d.push("max_correlation".into());
            }
            d
        } else {
            rec.discrepancies.clone()
        };
        if params.len() < calibrate::PPC_MIN_DRAWS {
            warnings.push(format!(
                "only {} posterior draws recorded; posterior predictive checks skipped",
                params.len()
            ));
        } else {
            let rng = RngStream::new(rec.seed, 0);
            for (i, name) in discrepancies.iter().enumerate() {
                let r = calibrate::ppc(&data, &params, name, &rng.substream(i as u64)).map_err(err)?;
                report.ppc.push(PpcSummary {
                    discrepancy: r.discrepancy,
                    observed: r.observed,
                    ppp: r.ppp,
                    n_draws: params.len(),
                });
            }
        }
    } else if source.outputs.iter().any(|o| o == TRACES_FILE) {
        let (names, chains) = read_chains(&traces_path)?;
        report.psrf = rhat_of(&names, &chains);
    } else {
        warnings.push("the impute run recorded no draws to check".into());
    }
    if let Some(r) = &report.psrf {
        let worst = r.max_rhat();
        if worst > RHAT_WARN {
            warnings.push(format!("largest R-hat {worst:.3} exceeds {RHAT_WARN}"));
        }
    }
    w.json("check.json", &report)?;
    let rhat = report.psrf.take();
    Ok((warnings, rhat))
}

fn cmd_simulate(rec: &RunRecord, w: &mut Writer) -> Result<Vec<String>, String> {
    let text = rec
        .config
        .as_deref()
        .ok_or("simulate needs a scenario file via --config")?;
    let scenario: SimScenario = serde_json::from_str(text).map_err(|e| format!("invalid scenario: {e}"))?;
    let (report, records) = run_coverage(&scenario, &RngStream::new(rec.seed, 0)).map_err(err)?;
    w.json("coverage.json", &report)?;
    let mut buf = Vec::new();
    write_replicates_csv(&records, &mut buf).map_err(err)?;
    w.bytes("replicates.csv", &buf)?;
    Ok(Vec::new())
}
