//! Config-driven runs, seed sweeps and reports over flat CSV/JSON files.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audit::{lemma3_check, Lemma3Report};
use crate::bandit::{make_schedule, run, Phase, RunLog, RunSettings, Schedule, SigmaEval};
use crate::error::{Error, Result};
use crate::estimator::EstimationMode;
use crate::feedback::PairLog;
use crate::graph::{load_graph, EdgeParams, Graph, NodeId};
use crate::oracle::OracleMode;

pub const RUN_LOG: &str = "run_log.csv";
pub const RUN_META: &str = "run_meta.json";
pub const PAIRS: &str = "pairs.csv";
pub const ESTIMATES: &str = "estimates.csv";
pub const REGRET_CURVE: &str = "regret_curve.csv";
pub const AGGREGATE: &str = "aggregate.csv";
pub const FAILURES: &str = "failures.json";

fn default_oracle() -> OracleMode {
    OracleMode::BruteBox
}

fn default_sigma_eval() -> String {
    "exact".into()
}

fn default_fit_tol() -> f64 {
    1e-9
}

/// Settings for `run` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub graph_path: PathBuf,
    #[serde(rename = "T")]
    pub horizon: u64,
    #[serde(rename = "K")]
    pub k: usize,
    pub gamma: f64,
    pub master_seed: u64,
    #[serde(default = "default_oracle")]
    pub oracle_mode: OracleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_override: Option<u64>,
    /// `"exact"` or `"mc:<samples>"`.
    #[serde(default = "default_sigma_eval")]
    pub sigma_eval: String,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub estimation: EstimationMode,
    #[serde(default)]
    pub unit_box: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_samples: Option<usize>,
    #[serde(default = "default_fit_tol")]
    pub fit_tol: f64,
    /// Also write every round's estimates to `estimates.csv`.
    #[serde(default)]
    pub log_estimates: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_list: Option<Vec<u64>>,
    #[serde(rename = "T_list", default, skip_serializing_if = "Option::is_none")]
    pub t_list: Option<Vec<u64>>,
}

/// A config with its graph loaded and every field checked.
#[derive(Debug, Clone)]
pub struct Validated {
    pub graph: Graph,
    pub params: EdgeParams,
    pub settings: RunSettings,
    pub schedule: Schedule,
}

fn read_graph(path: &Path) -> Result<(Graph, EdgeParams)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read graph file {}: {e}", path.display())))?;
    load_graph(&text)
}

impl RunConfig {
    /// Parses a TOML config; relative paths are taken from the config's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.graph_path.is_relative() {
            cfg.graph_path = base.join(&cfg.graph_path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn settings(&self) -> Result<RunSettings> {
        Ok(RunSettings {
            horizon: self.horizon,
            k: self.k,
            gamma: self.gamma,
            master_seed: self.master_seed,
            oracle_mode: self.oracle_mode,
            r_override: self.r_override,
            sigma_eval: self.sigma_eval.parse::<SigmaEval>()?,
            oracle_samples: self.oracle_samples,
            estimation: self.estimation,
            unit_box: self.unit_box,
            fit_tol: self.fit_tol,
            record_estimates: self.log_estimates,
        })
    }

    pub fn validate(&self) -> Result<Validated> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if self.fit_tol.is_nan() || self.fit_tol <= 0.0 {
            return Err(Error::Config("fit_tol must be positive".into()));
        }
        if self.oracle_samples == Some(0) {
            return Err(Error::Config("oracle_samples must be positive".into()));
        }
        let (graph, params) = read_graph(&self.graph_path)?;
        if self.k == 0 || self.k > graph.node_count() {
            return Err(Error::Config(format!(
                "K = {} must lie in 1..={} (the node count)",
                self.k,
                graph.node_count()
            )));
        }
        params
            .check_assumption(&graph, self.gamma)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.oracle_mode == OracleMode::BruteExact {
            return Err(Error::Config("oracle_mode must be brute-box or greedy-box for a run".into()));
        }
        for t in self.t_list.iter().flatten() {
            make_schedule(*t, self.k, &graph, self.gamma, self.r_override)?;
        }
        let settings = self.settings()?;
        let schedule = make_schedule(self.horizon, self.k, &graph, self.gamma, self.r_override)?;
        Ok(Validated {
            graph,
            params,
            settings,
            schedule,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub code_version: String,
    /// `"completed"` or `"failed"`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub rounds_completed: u64,
    pub schedule: Schedule,
    pub paper_faithful: bool,
    pub sigma_opt: f64,
    pub sigma_opt_stderr: f64,
    pub sigma_opt_method: String,
    pub optimal_seeds: Vec<String>,
    pub alpha_beta: f64,
    pub master_seed: u64,
    pub oracle_mode: OracleMode,
    pub final_regret_realized: f64,
    pub final_regret_expected: f64,
    pub regularity_rate: Option<f64>,
    /// Node labels by internal id.
    pub nodes: Vec<String>,
    pub config: RunConfig,
}

/// One line of `run_log.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub t: u64,
    /// Seed labels joined with `;`.
    pub seeds: String,
    pub reward: usize,
    pub sigma_st: f64,
    pub sigma_st_stderr: f64,
    pub cum_regret_realized: f64,
    pub cum_regret_expected: f64,
    /// Empty during initialization.
    pub regularity_ok: String,
}

fn seed_labels(graph: &Graph, seeds: &[NodeId]) -> String {
    seeds.iter().map(|&s| graph.label(s)).collect::<Vec<_>>().join(";")
}

fn write_outputs(dir: &Path, cfg: &RunConfig, graph: &Graph, log: &RunLog, error: Option<&Error>) -> Result<RunMeta> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(RUN_LOG))?;
    for r in &log.records {
        w.serialize(RunLogRow {
            t: r.t,
            seeds: seed_labels(graph, &r.seeds),
            reward: r.reward,
            sigma_st: r.sigma,
            sigma_st_stderr: r.sigma_stderr,
            cum_regret_realized: r.cum_regret_realized,
            cum_regret_expected: r.cum_regret_expected,
            regularity_ok: match (r.phase, r.regularity_ok) {
                (Phase::Main, Some(ok)) => ok.to_string(),
                _ => String::new(),
            },
        })?;
    }
    w.flush()?;
    log.pairs.write_csv(fs::File::create(dir.join(PAIRS))?)?;
    if cfg.log_estimates {
        let mut w = csv::Writer::from_path(dir.join(ESTIMATES))?;
        w.write_record(["t", "node", "source", "edge", "theta_hat"])?;
        for row in &log.estimates {
            let e = graph.edge(row.edge);
            w.write_record([
                row.t.to_string(),
                graph.label(row.node).to_string(),
                graph.label(e.source).to_string(),
                row.edge.to_string(),
                row.theta_hat.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let last = log.records.last();
    let meta = RunMeta {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        status: if error.is_none() { "completed" } else { "failed" }.into(),
        error: error.map(|e| e.to_string()),
        rounds_completed: log.records.len() as u64,
        paper_faithful: log.schedule.paper_faithful,
        schedule: log.schedule.clone(),
        sigma_opt: log.optimum.sigma,
        sigma_opt_stderr: log.optimum.stderr,
        sigma_opt_method: log.optimum.method.clone(),
        optimal_seeds: log.optimum.seeds.iter().map(|&s| graph.label(s).to_string()).collect(),
        alpha_beta: log.alpha_beta,
        master_seed: log.master_seed,
        oracle_mode: log.oracle_mode,
        final_regret_realized: last.map_or(0.0, |r| r.cum_regret_realized),
        final_regret_expected: last.map_or(0.0, |r| r.cum_regret_expected),
        regularity_rate: log.regularity_rate(),
        nodes: graph.labels().to_vec(),
        config: cfg.clone(),
    };
    fs::write(dir.join(RUN_META), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Output of a completed run.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub log: RunLog,
}

/// Runs one config and writes its files into `config.output_dir`. A run that
/// fails midway still writes its partial log before returning the error.
pub fn execute(config: &RunConfig) -> Result<RunOutcome> {
    let v = config.validate()?;
    let mut snapshot = config.clone();
    snapshot.graph_path = fs::canonicalize(&config.graph_path)?;
    snapshot.seed_list = None;
    snapshot.t_list = None;
    let dir = config.output_dir.clone();
    match run(&v.graph, &v.params, v.settings) {
        Ok(log) => {
            let meta = write_outputs(&dir, &snapshot, &v.graph, &log, None)?;
            Ok(RunOutcome { dir, meta, log })
        }
        Err(failure) => {
            if !failure.log.records.is_empty() {
                write_outputs(&dir, &snapshot, &v.graph, &failure.log, Some(&failure.error))?;
            }
            Err(failure.error)
        }
    }
}

fn corrupt(file: &Path, message: impl ToString) -> Error {
    Error::CorruptLog {
        file: file.display().to_string(),
        message: message.to_string(),
    }
}

pub fn load_meta(dir: &Path) -> Result<RunMeta> {
    let path = dir.join(RUN_META);
    let text = fs::read_to_string(&path).map_err(|e| corrupt(&path, e))?;
    serde_json::from_str(&text).map_err(|e| corrupt(&path, e))
}

pub fn load_run_log(dir: &Path) -> Result<Vec<RunLogRow>> {
    let path = dir.join(RUN_LOG);
    let mut r = csv::Reader::from_path(&path).map_err(|e| corrupt(&path, e))?;
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<RunLogRow>, _>>()
        .map_err(|e| corrupt(&path, e))?;
    for (i, row) in rows.iter().enumerate() {
        if row.t != i as u64 + 1 {
            return Err(corrupt(&path, format!("round {} out of order at line {}", row.t, i + 2)));
        }
    }
    Ok(rows)
}

pub fn load_pairs(dir: &Path) -> Result<PairLog> {
    let path = dir.join(PAIRS);
    let file = fs::File::open(&path).map_err(|e| corrupt(&path, e))?;
    PairLog::read_csv(file).map_err(|e| corrupt(&path, e))
}

/// Recomputes the norm-sum bound check from a completed run directory.
/// `graph_override` replaces the graph path stored in the run's config.
pub fn lemma3_from_dir(dir: &Path, graph_override: Option<&Path>) -> Result<Lemma3Report> {
    let meta = load_meta(dir)?;
    if meta.status != "completed" {
        return Err(Error::domain(format!("run in {} did not complete", dir.display())));
    }
    let (graph, _) = read_graph(graph_override.unwrap_or(&meta.config.graph_path))?;
    if graph.labels() != meta.nodes.as_slice() {
        return Err(Error::domain("graph does not match the run's node mapping"));
    }
    let rows = load_run_log(dir)?;
    let seeds = rows
        .iter()
        .map(|r| graph.resolve(&r.seeds.split(';').filter(|s| !s.is_empty()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let pairs = load_pairs(dir)?;
    lemma3_check(&graph, &meta.schedule, &seeds, &pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    #[serde(rename = "T")]
    pub horizon: u64,
    pub runs: usize,
    pub failed: usize,
    pub mean_regret: f64,
    pub stderr: f64,
    pub regret_over_sqrt_t: f64,
    pub regret_over_t: f64,
    /// `mean_regret / mean_regret` of the first horizon.
    pub ratio: f64,
    /// `sqrt(T / T_first)`, the ratio a square-root law predicts.
    pub sqrt_reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
    pub kind: String,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<AggregateRow>,
    pub failures: Vec<CellFailure>,
}

/// Runs every `(T, seed)` cell in parallel, each into its own directory under
/// `output_dir`, and writes `aggregate.csv`. Failed cells are recorded in
/// `failures.json` and skipped in the aggregate.
pub fn sweep(config: &RunConfig) -> Result<SweepReport> {
    config.validate()?;
    let horizons = config.t_list.clone().unwrap_or_else(|| vec![config.horizon]);
    let seeds = config.seed_list.clone().unwrap_or_else(|| vec![config.master_seed]);
    if horizons.is_empty() || seeds.is_empty() {
        return Err(Error::Config("T_list and seed_list must be nonempty".into()));
    }
    let cells: Vec<(u64, u64, String)> = horizons
        .iter()
        .flat_map(|&t| seeds.iter().map(move |&s| (t, s, format!("T{t}_seed{s}"))))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|(t, s, name)| {
            let mut cell = config.clone();
            cell.horizon = *t;
            cell.master_seed = *s;
            cell.output_dir = config.output_dir.join(name);
            cell.seed_list = None;
            cell.t_list = None;
            execute(&cell).map(|o| o.meta.final_regret_expected)
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &t in &horizons {
        let mut values = Vec::new();
        let mut failed = 0;
        for ((ct, _, name), res) in cells.iter().zip(&results) {
            if *ct != t {
                continue;
            }
            match res {
                Ok(v) => values.push(*v),
                Err(e) => {
                    failed += 1;
                    failures.push(CellFailure {
                        cell: name.clone(),
                        error: e.to_string(),
                        kind: e.kind().to_string(),
                    });
                }
            }
        }
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        rows.push(AggregateRow {
            horizon: t,
            runs: values.len(),
            failed,
            mean_regret: mean,
            stderr,
            regret_over_sqrt_t: mean / (t as f64).sqrt(),
            regret_over_t: mean / t as f64,
            ratio: f64::NAN,
            sqrt_reference: (t as f64 / horizons[0] as f64).sqrt(),
        });
    }
    let first = rows[0].mean_regret;
    for r in &mut rows {
        r.ratio = r.mean_regret / first;
    }

    fs::create_dir_all(&config.output_dir)?;
    let mut w = csv::Writer::from_path(config.output_dir.join(AGGREGATE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let failures_path = config.output_dir.join(FAILURES);
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path)?;
        }
    } else {
        fs::write(failures_path, serde_json::to_string_pretty(&failures)?)?;
    }
    Ok(SweepReport { rows, failures })
}

/// Summary of one run directory.
#[derive(Debug, Clone)]
pub struct ReportBlock {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub text: String,
}

/// `dir` itself if it holds a run, otherwise its run subdirectories in name
/// order.
pub fn find_runs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(RUN_META).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.join(RUN_META).is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::NoRuns(dir.display().to_string()));
    }
    Ok(out)
}

fn field(name: &str, value: &impl Serialize) -> Result<String> {
    Ok(format!("{name}: {}\n", serde_json::to_string(value)?))
}

/// Writes `regret_curve.csv` into each run directory under `dir` (or `dir`
/// itself) and returns one text block per run.
pub fn report(dir: &Path) -> Result<Vec<ReportBlock>> {
    let mut blocks = Vec::new();
    for run_dir in find_runs(dir)? {
        let meta = load_meta(&run_dir)?;
        let rows = load_run_log(&run_dir)?;
        let mut w = csv::Writer::from_path(run_dir.join(REGRET_CURVE))?;
        w.write_record(["t", "cum_regret_realized", "cum_regret_expected"])?;
        for r in &rows {
            w.write_record([
                r.t.to_string(),
                r.cum_regret_realized.to_string(),
                r.cum_regret_expected.to_string(),
            ])?;
        }
        w.flush()?;
        let s = &meta.schedule;
        let mut text = format!("run: {}\n", run_dir.display());
        text += &field("status", &meta.status)?;
        text += &field("T", &s.horizon)?;
        text += &field("K", &s.k)?;
        text += &field("gamma", &s.gamma)?;
        text += &field("delta", &s.delta)?;
        text += &field("R", &s.r)?;
        text += &field("T0", &s.t0)?;
        text += &field("rho", &s.rho)?;
        text += &field("paper_faithful", &meta.paper_faithful)?;
        text += &field("oracle_mode", &meta.oracle_mode)?;
        text += &field("master_seed", &meta.master_seed)?;
        text += &field("sigma_opt", &meta.sigma_opt)?;
        text += &field("sigma_opt_stderr", &meta.sigma_opt_stderr)?;
        text += &field("optimal_seeds", &meta.optimal_seeds)?;
        text += &field("alpha_beta", &meta.alpha_beta)?;
        text += &field("rounds_completed", &meta.rounds_completed)?;
        text += &field("final_regret_realized", &meta.final_regret_realized)?;
        text += &field("final_regret_expected", &meta.final_regret_expected)?;
        text += &field("regularity_rate", &meta.regularity_rate)?;
        blocks.push(ReportBlock {
            dir: run_dir,
            meta,
            text,
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_round_trip() {
        let cfg = RunConfig::from_toml(
            r#"
graph_path = "g.txt"
T = 100
K = 1
gamma = 0.6
master_seed = 4
output_dir = "out"
r_override = 5
"#,
        )
        .unwrap();
        assert_eq!(cfg.oracle_mode, OracleMode::BruteBox);
        assert_eq!(cfg.sigma_eval, "exact");
        assert_eq!(cfg.estimation, EstimationMode::Scratch);
        assert_eq!(cfg.fit_tol, 1e-9);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(RunConfig::from_toml("graph_path = 3").is_err());
        let typo = cfg.to_toml().unwrap() + "gama = 0.5\n";
        assert!(RunConfig::from_toml(&typo).is_err());
    }

    #[test]
    fn report_on_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(Error::NoRuns(_))));
    }
}
