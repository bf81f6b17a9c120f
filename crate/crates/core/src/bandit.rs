//! The IC-UCB online loop.
//!
//! Rounds `1..=T0` seed every node `R` times in turn and keep only the
//! first-step outcome of each cascade, which leaves every Gram matrix at
//! `R · I`. Each later round refits all node estimates, asks the optimistic
//! pair oracle for a seed set, plays it under the true parameters and logs
//! the resulting data pairs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cascade::{influence_exact, influence_mc, simulate_cascade, EXACT_EDGE_LIMIT};
use crate::error::{Error, Result};
use crate::estimator::{check_regularity, confidence_radius, EstimationMode, Estimator, FitOptions};
use crate::feedback::{extract_init_pairs, extract_round_pairs, PairLog};
use crate::graph::{EdgeParams, Graph, NodeId};
use crate::oracle::{brute_force_im, greedy_im, pair_oracle, OracleMode, SpreadEvaluator, BRUTE_NODE_LIMIT, DEFAULT_POOL_SAMPLES};
use crate::rng::{self, tag};

/// Horizon-dependent constants of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub horizon: u64,
    pub k: usize,
    pub gamma: f64,
    pub node_count: usize,
    pub max_in_degree: usize,
    /// `1 / (3 n sqrt(T))`.
    pub delta: f64,
    /// Rounds per node in the initialization phase.
    pub r: u64,
    /// `ceil(512 D / gamma^4 · (D^2 + ln(1/delta)))`, before any override.
    pub r_formula: f64,
    pub r_override: Option<u64>,
    /// `n · r`.
    pub t0: u64,
    /// `(3 / gamma) sqrt(ln(1/delta))`.
    pub rho: f64,
    /// False when `r` was overridden.
    pub paper_faithful: bool,
}

pub fn make_schedule(horizon: u64, k: usize, graph: &Graph, gamma: f64, r_override: Option<u64>) -> Result<Schedule> {
    if horizon == 0 {
        return Err(Error::Config("horizon T must be at least 1".into()));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma {gamma} must lie in (0, 1)")));
    }
    let n = graph.node_count();
    if n == 0 {
        return Err(Error::Config("graph has no nodes".into()));
    }
    let d = graph.max_in_degree() as f64;
    let delta = 1.0 / (3.0 * n as f64 * (horizon as f64).sqrt());
    let r_formula = (512.0 * d / gamma.powi(4) * (d * d + (1.0 / delta).ln())).ceil();
    let r = r_override.unwrap_or(r_formula as u64);
    let t0 = (n as u64).saturating_mul(r);
    match r_override {
        None if t0 >= horizon => {
            return Err(Error::Config(format!(
                "initialization needs T0 = n·R = {t0} rounds but T = {horizon}; \
                 set r_override for a desk-scale run or raise T"
            )))
        }
        Some(_) if t0 > horizon => {
            return Err(Error::Config(format!(
                "initialization needs T0 = {t0} rounds but T = {horizon}"
            )))
        }
        _ => {}
    }
    Ok(Schedule {
        horizon,
        k,
        gamma,
        node_count: n,
        max_in_degree: graph.max_in_degree(),
        delta,
        r,
        r_formula,
        r_override,
        t0,
        rho: confidence_radius(gamma, delta)?,
        paper_faithful: r_override.is_none(),
    })
}

/// How `sigma(S_t, p*)` is evaluated for the regret log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaEval {
    /// Exact enumeration; falls back to 10,000-sample Monte Carlo above the
    /// enumeration limit.
    Exact,
    MonteCarlo(usize),
}

impl fmt::Display for SigmaEval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaEval::Exact => f.write_str("exact"),
            SigmaEval::MonteCarlo(s) => write!(f, "mc:{s}"),
        }
    }
}

impl FromStr for SigmaEval {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            return Ok(SigmaEval::Exact);
        }
        s.strip_prefix("mc:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .map(SigmaEval::MonteCarlo)
            .ok_or_else(|| Error::Config(format!("sigma_eval must be \"exact\" or \"mc:<samples>\", got {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub horizon: u64,
    pub k: usize,
    pub gamma: f64,
    pub master_seed: u64,
    pub oracle_mode: OracleMode,
    pub r_override: Option<u64>,
    pub sigma_eval: SigmaEval,
    /// Pool size for Monte Carlo greedy; `None` picks exact evaluation when
    /// the graph is small enough.
    pub oracle_samples: Option<usize>,
    pub estimation: EstimationMode,
    /// Use `[0, 1]` instead of `[0, ln(1/gamma)]` as the weight box.
    pub unit_box: bool,
    pub fit_tol: f64,
    /// Keep every round's estimates in the log.
    pub record_estimates: bool,
}

impl RunSettings {
    pub fn new(horizon: u64, k: usize, gamma: f64, master_seed: u64) -> Self {
        Self {
            horizon,
            k,
            gamma,
            master_seed,
            oracle_mode: OracleMode::BruteBox,
            r_override: None,
            sigma_eval: SigmaEval::Exact,
            oracle_samples: None,
            estimation: EstimationMode::Scratch,
            unit_box: false,
            fit_tol: 1e-9,
            record_estimates: false,
        }
    }

    /// Upper end of the weight box.
    pub fn theta_max(&self) -> f64 {
        if self.unit_box {
            1.0
        } else {
            (1.0 / self.gamma).ln()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Main,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: u64,
    pub phase: Phase,
    pub seeds: Vec<NodeId>,
    /// `|S_{t,n-1}|`.
    pub reward: usize,
    pub cascade_digest: u64,
    /// `sigma(S_t, p*)` and its standard error (0 when exact).
    pub sigma: f64,
    pub sigma_stderr: f64,
    /// Whether every node met the regularity condition before this round;
    /// `None` during initialization.
    pub regularity_ok: Option<bool>,
    pub cum_regret_realized: f64,
    pub cum_regret_expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub seeds: Vec<NodeId>,
    pub sigma: f64,
    pub stderr: f64,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub t: u64,
    pub node: NodeId,
    pub edge: usize,
    pub theta_hat: f64,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub schedule: Schedule,
    pub optimum: Optimum,
    pub alpha_beta: f64,
    pub master_seed: u64,
    pub oracle_mode: OracleMode,
    pub records: Vec<RoundRecord>,
    pub pairs: PairLog,
    /// Estimates used before each main round (empty unless requested).
    pub estimates: Vec<EstimateRow>,
}

impl RunLog {
    pub fn is_complete(&self) -> bool {
        self.records.len() as u64 == self.schedule.horizon
    }

    /// Fraction of main rounds in which every node met the regularity
    /// condition.
    pub fn regularity_rate(&self) -> Option<f64> {
        let flags: Vec<bool> = self.records.iter().filter_map(|r| r.regularity_ok).collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
    }
}

/// A run that stopped early; `log` holds every completed round.
#[derive(Debug)]
pub struct RunFailure {
    pub log: Box<RunLog>,
    pub error: Error,
}

/// Cumulative regret series.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretSeries {
    pub realized: Vec<f64>,
    pub expected: Option<Vec<f64>>,
}

/// Cumulative `sum (alpha_beta · sigma_opt - reward_t)` and, when every
/// round has a spread value, `sum (alpha_beta · sigma_opt - sigma(S_t))`.
pub fn compute_regret(rewards: &[usize], sigmas: &[Option<f64>], sigma_opt: f64, alpha_beta: f64) -> RegretSeries {
    let target = alpha_beta * sigma_opt;
    let realized = rewards
        .iter()
        .scan(0.0, |acc, &r| {
            *acc += target - r as f64;
            Some(*acc)
        })
        .collect();
    let expected = sigmas
        .iter()
        .copied()
        .collect::<Option<Vec<f64>>>()
        .map(|sig| {
            sig.iter()
                .scan(0.0, |acc, &s| {
                    *acc += target - s;
                    Some(*acc)
                })
                .collect()
        });
    RegretSeries { realized, expected }
}

/// The offline optimum under the true parameters.
pub fn true_optimum(graph: &Graph, p: &[f64], k: usize, master_seed: u64) -> Result<Optimum> {
    if graph.node_count() <= BRUTE_NODE_LIMIT && graph.edge_count() <= EXACT_EDGE_LIMIT {
        let c = brute_force_im(graph, p, k)?;
        return Ok(Optimum {
            seeds: c.seeds,
            sigma: c.sigma,
            stderr: 0.0,
            method: "brute-force".into(),
        });
    }
    let pool_seed = rng::child_seed(master_seed, tag::LIVE_EDGE_POOL, u64::MAX);
    let c = greedy_im(
        graph,
        p,
        k,
        SpreadEvaluator::MonteCarlo {
            samples: DEFAULT_POOL_SAMPLES,
            seed: pool_seed,
        },
    )?;
    let est = influence_mc(graph, p, &c.seeds, 100_000, rng::child_seed(master_seed, tag::SIGMA, u64::MAX))?;
    Ok(Optimum {
        seeds: c.seeds,
        sigma: est.mean,
        stderr: est.stderr,
        method: "greedy-mc".into(),
    })
}

/// Online learner state for one run.
pub struct IcUcb<'a> {
    graph: &'a Graph,
    p_star: &'a EdgeParams,
    settings: RunSettings,
    estimator: Estimator,
    sigma_cache: HashMap<Vec<NodeId>, (f64, f64)>,
    log: RunLog,
}

impl<'a> IcUcb<'a> {
    pub fn new(graph: &'a Graph, p_star: &'a EdgeParams, settings: RunSettings) -> Result<Self> {
        if p_star.len() != graph.edge_count() {
            return Err(Error::domain("parameter vector does not match the edge count"));
        }
        if settings.k > graph.node_count() {
            return Err(Error::Config(format!(
                "K = {} exceeds the node count {}",
                settings.k,
                graph.node_count()
            )));
        }
        if settings.oracle_mode == OracleMode::BruteExact {
            return Err(Error::Config("brute-exact needs known parameters; use brute-box or greedy-box".into()));
        }
        let schedule = make_schedule(settings.horizon, settings.k, graph, settings.gamma, settings.r_override)?;
        let optimum = true_optimum(graph, p_star.p(), settings.k, settings.master_seed)?;
        let estimator = Estimator::new(
            graph,
            settings.estimation,
            settings.theta_max(),
            FitOptions {
                tol: settings.fit_tol,
                ..FitOptions::default()
            },
        );
        let log = RunLog {
            alpha_beta: settings.oracle_mode.alpha() * settings.oracle_mode.beta(),
            master_seed: settings.master_seed,
            oracle_mode: settings.oracle_mode,
            schedule,
            optimum,
            records: Vec::new(),
            pairs: PairLog::new(graph.node_count()),
            estimates: Vec::new(),
        };
        Ok(Self {
            graph,
            p_star,
            settings,
            estimator,
            sigma_cache: HashMap::new(),
            log,
        })
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn schedule(&self) -> &Schedule {
        &self.log.schedule
    }

    pub fn into_log(self) -> RunLog {
        self.log
    }

    fn sigma_of(&mut self, seeds: &[NodeId]) -> Result<(f64, f64)> {
        if let Some(&v) = self.sigma_cache.get(seeds) {
            return Ok(v);
        }
        let mc = |samples| -> Result<(f64, f64)> {
            let seed = rng::child_seed(
                self.settings.master_seed,
                tag::SIGMA,
                rng::digest(seeds.iter().map(|&s| s as u64)),
            );
            let est = influence_mc(self.graph, self.p_star.p(), seeds, samples, seed)?;
            Ok((est.mean, est.stderr))
        };
        let value = match self.settings.sigma_eval {
            SigmaEval::Exact if self.graph.edge_count() <= EXACT_EDGE_LIMIT => {
                (influence_exact(self.graph, self.p_star.p(), seeds)?, 0.0)
            }
            SigmaEval::Exact => mc(10_000)?,
            SigmaEval::MonteCarlo(samples) => mc(samples)?,
        };
        self.sigma_cache.insert(seeds.to_vec(), value);
        Ok(value)
    }

    fn record(&mut self, t: u64, phase: Phase, seeds: Vec<NodeId>, reward: usize, digest: u64, regularity_ok: Option<bool>) -> Result<()> {
        let (sigma, sigma_stderr) = self.sigma_of(&seeds)?;
        let target = self.log.alpha_beta * self.log.optimum.sigma;
        let (prev_real, prev_exp) = self
            .log
            .records
            .last()
            .map_or((0.0, 0.0), |r| (r.cum_regret_realized, r.cum_regret_expected));
        self.log.records.push(RoundRecord {
            t,
            phase,
            seeds,
            reward,
            cascade_digest: digest,
            sigma,
            sigma_stderr,
            regularity_ok,
            cum_regret_realized: prev_real + target - reward as f64,
            cum_regret_expected: prev_exp + target - sigma,
        });
        Ok(())
    }

    /// Rounds `1..=T0`: each node seeded alone for `R` consecutive rounds.
    pub fn run_init_phase(&mut self) -> Result<()> {
        if !self.log.pairs.is_empty() || !self.log.records.is_empty() {
            return Err(Error::domain("initialization must start from an empty log"));
        }
        let r = self.log.schedule.r;
        let mut t = 0u64;
        for u in 0..self.graph.node_count() {
            for _ in 0..r {
                t += 1;
                let mut stream = rng::stream(self.settings.master_seed, tag::CASCADE, t);
                let cascade = simulate_cascade(self.graph, self.p_star.p(), &[u], &mut stream);
                let pairs = extract_init_pairs(self.graph, &cascade, u, t)?;
                self.log.pairs.extend(pairs);
                self.record(t, Phase::Init, vec![u], cascade.final_size(), cascade.digest(), None)?;
            }
        }
        Ok(())
    }

    /// Rounds `T0+1..=T`.
    pub fn run_main_loop(&mut self) -> Result<()> {
        let sched = self.log.schedule.clone();
        if self.log.records.len() as u64 != sched.t0 {
            return Err(Error::domain("main loop started before initialization finished"));
        }
        let theta_max = self.settings.theta_max();
        for t in sched.t0 + 1..=sched.horizon {
            let estimates = self.estimator.refresh(&self.log.pairs, sched.rho)?;
            let regular = estimates
                .iter()
                .flatten()
                .all(|e| check_regularity(&e.gram, e.dim(), sched.gamma, sched.delta).ok);
            if self.settings.record_estimates {
                for est in estimates.iter().flatten() {
                    for (k, &edge) in self.graph.incoming(est.node).iter().enumerate() {
                        self.log.estimates.push(EstimateRow {
                            t,
                            node: est.node,
                            edge,
                            theta_hat: est.theta_hat[k],
                        });
                    }
                }
            }
            let pool_seed = rng::child_seed(self.settings.master_seed, tag::LIVE_EDGE_POOL, t);
            let evaluator = match self.settings.oracle_samples {
                Some(samples) => SpreadEvaluator::MonteCarlo { samples, seed: pool_seed },
                None => SpreadEvaluator::auto(self.graph, DEFAULT_POOL_SAMPLES, pool_seed),
            };
            let out = pair_oracle(
                self.graph,
                sched.k,
                &estimates,
                sched.rho,
                theta_max,
                self.settings.oracle_mode,
                evaluator,
            )?;
            let mut stream = rng::stream(self.settings.master_seed, tag::CASCADE, t);
            let cascade = simulate_cascade(self.graph, self.p_star.p(), &out.seeds, &mut stream);
            self.log.pairs.extend(extract_round_pairs(self.graph, &cascade, t));
            self.record(t, Phase::Main, out.seeds, cascade.final_size(), cascade.digest(), Some(regular))?;
        }
        Ok(())
    }
}

/// Runs the full horizon. On failure the partial log comes back with the
/// error.
pub fn run(graph: &Graph, p_star: &EdgeParams, settings: RunSettings) -> std::result::Result<RunLog, RunFailure> {
    let mut learner = IcUcb::new(graph, p_star, settings).map_err(|error| RunFailure {
        log: Box::new(RunLog {
            schedule: Schedule {
                horizon: 0,
                k: 0,
                gamma: 0.0,
                node_count: graph.node_count(),
                max_in_degree: graph.max_in_degree(),
                delta: 0.0,
                r: 0,
                r_formula: 0.0,
                r_override: None,
                t0: 0,
                rho: 0.0,
                paper_faithful: false,
            },
            optimum: Optimum {
                seeds: Vec::new(),
                sigma: 0.0,
                stderr: 0.0,
                method: "none".into(),
            },
            alpha_beta: 0.0,
            master_seed: 0,
            oracle_mode: OracleMode::BruteBox,
            records: Vec::new(),
            pairs: PairLog::new(graph.node_count()),
            estimates: Vec::new(),
        }),
        error,
    })?;
    let result = learner.run_init_phase().and_then(|_| learner.run_main_loop());
    match result {
        Ok(()) => Ok(learner.into_log()),
        Err(error) => Err(RunFailure {
            log: Box::new(learner.into_log()),
            error,
        }),
    }
}
