//! Offline influence maximization and the optimistic pair oracle.
//!
//! The pair oracle maximizes spread over a coordinatewise box that contains
//! every node's confidence ellipsoid. Since spread is monotone in each edge
//! probability, the box maximum sits at the upper corner `theta_ucb`, so
//! the oracle only has to solve plain IM on `p_from_theta(theta_ucb)`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{influence_exact_many, LiveEdgePool, EXACT_EDGE_LIMIT};
use crate::error::{Error, Result};
use crate::estimator::NodeEstimate;
use crate::graph::{p_from_theta, Graph, NodeId};

/// Largest node count accepted by [`brute_force_im`].
pub const BRUTE_NODE_LIMIT: usize = 15;

/// Default live-edge pool size for Monte Carlo greedy.
pub const DEFAULT_POOL_SAMPLES: usize = 10_000;

const TIE_EPS: f64 = 1e-12;

/// Per-edge optimistic weight `min(theta_hat + rho ‖x_e‖_{M^{-1}}, theta_max)`.
pub fn ucb_theta(graph: &Graph, estimates: &[Option<NodeEstimate>], rho: f64, theta_max: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; graph.edge_count()];
    for v in 0..graph.node_count() {
        let edges = graph.incoming(v);
        if edges.is_empty() {
            continue;
        }
        let est = estimates
            .get(v)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::domain(format!("no estimate for node {}", graph.label(v))))?;
        if est.dim() != edges.len() {
            return Err(Error::domain(format!("estimate for node {} has the wrong dimension", graph.label(v))));
        }
        let inverse = est
            .gram
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(Error::Singular { node: v })?;
        for (k, &e) in edges.iter().enumerate() {
            let width = inverse[(k, k)].max(0.0).sqrt();
            out[e] = (est.theta_hat[k] + rho * width).min(theta_max);
        }
    }
    Ok(out)
}

/// How greedy evaluates `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpreadEvaluator {
    Exact,
    /// A fixed pool of `samples` live-edge graphs drawn from `seed`, shared
    /// by every marginal evaluation of one call.
    MonteCarlo { samples: usize, seed: u64 },
}

impl SpreadEvaluator {
    /// Exact when the graph is small enough, otherwise a Monte Carlo pool.
    pub fn auto(graph: &Graph, samples: usize, seed: u64) -> Self {
        if graph.edge_count() <= EXACT_EDGE_LIMIT {
            Self::Exact
        } else {
            Self::MonteCarlo { samples, seed }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedChoice {
    pub seeds: Vec<NodeId>,
    pub sigma: f64,
}

fn validate_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::domain("K must be at least 1"))
    } else {
        Ok(())
    }
}

/// Greedy hill climbing on marginal spread; ties go to the smaller id.
pub fn greedy_im(graph: &Graph, p: &[f64], k: usize, evaluator: SpreadEvaluator) -> Result<SeedChoice> {
    validate_k(k)?;
    let n = graph.node_count();
    if k >= n {
        return Ok(SeedChoice {
            seeds: (0..n).collect(),
            sigma: n as f64,
        });
    }
    let pool = match evaluator {
        SpreadEvaluator::Exact => None,
        SpreadEvaluator::MonteCarlo { samples, seed } => Some(LiveEdgePool::sample(graph, p, samples, seed)?),
    };
    let mut seeds: Vec<NodeId> = Vec::with_capacity(k);
    let mut sigma = 0.0;
    for _ in 0..k {
        let candidates: Vec<Vec<NodeId>> = (0..n)
            .filter(|v| !seeds.contains(v))
            .map(|v| {
                let mut s = seeds.clone();
                s.push(v);
                s
            })
            .collect();
        let values = match &pool {
            None => influence_exact_many(graph, p, &candidates)?,
            Some(pool) => candidates.par_iter().map(|s| pool.spread(s).mean).collect(),
        };
        let mut best = 0;
        for i in 1..values.len() {
            if values[i] > values[best] + TIE_EPS * values[best].abs().max(1.0) {
                best = i;
            }
        }
        seeds = candidates[best].clone();
        sigma = values[best];
    }
    seeds.sort_unstable();
    Ok(SeedChoice { seeds, sigma })
}

pub(crate) fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<NodeId>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        for v in start..n {
            cur.push(v);
            out.push(cur.clone());
            if cur.len() < k {
                rec(v + 1, n, k, cur, out);
            }
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k > 0 {
        rec(0, n, k, &mut Vec::new(), &mut out);
    }
    // depth-first generation is already lexicographic
    out
}

/// Exact argmax of `sigma` over all seed sets of size `<= k`; ties go to the
/// lexicographically smallest set.
pub fn brute_force_im(graph: &Graph, p: &[f64], k: usize) -> Result<SeedChoice> {
    validate_k(k)?;
    let n = graph.node_count();
    if n > BRUTE_NODE_LIMIT || graph.edge_count() > EXACT_EDGE_LIMIT {
        return Err(Error::Capacity(format!(
            "brute-force IM needs n <= {BRUTE_NODE_LIMIT} and m <= {EXACT_EDGE_LIMIT} (got n = {n}, m = {})",
            graph.edge_count()
        )));
    }
    if n == 0 {
        return Ok(SeedChoice {
            seeds: Vec::new(),
            sigma: 0.0,
        });
    }
    let sets = subsets_up_to(n, k.min(n));
    let values = influence_exact_many(graph, p, &sets)?;
    let mut best = 0;
    for i in 1..values.len() {
        if values[i] > values[best] + TIE_EPS * values[best].abs().max(1.0) {
            best = i;
        }
    }
    Ok(SeedChoice {
        seeds: sets[best].clone(),
        sigma: values[best],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMode {
    /// Greedy on the optimistic corner of the box region.
    GreedyBox,
    /// Brute force on the optimistic corner of the box region.
    BruteBox,
    /// Brute force on known parameters (no confidence region).
    BruteExact,
}

impl OracleMode {
    /// Approximation factor `alpha` the mode guarantees (with exact
    /// spread evaluation).
    pub fn alpha(self) -> f64 {
        match self {
            OracleMode::GreedyBox => 1.0 - (-1.0f64).exp(),
            OracleMode::BruteBox | OracleMode::BruteExact => 1.0,
        }
    }

    /// Success probability `beta`; every mode is deterministic.
    pub fn beta(self) -> f64 {
        1.0
    }
}

impl fmt::Display for OracleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleMode::GreedyBox => "greedy-box",
            OracleMode::BruteBox => "brute-box",
            OracleMode::BruteExact => "brute-exact",
        })
    }
}

impl FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy-box" => Ok(OracleMode::GreedyBox),
            "brute-box" => Ok(OracleMode::BruteBox),
            "brute-exact" => Ok(OracleMode::BruteExact),
            other => Err(Error::Config(format!(
                "unknown oracle mode {other:?} (expected greedy-box, brute-box or brute-exact)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub seeds: Vec<NodeId>,
    pub p_tilde: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    /// `sigma(S~, p~)` under the mode's evaluator.
    pub sigma_tilde: f64,
    pub mode: OracleMode,
    pub alpha: f64,
    pub beta: f64,
}

/// Optimistic pair oracle: `theta_ucb`, then IM on `p~ = p(theta_ucb)`.
pub fn pair_oracle(
    graph: &Graph,
    k: usize,
    estimates: &[Option<NodeEstimate>],
    rho: f64,
    theta_max: f64,
    mode: OracleMode,
    evaluator: SpreadEvaluator,
) -> Result<OracleOutput> {
    let theta_tilde = ucb_theta(graph, estimates, rho, theta_max)?;
    let p_tilde = p_from_theta(&theta_tilde)?;
    let choice = match mode {
        OracleMode::GreedyBox => greedy_im(graph, &p_tilde, k, evaluator)?,
        OracleMode::BruteBox => brute_force_im(graph, &p_tilde, k)?,
        OracleMode::BruteExact => {
            return Err(Error::Config(
                "brute-exact solves on known parameters and is not a pair-oracle mode".into(),
            ))
        }
    };
    Ok(OracleOutput {
        seeds: choice.seeds,
        p_tilde,
        theta_tilde,
        sigma_tilde: choice.sigma,
        mode,
        alpha: mode.alpha(),
        beta: mode.beta(),
    })
}
