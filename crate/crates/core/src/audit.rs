//! Empirical checks of the smoothness and norm-sum bounds behind the regret
//! analysis, plus the graph constant `zeta`.

use std::collections::VecDeque;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::Schedule;
use crate::cascade::{influence_exact, influence_mc, simulate_cascade, EXACT_EDGE_LIMIT};
use crate::error::{Error, Result};
use crate::estimator::{confidence_radius, fit_summary, regularity_threshold, weighted_norm, FitOptions, PairSummary};
use crate::feedback::{extract_pairs, DataPair, PairLog};
use crate::generate::{self, GraphModel};
use crate::graph::{p_from_theta, theta_from_p, Graph, NodeId};
use crate::oracle::{subsets_up_to, BRUTE_NODE_LIMIT};
use crate::rng::{self, tag};

fn reach(graph: &Graph, start: &[NodeId], forward: bool) -> Vec<bool> {
    let mut seen = vec![false; graph.node_count()];
    let mut queue: VecDeque<NodeId> = start.iter().copied().collect();
    for &s in start {
        seen[s] = true;
    }
    while let Some(x) = queue.pop_front() {
        let edges = if forward { graph.outgoing(x) } else { graph.incoming(x) };
        for &e in edges {
            let edge = graph.edge(e);
            let y = if forward { edge.target } else { edge.source };
            if !seen[y] {
                seen[y] = true;
                queue.push_back(y);
            }
        }
    }
    seen
}

fn check_seeds(graph: &Graph, seeds: &[NodeId]) -> Result<()> {
    if let Some(&s) = seeds.iter().find(|&&s| s >= graph.node_count()) {
        return Err(Error::domain(format!("seed {s} out of range")));
    }
    Ok(())
}

/// Non-seed nodes that lie on a directed path from some seed to `v`.
pub fn relevant_set(graph: &Graph, seeds: &[NodeId], v: NodeId) -> Result<Vec<NodeId>> {
    check_seeds(graph, seeds)?;
    if v >= graph.node_count() {
        return Err(Error::domain(format!("node {v} out of range")));
    }
    if seeds.contains(&v) {
        return Err(Error::domain(format!("node {} is a seed", graph.label(v))));
    }
    let fwd = reach(graph, seeds, true);
    Ok(relevant_with(graph, seeds, &fwd, v))
}

fn relevant_with(graph: &Graph, seeds: &[NodeId], fwd: &[bool], v: NodeId) -> Vec<NodeId> {
    if !fwd[v] {
        return Vec::new();
    }
    let back = reach(graph, &[v], false);
    (0..graph.node_count())
        .filter(|&u| fwd[u] && back[u] && !seeds.contains(&u))
        .collect()
}

/// Relevant sets `V[S, v]` and the counts `n_{S,u}` for one seed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceStats {
    pub seeds: Vec<NodeId>,
    /// `relevant[v] = V[S, v]`; empty for seeds.
    pub relevant: Vec<Vec<NodeId>>,
    /// `counts[u] = n_{S,u}`.
    pub counts: Vec<usize>,
}

impl RelevanceStats {
    pub fn new(graph: &Graph, seeds: &[NodeId]) -> Result<Self> {
        check_seeds(graph, seeds)?;
        let n = graph.node_count();
        let fwd = reach(graph, seeds, true);
        let mut relevant = vec![Vec::new(); n];
        let mut counts = vec![0usize; n];
        for v in 0..n {
            if seeds.contains(&v) {
                continue;
            }
            relevant[v] = relevant_with(graph, seeds, &fwd, v);
            for &u in &relevant[v] {
                counts[u] += 1;
            }
        }
        Ok(Self {
            seeds: seeds.to_vec(),
            relevant,
            counts,
        })
    }

    /// `sqrt(sum_u n_{S,u}^2)`.
    pub fn zeta_term(&self) -> f64 {
        (self.counts.iter().map(|&c| (c * c) as f64).sum::<f64>()).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZetaMode {
    Exact,
    /// Maximum over random seed sets; a lower bound on the true value.
    Sampled { trials: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zeta {
    pub value: f64,
    /// False when the value is a sampled lower bound.
    pub exact: bool,
    pub argmax: Vec<NodeId>,
}

/// `max over |S| <= K of sqrt(sum_u n_{S,u}^2)`.
pub fn zeta(graph: &Graph, k: usize, mode: ZetaMode) -> Result<Zeta> {
    if k == 0 {
        return Err(Error::domain("K must be at least 1"));
    }
    let n = graph.node_count();
    let k = k.min(n);
    let candidates: Vec<Vec<NodeId>> = match mode {
        ZetaMode::Exact => {
            if n > BRUTE_NODE_LIMIT {
                return Err(Error::Capacity(format!(
                    "exact zeta enumerates seed sets and supports at most {BRUTE_NODE_LIMIT} nodes (got {n}); use sampled mode"
                )));
            }
            subsets_up_to(n, k)
        }
        ZetaMode::Sampled { trials, seed } => (0..trials as u64)
            .map(|i| {
                let mut r = rng::stream(seed, tag::AUDIT, i);
                let size = r.random_range(1..=k);
                let mut set = rand::seq::index::sample(&mut r, n, size).into_vec();
                set.sort_unstable();
                set
            })
            .collect(),
    };
    let values = candidates
        .par_iter()
        .map(|s| RelevanceStats::new(graph, s).map(|r| r.zeta_term()))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = Zeta {
        value: 0.0,
        exact: matches!(mode, ZetaMode::Exact),
        argmax: Vec::new(),
    };
    for (s, v) in candidates.into_iter().zip(values) {
        if v > best.value {
            best.value = v;
            best.argmax = s;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GomReport {
    pub lhs: f64,
    pub lhs_exact: bool,
    pub rhs_mean: f64,
    pub rhs_stderr: f64,
    pub samples: usize,
    pub holds: bool,
}

/// Compares `|sigma(S, p~) - sigma(S, p*)|` with the Monte Carlo mean of the
/// relevance-weighted feedback sum on cascades drawn under `p*`.
pub fn gom_check(
    graph: &Graph,
    seeds: &[NodeId],
    theta_tilde: &[f64],
    theta_star: &[f64],
    samples: usize,
    master_seed: u64,
) -> Result<GomReport> {
    let m = graph.edge_count();
    if theta_tilde.len() != m || theta_star.len() != m {
        return Err(Error::domain("weight vectors do not match the edge count"));
    }
    if seeds.is_empty() {
        return Err(Error::domain("seed set must be nonempty"));
    }
    if samples < 2 {
        return Err(Error::domain("need at least two samples"));
    }
    let p_tilde = p_from_theta(theta_tilde)?;
    let p_star = p_from_theta(theta_star)?;
    let (lhs, lhs_exact) = if m <= EXACT_EDGE_LIMIT {
        let a = influence_exact(graph, &p_tilde, seeds)?;
        let b = influence_exact(graph, &p_star, seeds)?;
        ((a - b).abs(), true)
    } else {
        let seed = rng::child_seed(master_seed, tag::AUDIT, 1);
        let a = influence_mc(graph, &p_tilde, seeds, samples, seed)?;
        let b = influence_mc(graph, &p_star, seeds, samples, seed)?;
        ((a.mean - b.mean).abs(), false)
    };

    let stats = RelevanceStats::new(graph, seeds)?;
    let delta: Vec<Vec<f64>> = (0..graph.node_count())
        .map(|u| {
            graph
                .incoming(u)
                .iter()
                .map(|&e| theta_tilde[e] - theta_star[e])
                .collect()
        })
        .collect();
    let weighted: Vec<NodeId> = (0..graph.node_count()).filter(|&u| stats.counts[u] > 0).collect();
    let values: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(master_seed, tag::AUDIT, i);
            let cascade = simulate_cascade(graph, &p_star, seeds, &mut r);
            weighted
                .iter()
                .map(|&u| {
                    let inner: f64 = extract_pairs(graph, &cascade, u, 0)
                        .iter()
                        .map(|pair| pair.x.dot(&delta[u]).abs())
                        .sum();
                    stats.counts[u] as f64 * inner
                })
                .sum()
        })
        .collect();
    let n = samples as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let stderr = (var / n).sqrt();
    Ok(GomReport {
        lhs,
        lhs_exact,
        rhs_mean: mean,
        rhs_stderr: stderr,
        samples,
        // exact enumeration of two equal spreads can differ by rounding
        holds: lhs <= mean + 3.0 * stderr + 1e-12 * graph.node_count() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GomInstance {
    pub instance: usize,
    pub nodes: usize,
    pub edges: usize,
    pub seeds: Vec<NodeId>,
    pub report: GomReport,
}

/// Random instances for the smoothness audit: an Erdos graph on `nodes`
/// nodes, `p*` and `p~` both drawn under the survival floor `gamma`, and a
/// random seed set of one or two nodes.
pub fn gom_suite(instances: usize, nodes: usize, gamma: f64, samples: usize, master_seed: u64) -> Result<Vec<GomInstance>> {
    (0..instances)
        .map(|i| {
            let star = generate::gen_graph(
                nodes,
                GraphModel::Erdos { p_edge: 0.4 },
                gamma,
                rng::child_seed(master_seed, tag::AUDIT, i as u64),
            )?;
            let mut r = rng::stream(master_seed, tag::AUDIT, (1 << 32) + i as u64);
            let p_tilde: Vec<f64> = (0..star.graph.edge_count())
                .map(|e| {
                    let v = star.graph.edge(e).target;
                    r.random::<f64>() * (1.0 - gamma.powf(1.0 / star.graph.in_degree(v) as f64))
                })
                .collect();
            let size = r.random_range(1..=nodes.min(2));
            let mut seeds = rand::seq::index::sample(&mut r, nodes, size).into_vec();
            seeds.sort_unstable();
            let report = gom_check(
                &star.graph,
                &seeds,
                &theta_from_p(&p_tilde)?,
                star.params.theta(),
                samples,
                rng::child_seed(master_seed, tag::AUDIT, (1 << 33) + i as u64),
            )?;
            Ok(GomInstance {
                instance: i,
                nodes,
                edges: star.graph.edge_count(),
                seeds,
                report,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma3Report {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, or 0 when both vanish.
    pub ratio: f64,
    pub zeta: Zeta,
    pub main_rounds: u64,
    pub holds: bool,
}

/// Replays a completed run and compares the relevance-weighted sum of
/// `||X||_{M^{-1}}` over main rounds with its closed-form bound.
///
/// `seeds[t - 1]` is the seed set of round `t`; the pair log must hold every
/// round's pairs, initialization included.
pub fn lemma3_check(graph: &Graph, schedule: &Schedule, seeds: &[Vec<NodeId>], pairs: &PairLog) -> Result<Lemma3Report> {
    if seeds.len() as u64 != schedule.horizon {
        return Err(Error::domain(format!(
            "run has {} rounds but the schedule needs {}",
            seeds.len(),
            schedule.horizon
        )));
    }
    let n = graph.node_count();
    let mut grams: Vec<DMatrix<f64>> = (0..n)
        .map(|v| DMatrix::zeros(graph.in_degree(v), graph.in_degree(v)))
        .collect();
    let mut factors: Vec<Option<Cholesky<f64, Dyn>>> = vec![None; n];

    let mut by_round: Vec<&[DataPair]> = Vec::with_capacity(seeds.len());
    let all = pairs.pairs();
    let mut pos = 0;
    for t in 1..=schedule.horizon {
        let start = pos;
        while pos < all.len() && all[pos].round == t {
            pos += 1;
        }
        by_round.push(&all[start..pos]);
    }
    if pos != all.len() {
        return Err(Error::domain("pair log is not ordered by round or holds rounds beyond T"));
    }

    let mut lhs = 0.0;
    let mut cache: Option<(Vec<NodeId>, RelevanceStats)> = None;
    for t in 1..=schedule.horizon {
        let round_pairs = by_round[(t - 1) as usize];
        if t > schedule.t0 && !round_pairs.is_empty() {
            let s = &seeds[(t - 1) as usize];
            if cache.as_ref().is_none_or(|(k, _)| k != s) {
                cache = Some((s.clone(), RelevanceStats::new(graph, s)?));
            }
            let stats = &cache.as_ref().unwrap().1;
            for pair in round_pairs {
                let v = pair.owner;
                if factors[v].is_none() {
                    factors[v] = Some(Cholesky::new(grams[v].clone()).ok_or(Error::Singular { node: v })?);
                }
                let chol = factors[v].as_ref().unwrap();
                let x = DVector::from_vec(pair.x.to_dense());
                let norm = x.dot(&chol.solve(&x)).max(0.0).sqrt();
                lhs += stats.counts[v] as f64 * norm;
            }
        }
        for pair in round_pairs {
            let v = pair.owner;
            let ones = pair.x.ones();
            for &a in ones {
                for &b in ones {
                    grams[v][(a, b)] += 1.0;
                }
            }
            factors[v] = None;
        }
    }

    let k = schedule.k;
    let mode = if n <= BRUTE_NODE_LIMIT {
        ZetaMode::Exact
    } else {
        ZetaMode::Sampled { trials: 2000, seed: 0 }
    };
    let z = zeta(graph, k, mode)?;
    let main = schedule.horizon - schedule.t0;
    let d = graph.max_in_degree() as f64;
    let rhs = if main == 0 {
        0.0
    } else {
        let mn = (graph.edge_count() + n) as f64;
        z.value * d * (mn * main as f64 * (schedule.r as f64 + main as f64 * d).ln()).sqrt()
    };
    Ok(Lemma3Report {
        lhs,
        rhs,
        ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 },
        zeta: z,
        main_rounds: main,
        holds: lhs <= rhs,
    })
}

/// Settings for the confidence-coverage experiment on a star with `in_degree`
/// sources feeding one hub.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub in_degree: usize,
    pub gamma: f64,
    pub delta: f64,
    pub trials: usize,
    /// Pairs per trial; `None` collects until the regularity threshold holds.
    pub pairs: Option<usize>,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub trials: usize,
    pub covered: usize,
    pub frequency: f64,
    /// `1 - 3 delta`.
    pub target: f64,
    /// Half-width of the binomial 95% band around the target.
    pub band: f64,
    pub passes: bool,
    pub rho: f64,
    pub threshold: f64,
    pub mean_pairs: f64,
}

/// Star graph with sources `0..d` and hub `d`.
pub fn star_into_hub(d: usize) -> Result<Graph> {
    let edges: Vec<(NodeId, NodeId)> = (0..d).map(|u| (u, d)).collect();
    Graph::from_pairs(d + 1, &edges)
}

/// Hub pairs from cascades seeded by uniformly random nonempty subsets of the
/// sources, until `enough` accepts the running Gram matrix or `limit` pairs
/// are collected.
pub fn hub_pairs<R: Rng + ?Sized>(
    graph: &Graph,
    p: &[f64],
    limit: usize,
    rng: &mut R,
    mut enough: impl FnMut(usize, &DMatrix<f64>) -> bool,
) -> Vec<DataPair> {
    let d = graph.node_count() - 1;
    let mut out = Vec::with_capacity(limit.min(1 << 20));
    let mut gram = DMatrix::zeros(d, d);
    while out.len() < limit && !enough(out.len(), &gram) {
        let mut seeds: Vec<NodeId> = Vec::new();
        while seeds.is_empty() {
            seeds = (0..d).filter(|_| rng.random::<bool>()).collect();
        }
        let cascade = simulate_cascade(graph, p, &seeds, rng);
        for pair in extract_pairs(graph, &cascade, d, out.len() as u64) {
            for &a in pair.x.ones() {
                for &b in pair.x.ones() {
                    gram[(a, b)] += 1.0;
                }
            }
            out.push(pair);
        }
    }
    out
}

/// Frequency with which `||theta_hat - theta*||_M <= rho` once the data
/// volume meets the regularity threshold.
pub fn mle_coverage(cfg: &CoverageConfig) -> Result<CoverageReport> {
    if cfg.in_degree == 0 || cfg.trials == 0 {
        return Err(Error::Config("coverage needs in_degree >= 1 and trials >= 1".into()));
    }
    let rho = confidence_radius(cfg.gamma, cfg.delta)?;
    let threshold = regularity_threshold(cfg.in_degree, cfg.gamma, cfg.delta);
    let graph = star_into_hub(cfg.in_degree)?;
    let upper = (1.0 / cfg.gamma).ln();
    let p_max = 1.0 - cfg.gamma.powf(1.0 / cfg.in_degree as f64);
    let d = cfg.in_degree;
    let outcomes = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| -> Result<(bool, usize)> {
            let mut r = rng::stream(cfg.master_seed, tag::TRIAL, i);
            let p: Vec<f64> = (0..d).map(|_| r.random::<f64>() * p_max).collect();
            let theta_star = theta_from_p(&p)?;
            let pairs = match cfg.pairs {
                Some(n) => hub_pairs(&graph, &p, n, &mut r, |_, _| false),
                None => hub_pairs(&graph, &p, usize::MAX, &mut r, |len, m| {
                    len > 0 && (d == 1 || len % 64 == 0) && crate::estimator::lambda_min(m) >= threshold
                }),
            };
            let summary = PairSummary::from_pairs(d, &pairs)?;
            let fit = fit_summary(&summary, upper, None, FitOptions::default())?;
            let diff: Vec<f64> = fit.theta.iter().zip(&theta_star).map(|(a, b)| a - b).collect();
            Ok((weighted_norm(&diff, summary.gram()) <= rho, pairs.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let covered = outcomes.iter().filter(|o| o.0).count();
    let mean_pairs = outcomes.iter().map(|o| o.1 as f64).sum::<f64>() / cfg.trials as f64;
    let frequency = covered as f64 / cfg.trials as f64;
    let target = 1.0 - 3.0 * cfg.delta;
    let band = 1.96 * (target * (1.0 - target) / cfg.trials as f64).sqrt();
    Ok(CoverageReport {
        trials: cfg.trials,
        covered,
        frequency,
        target,
        band,
        passes: frequency >= target - band,
        rho,
        threshold,
        mean_pairs,
    })
}
