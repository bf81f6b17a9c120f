//! Per-node maximum pseudo-likelihood estimation of edge weights.
//!
//! For a node with in-degree `d`, the objective over `theta ∈ [0, upper]^d`
//! is
//!
//! ```text
//! L(theta) = sum_pairs [ -exp(-x^T theta) - (1 - y) x^T theta ]
//! ```
//!
//! whose gradient is `sum (y - mu(x^T theta)) x` with the link
//! `mu(z) = 1 - exp(-z)`. `L` only depends on the data through the count
//! and success count of each distinct `x`, which [`PairSummary`] keeps.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{DataPair, PairLog};
use crate::graph::{CharVector, Graph, NodeId};

/// `mu(z) = 1 - exp(-z)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExpLink;

impl ExpLink {
    pub fn value(z: f64) -> f64 {
        -(-z).exp_m1()
    }

    /// `mu'(z) = exp(-z) = 1 - mu(z)`.
    pub fn derivative(z: f64) -> f64 {
        (-z).exp()
    }
}

fn common_owner(pairs: &[DataPair]) -> Result<Option<(NodeId, usize)>> {
    let Some(first) = pairs.first() else {
        return Ok(None);
    };
    for p in pairs {
        if p.owner != first.owner {
            return Err(Error::domain(format!(
                "pairs owned by different nodes ({} and {})",
                first.owner, p.owner
            )));
        }
        if p.x.dim() != first.x.dim() {
            return Err(Error::domain("pairs with different dimensions"));
        }
    }
    Ok(Some((first.owner, first.x.dim())))
}

fn check_dim(theta: &[f64], dim: Option<usize>) -> Result<()> {
    match dim {
        Some(d) if d != theta.len() => Err(Error::domain(format!(
            "parameter has length {} but pairs have dimension {d}",
            theta.len()
        ))),
        _ => Ok(()),
    }
}

/// `L(theta)` evaluated pair by pair.
pub fn pseudo_log_likelihood(theta: &[f64], pairs: &[DataPair]) -> Result<f64> {
    check_dim(theta, common_owner(pairs)?.map(|o| o.1))?;
    Ok(pairs
        .iter()
        .map(|p| {
            let s = p.x.dot(theta);
            -(-s).exp() - if p.y { 0.0 } else { s }
        })
        .sum())
}

/// `grad L(theta) = sum (y - mu(x^T theta)) x`.
pub fn pll_gradient(theta: &[f64], pairs: &[DataPair]) -> Result<Vec<f64>> {
    check_dim(theta, common_owner(pairs)?.map(|o| o.1))?;
    let mut g = vec![0.0; theta.len()];
    for p in pairs {
        let r = f64::from(u8::from(p.y)) - ExpLink::value(p.x.dot(theta));
        for &k in p.x.ones() {
            g[k] += r;
        }
    }
    Ok(g)
}

/// `M = sum x x^T`.
pub fn gram_matrix(dim: usize, pairs: &[DataPair]) -> Result<DMatrix<f64>> {
    if let Some((_, d)) = common_owner(pairs)? {
        if d != dim {
            return Err(Error::domain(format!("pairs have dimension {d}, expected {dim}")));
        }
    }
    let mut m = DMatrix::zeros(dim, dim);
    for p in pairs {
        add_outer(&mut m, &p.x, 1.0);
    }
    Ok(m)
}

fn add_outer(m: &mut DMatrix<f64>, x: &CharVector, w: f64) {
    for &a in x.ones() {
        for &b in x.ones() {
            m[(a, b)] += w;
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct PatternCount {
    count: u64,
    hits: u64,
}

/// Sufficient statistics of one node's pairs: counts per distinct `x`, and
/// the Gram matrix.
#[derive(Debug, Clone)]
pub struct PairSummary {
    dim: usize,
    patterns: BTreeMap<Vec<usize>, PatternCount>,
    total: u64,
    gram: DMatrix<f64>,
}

impl PairSummary {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            patterns: BTreeMap::new(),
            total: 0,
            gram: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_pairs<'a>(dim: usize, pairs: impl IntoIterator<Item = &'a DataPair>) -> Result<Self> {
        let mut s = Self::new(dim);
        for p in pairs {
            s.add(p)?;
        }
        Ok(s)
    }

    pub fn add(&mut self, pair: &DataPair) -> Result<()> {
        if pair.x.dim() != self.dim {
            return Err(Error::domain(format!(
                "pair of node {} has dimension {}, expected {}",
                pair.owner,
                pair.x.dim(),
                self.dim
            )));
        }
        let entry = self.patterns.entry(pair.x.ones().to_vec()).or_default();
        entry.count += 1;
        entry.hits += u64::from(pair.y);
        self.total += 1;
        add_outer(&mut self.gram, &pair.x, 1.0);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    fn score(ones: &[usize], theta: &[f64]) -> f64 {
        ones.iter().map(|&k| theta[k]).sum()
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> f64 {
        self.patterns
            .iter()
            .map(|(ones, c)| {
                let s = Self::score(ones, theta);
                -(c.count as f64) * (-s).exp() - (c.count - c.hits) as f64 * s
            })
            .sum()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        for (ones, c) in &self.patterns {
            let r = c.hits as f64 - c.count as f64 * ExpLink::value(Self::score(ones, theta));
            for &k in ones {
                g[k] += r;
            }
        }
        g
    }

    /// `-∇²L = sum count · exp(-x^T theta) x x^T`.
    pub fn curvature(&self, theta: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        for (ones, c) in &self.patterns {
            let w = c.count as f64 * ExpLink::derivative(Self::score(ones, theta));
            for &a in ones {
                for &b in ones {
                    h[(a, b)] += w;
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub ridge: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            ridge: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub theta: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Violation of the box KKT conditions for maximising `L`: `|g_i|` on
/// interior coordinates, and the inward component of `g_i` on coordinates
/// sitting at a bound.
pub fn kkt_residual(theta: &[f64], grad: &[f64], upper: f64) -> f64 {
    theta
        .iter()
        .zip(grad)
        .map(|(&t, &g)| {
            if t <= 0.0 {
                g.max(0.0)
            } else if t >= upper {
                (-g).max(0.0)
            } else {
                g.abs()
            }
        })
        .fold(0.0, f64::max)
}

fn project(theta: &mut [f64], upper: f64) {
    for t in theta {
        *t = t.clamp(0.0, upper);
    }
}

/// Projected Newton ascent with Armijo backtracking along the projection
/// arc. Coordinates that sit (within `eps`) at a bound with the gradient
/// pointing outward take a diagonally scaled gradient step; the rest take
/// a Newton step on their sub-block.
pub fn fit_summary(summary: &PairSummary, upper: f64, start: Option<&[f64]>, opts: FitOptions) -> Result<Fit> {
    let d = summary.dim();
    if !(upper > 0.0 && upper.is_finite()) {
        return Err(Error::domain(format!("box upper bound {upper} must be positive and finite")));
    }
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(Error::domain("tolerance must be positive"));
    }
    let mut theta = match start {
        Some(s) if s.len() == d => s.to_vec(),
        Some(_) => return Err(Error::domain("warm start has the wrong dimension")),
        None => vec![0.0; d],
    };
    project(&mut theta, upper);
    let noise_floor = opts.tol * (summary.total().max(1) as f64);

    let mut value = summary.log_likelihood(&theta);
    let mut grad = summary.gradient(&theta);
    let mut residual = kkt_residual(&theta, &grad, upper);
    let mut iterations = 0;

    while residual > opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::Convergence {
                best: theta,
                residual,
                iterations,
            });
        }
        iterations += 1;

        let width: f64 = theta
            .iter()
            .zip(&grad)
            .map(|(&t, &g)| (t - (t + g).clamp(0.0, upper)).abs())
            .fold(0.0, f64::max);
        let eps = width.min(1e-6);
        let fixed: Vec<bool> = theta
            .iter()
            .zip(&grad)
            .map(|(&t, &g)| (t <= eps && g < 0.0) || (t >= upper - eps && g > 0.0))
            .collect();
        let free: Vec<usize> = (0..d).filter(|&i| !fixed[i]).collect();

        let h = summary.curvature(&theta);
        let mut dir = vec![0.0; d];
        for i in 0..d {
            if fixed[i] {
                dir[i] = grad[i] / (h[(i, i)] + opts.ridge).max(opts.ridge);
            }
        }
        if !free.is_empty() {
            let k = free.len();
            let sub = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])] + if a == b { opts.ridge } else { 0.0 });
            let rhs = DVector::from_iterator(k, free.iter().map(|&i| grad[i]));
            let step = match sub.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => DVector::from_iterator(k, (0..k).map(|a| rhs[a] / sub[(a, a)].max(opts.ridge))),
            };
            for (a, &i) in free.iter().enumerate() {
                dir[i] = step[a];
            }
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..64 {
            let mut cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, s)| t + alpha * s).collect();
            project(&mut cand, upper);
            let gain: f64 = grad.iter().zip(cand.iter().zip(&theta)).map(|(g, (c, t))| g * (c - t)).sum();
            let cand_value = summary.log_likelihood(&cand);
            let change = cand_value - value;
            if change >= 1e-4 * gain && gain > 0.0 {
                accepted = Some((cand, cand_value));
                break;
            }
            // Near the optimum the objective change drops below rounding
            // noise; accept steps that still shrink the KKT residual.
            if change.abs() <= 64.0 * f64::EPSILON * (1.0 + value.abs()) {
                let cand_grad = summary.gradient(&cand);
                if kkt_residual(&cand, &cand_grad, upper) < residual {
                    accepted = Some((cand, cand_value));
                    break;
                }
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((cand, cand_value)) => {
                theta = cand;
                value = cand_value;
                grad = summary.gradient(&theta);
                residual = kkt_residual(&theta, &grad, upper);
            }
            None if residual <= noise_floor => break,
            None => {
                return Err(Error::Convergence {
                    best: theta,
                    residual,
                    iterations,
                })
            }
        }
    }
    Ok(Fit {
        theta,
        residual,
        iterations,
    })
}

/// Maximiser of the pseudo-likelihood over `[0, theta_max]^d`.
pub fn fit_mle(pairs: &[DataPair], theta_max: f64, tol: f64) -> Result<Vec<f64>> {
    let Some((_, dim)) = common_owner(pairs)? else {
        return Err(Error::domain("cannot fit an estimate without data pairs"));
    };
    let summary = PairSummary::from_pairs(dim, pairs)?;
    let opts = FitOptions {
        tol,
        ..FitOptions::default()
    };
    Ok(fit_summary(&summary, theta_max, None, opts)?.theta)
}

/// `rho = (3 / gamma) sqrt(ln(1 / delta))`.
pub fn confidence_radius(gamma: f64, delta: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::domain(format!("gamma {gamma} must lie in (0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::domain(format!("delta {delta} must lie in (0, 1)")));
    }
    Ok(3.0 / gamma * (1.0 / delta).ln().sqrt())
}

/// `sqrt(x^T M x)`.
pub fn weighted_norm(x: &[f64], m: &DMatrix<f64>) -> f64 {
    let v = DVector::from_column_slice(x);
    (v.dot(&(m * &v))).max(0.0).sqrt()
}

/// Smallest eigenvalue of a symmetric matrix (0 for the empty matrix).
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().symmetric_eigenvalues().min()
}

/// Minimum eigenvalue required before the confidence width is trusted:
/// `512 d / gamma^4 · (d^2 + ln(1/delta))`.
pub fn regularity_threshold(dim: usize, gamma: f64, delta: f64) -> f64 {
    let d = dim as f64;
    512.0 * d / gamma.powi(4) * (d * d + (1.0 / delta).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularity {
    pub ok: bool,
    pub lambda_min: f64,
    pub threshold: f64,
    /// `lambda_min - threshold`.
    pub margin: f64,
}

pub fn check_regularity(m: &DMatrix<f64>, dim: usize, gamma: f64, delta: f64) -> Regularity {
    let lambda_min = lambda_min(m);
    let threshold = regularity_threshold(dim, gamma, delta);
    let margin = lambda_min - threshold;
    Regularity {
        ok: margin >= 0.0,
        lambda_min,
        threshold,
        margin,
    }
}

/// Fitted state of one node: the estimate, its Gram matrix, the radius and
/// the box the region lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEstimate {
    pub node: NodeId,
    pub theta_hat: Vec<f64>,
    pub gram: DMatrix<f64>,
    pub rho: f64,
    pub upper: f64,
    pub pair_count: u64,
}

impl NodeEstimate {
    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn p_hat(&self) -> Vec<f64> {
        self.theta_hat.iter().map(|&t| ExpLink::value(t)).collect()
    }

    /// `‖theta - theta_hat‖_M`.
    pub fn distance(&self, theta: &[f64]) -> f64 {
        let diff: Vec<f64> = theta.iter().zip(&self.theta_hat).map(|(a, b)| a - b).collect();
        weighted_norm(&diff, &self.gram)
    }
}

/// Membership in the region `{theta in [0, upper]^d : ‖theta - theta_hat‖_M <= rho}`.
pub fn in_region(theta: &[f64], est: &NodeEstimate) -> bool {
    theta.len() == est.dim()
        && theta.iter().all(|&t| (0.0..=est.upper).contains(&t))
        && est.distance(theta) <= est.rho
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EstimationMode {
    /// Refit every node from its full pair history, starting at zero.
    #[default]
    Scratch,
    /// Absorb only new pairs and warm-start from the previous estimate.
    Incremental,
}

#[derive(Debug, Clone)]
struct NodeLearner {
    node: NodeId,
    summary: PairSummary,
    theta_hat: Vec<f64>,
}

/// Per-round estimation for every node with at least one in-edge.
#[derive(Debug, Clone)]
pub struct Estimator {
    mode: EstimationMode,
    upper: f64,
    opts: FitOptions,
    learners: Vec<Option<NodeLearner>>,
    absorbed: usize,
}

impl Estimator {
    pub fn new(graph: &Graph, mode: EstimationMode, upper: f64, opts: FitOptions) -> Self {
        let learners = (0..graph.node_count())
            .map(|v| {
                let d = graph.in_degree(v);
                (d > 0).then(|| NodeLearner {
                    node: v,
                    summary: PairSummary::new(d),
                    theta_hat: vec![0.0; d],
                })
            })
            .collect();
        Self {
            mode,
            upper,
            opts,
            learners,
            absorbed: 0,
        }
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    /// Brings every node estimate up to date with `log`. Nodes without
    /// in-edges map to `None`.
    pub fn refresh(&mut self, log: &PairLog, rho: f64) -> Result<Vec<Option<NodeEstimate>>> {
        let mut touched = vec![false; self.learners.len()];
        match self.mode {
            EstimationMode::Scratch => {
                for slot in self.learners.iter_mut().flatten() {
                    slot.summary = PairSummary::from_pairs(slot.summary.dim(), log.for_node(slot.node))?;
                    touched[slot.node] = true;
                }
            }
            EstimationMode::Incremental => {
                for pair in &log.pairs()[self.absorbed..] {
                    let learner = self
                        .learners
                        .get_mut(pair.owner)
                        .and_then(Option::as_mut)
                        .ok_or_else(|| Error::domain(format!("pair for node {} without in-edges", pair.owner)))?;
                    learner.summary.add(pair)?;
                    touched[pair.owner] = true;
                }
            }
        }
        self.absorbed = log.len();

        let (mode, upper, opts) = (self.mode, self.upper, self.opts);
        self.learners
            .par_iter_mut()
            .flatten()
            .filter(|l| touched[l.node] && l.summary.total() > 0)
            .try_for_each(|l| -> Result<()> {
                let start = match mode {
                    EstimationMode::Scratch => None,
                    EstimationMode::Incremental => Some(l.theta_hat.as_slice()),
                };
                l.theta_hat = fit_summary(&l.summary, upper, start, opts)?.theta;
                Ok(())
            })?;

        Ok(self
            .learners
            .iter()
            .map(|l| {
                l.as_ref().map(|l| NodeEstimate {
                    node: l.node,
                    theta_hat: l.theta_hat.clone(),
                    gram: l.summary.gram().clone(),
                    rho,
                    upper: self.upper,
                    pair_count: l.summary.total(),
                })
            })
            .collect())
    }
}

/// Fits every node that appears in a pair log, independent of any graph.
/// Dimensions come from the logged bitstrings.
pub fn estimate_from_log(log: &PairLog, upper: f64, rho: f64, opts: FitOptions) -> Result<Vec<NodeEstimate>> {
    let mut owners: Vec<NodeId> = log.pairs().iter().map(|p| p.owner).collect();
    owners.sort_unstable();
    owners.dedup();
    owners
        .into_par_iter()
        .map(|v| {
            let dim = log.for_node(v).next().map(|p| p.x.dim()).unwrap_or(0);
            let summary = PairSummary::from_pairs(dim, log.for_node(v))?;
            let fit = fit_summary(&summary, upper, None, opts)?;
            Ok(NodeEstimate {
                node: v,
                theta_hat: fit.theta,
                gram: summary.gram().clone(),
                rho,
                upper,
                pair_count: summary.total(),
            })
        })
        .collect()
}
