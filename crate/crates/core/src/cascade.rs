//! Independent cascade diffusion: single cascades, Monte Carlo spread
//! estimates, and an exact live-edge enumeration oracle for small graphs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{self, tag};

/// Largest edge count accepted by [`influence_exact`].
pub const EXACT_EDGE_LIMIT: usize = 22;
/// Node limit of the bitmask reachability used by the exact oracle.
pub const EXACT_NODE_LIMIT: usize = 128;

/// One realised diffusion. `layers[τ]` holds `S_τ \ S_{τ-1}` in ascending id
/// order; the last layer is the last step that activated anybody.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cascade {
    layers: Vec<Vec<NodeId>>,
    activation: Vec<Option<u32>>,
}

impl Cascade {
    /// Builds a cascade from explicit layers `S_0, S_1 \ S_0, ...`.
    /// Empty trailing layers are dropped.
    pub fn from_layers(node_count: usize, layers: Vec<Vec<NodeId>>) -> Result<Self> {
        let mut activation = vec![None; node_count];
        let mut cleaned = Vec::with_capacity(layers.len());
        for (tau, mut layer) in layers.into_iter().enumerate() {
            layer.sort_unstable();
            layer.dedup();
            if tau > 0 && layer.is_empty() {
                break;
            }
            for &v in &layer {
                if v >= node_count {
                    return Err(Error::domain(format!("node {v} out of range")));
                }
                if activation[v].is_some() {
                    return Err(Error::domain(format!("node {v} activated twice")));
                }
                activation[v] = Some(tau as u32);
            }
            cleaned.push(layer);
        }
        if cleaned.is_empty() {
            cleaned.push(Vec::new());
        }
        Ok(Self {
            layers: cleaned,
            activation,
        })
    }

    pub fn node_count(&self) -> usize {
        self.activation.len()
    }

    /// `S_0`, sorted.
    pub fn seeds(&self) -> &[NodeId] {
        &self.layers[0]
    }

    pub fn is_seed(&self, v: NodeId) -> bool {
        self.activation[v] == Some(0)
    }

    pub fn activation_time(&self, v: NodeId) -> Option<u32> {
        self.activation[v]
    }

    /// `S_τ \ S_{τ-1}`; empty once the diffusion has stopped.
    pub fn newly_active(&self, tau: usize) -> &[NodeId] {
        self.layers.get(tau).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `S_τ`, sorted.
    pub fn active_after(&self, tau: usize) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self.layers.iter().take(tau + 1).flatten().copied().collect();
        out.sort_unstable();
        out
    }

    pub fn is_active_after(&self, v: NodeId, tau: usize) -> bool {
        self.activation[v].is_some_and(|t| t as usize <= tau)
    }

    /// Index of the last step that activated a node.
    pub fn last_step(&self) -> usize {
        self.layers.len() - 1
    }

    /// `|S_{n-1}|`.
    pub fn final_size(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Stable digest of the activation times, for run logs.
    pub fn digest(&self) -> u64 {
        rng::digest(
            self.activation
                .iter()
                .map(|a| a.map_or(u64::MAX, u64::from)),
        )
    }
}

/// Runs one IC diffusion. In every step the candidate targets are visited
/// in ascending id, and the attempts on each target follow its `E_v` order.
pub fn simulate_cascade<R: Rng + ?Sized>(
    graph: &Graph,
    p: &[f64],
    seeds: &[NodeId],
    rng: &mut R,
) -> Cascade {
    let n = graph.node_count();
    let mut activation: Vec<Option<u32>> = vec![None; n];
    let mut first: Vec<NodeId> = seeds.to_vec();
    first.sort_unstable();
    first.dedup();
    for &s in &first {
        activation[s] = Some(0);
    }
    let mut layers = vec![first];
    let mut candidates = Vec::new();
    loop {
        let tau = layers.len() as u32;
        let frontier = layers.last().expect("nonempty");
        candidates.clear();
        for &u in frontier {
            for &e in graph.outgoing(u) {
                let v = graph.edge(e).target;
                if activation[v].is_none() {
                    candidates.push(v);
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        let mut fresh = Vec::new();
        for &v in &candidates {
            for &e in graph.incoming(v) {
                let u = graph.edge(e).source;
                if activation[u] == Some(tau - 1) && rng.random::<f64>() < p[e] {
                    activation[v] = Some(tau);
                    fresh.push(v);
                    break;
                }
            }
        }
        if fresh.is_empty() {
            break;
        }
        layers.push(fresh);
    }
    Cascade { layers, activation }
}

/// Monte Carlo estimate of the expected final active count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl SpreadEstimate {
    /// Mean and standard error from integer sums, so that the result does
    /// not depend on the order samples were reduced in.
    fn from_sums(sum: u64, sum_sq: u64, samples: usize) -> Self {
        let k = samples as f64;
        let mean = sum as f64 / k;
        let stderr = if samples > 1 {
            let var = (sum_sq as f64 - k * mean * mean) / (k - 1.0);
            (var.max(0.0) / k).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            stderr,
            samples,
        }
    }
}

/// Monte Carlo spread. Sample `i` uses the stream `(master_seed, i)`, so
/// the result is independent of the worker count.
pub fn influence_mc(
    graph: &Graph,
    p: &[f64],
    seeds: &[NodeId],
    samples: usize,
    master_seed: u64,
) -> Result<SpreadEstimate> {
    if samples == 0 {
        return Err(Error::domain("sample count must be at least 1"));
    }
    let (sum, sum_sq) = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(master_seed, tag::SPREAD_SAMPLE, i);
            let k = simulate_cascade(graph, p, seeds, &mut r).final_size() as u64;
            (k, k * k)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(SpreadEstimate::from_sums(sum, sum_sq, samples))
}

fn check_exact_capacity(graph: &Graph) -> Result<()> {
    if graph.edge_count() > EXACT_EDGE_LIMIT {
        return Err(Error::Capacity(format!(
            "exact spread enumerates 2^m live-edge graphs and needs m <= {EXACT_EDGE_LIMIT} \
             (got m = {}); use the Monte Carlo evaluator instead",
            graph.edge_count()
        )));
    }
    if graph.node_count() > EXACT_NODE_LIMIT {
        return Err(Error::Capacity(format!(
            "exact spread supports at most {EXACT_NODE_LIMIT} nodes (got {}); \
             use the Monte Carlo evaluator instead",
            graph.node_count()
        )));
    }
    Ok(())
}

fn mask_of(nodes: &[NodeId]) -> u128 {
    nodes.iter().fold(0u128, |m, &v| m | (1u128 << v))
}

fn closure(start: u128, out: &[u128]) -> u128 {
    let mut reach = start;
    let mut frontier = start;
    while frontier != 0 {
        let u = frontier.trailing_zeros() as usize;
        frontier &= frontier - 1;
        let next = out[u] & !reach;
        reach |= next;
        frontier |= next;
    }
    reach
}

/// Depth-first walk over all live-edge subsets with nonzero probability.
/// `visit` receives the subset probability and the live out-neighbour
/// masks.
fn enumerate_worlds(graph: &Graph, p: &[f64], visit: &mut impl FnMut(f64, &[u128])) {
    fn rec(
        graph: &Graph,
        p: &[f64],
        e: usize,
        prob: f64,
        out: &mut Vec<u128>,
        visit: &mut impl FnMut(f64, &[u128]),
    ) {
        if e == graph.edge_count() {
            visit(prob, out);
            return;
        }
        let edge = graph.edge(e);
        let pe = p[e];
        if pe < 1.0 {
            rec(graph, p, e + 1, prob * (1.0 - pe), out, visit);
        }
        if pe > 0.0 {
            let bit = 1u128 << edge.target;
            out[edge.source] |= bit;
            rec(graph, p, e + 1, prob * pe, out, visit);
            out[edge.source] &= !bit;
        }
    }
    let mut out = vec![0u128; graph.node_count()];
    rec(graph, p, 0, 1.0, &mut out, visit);
}

/// Exact `sigma(S, p)` by summing reachable counts over every live-edge
/// realisation, weighted by its probability.
pub fn influence_exact(graph: &Graph, p: &[f64], seeds: &[NodeId]) -> Result<f64> {
    Ok(influence_exact_many(graph, p, &[seeds.to_vec()])?[0])
}

/// [`influence_exact`] for many seed sets sharing one enumeration.
pub fn influence_exact_many(graph: &Graph, p: &[f64], seed_sets: &[Vec<NodeId>]) -> Result<Vec<f64>> {
    check_exact_capacity(graph)?;
    let n = graph.node_count();
    for s in seed_sets.iter().flatten() {
        if *s >= n {
            return Err(Error::domain(format!("seed {s} out of range")));
        }
    }
    let masks: Vec<u128> = seed_sets.iter().map(|s| mask_of(s)).collect();
    let mut totals = vec![0.0; seed_sets.len()];
    if masks.len() <= 2 {
        enumerate_worlds(graph, p, &mut |prob, out| {
            for (t, &m) in totals.iter_mut().zip(&masks) {
                *t += prob * closure(m, out).count_ones() as f64;
            }
        });
    } else {
        let mut single = vec![0u128; n];
        enumerate_worlds(graph, p, &mut |prob, out| {
            for (v, r) in single.iter_mut().enumerate() {
                *r = closure(1u128 << v, out);
            }
            for (t, &m) in totals.iter_mut().zip(&masks) {
                let mut reach = 0u128;
                let mut rest = m;
                while rest != 0 {
                    let v = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    reach |= single[v];
                }
                *t += prob * reach.count_ones() as f64;
            }
        });
    }
    Ok(totals)
}

/// A fixed pool of sampled live-edge graphs (common random numbers for
/// comparing seed sets).
#[derive(Debug, Clone)]
pub struct LiveEdgePool {
    node_count: usize,
    // Per sample, CSR adjacency of the live edges.
    offsets: Vec<Vec<u32>>,
    targets: Vec<Vec<u32>>,
}

impl LiveEdgePool {
    pub fn sample(graph: &Graph, p: &[f64], samples: usize, master_seed: u64) -> Result<Self> {
        if samples == 0 {
            return Err(Error::domain("live-edge pool needs at least one sample"));
        }
        let n = graph.node_count();
        let (offsets, targets) = (0..samples as u64)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(master_seed, tag::LIVE_EDGE_POOL, i);
                let mut offsets = Vec::with_capacity(n + 1);
                let mut targets = Vec::new();
                offsets.push(0u32);
                for u in 0..n {
                    for &e in graph.outgoing(u) {
                        if r.random::<f64>() < p[e] {
                            targets.push(graph.edge(e).target as u32);
                        }
                    }
                    offsets.push(targets.len() as u32);
                }
                (offsets, targets)
            })
            .unzip();
        Ok(Self {
            node_count: n,
            offsets,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn reach_count(&self, sample: usize, seeds: &[NodeId], seen: &mut Vec<bool>, stack: &mut Vec<u32>) -> usize {
        let off = &self.offsets[sample];
        let tg = &self.targets[sample];
        seen.clear();
        seen.resize(self.node_count, false);
        stack.clear();
        let mut count = 0;
        for &s in seeds {
            if !seen[s] {
                seen[s] = true;
                count += 1;
                stack.push(s as u32);
            }
        }
        while let Some(u) = stack.pop() {
            let u = u as usize;
            for &v in &tg[off[u] as usize..off[u + 1] as usize] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    }

    /// Spread of `seeds` averaged over the pool.
    pub fn spread(&self, seeds: &[NodeId]) -> SpreadEstimate {
        let mut seen = Vec::new();
        let mut stack = Vec::new();
        let (mut sum, mut sum_sq) = (0u64, 0u64);
        for i in 0..self.len() {
            let k = self.reach_count(i, seeds, &mut seen, &mut stack) as u64;
            sum += k;
            sum_sq += k * k;
        }
        SpreadEstimate::from_sums(sum, sum_sq, self.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::load_graph;
    use proptest::prelude::*;

    fn chain(p: f64) -> (Graph, Vec<f64>) {
        let g = Graph::from_pairs(3, &[(0, 1), (1, 2)]).unwrap();
        (g, vec![p, p])
    }

    #[test]
    fn all_seeds_is_constant() {
        let (g, p) = chain(0.5);
        let c = simulate_cascade(&g, &p, &[0, 1, 2], &mut rng::stream(1, "t", 0));
        assert_eq!(c.last_step(), 0);
        assert_eq!(c.active_after(0), vec![0, 1, 2]);
        assert_eq!(c.active_after(5), vec![0, 1, 2]);
        assert!(c.newly_active(1).is_empty());
    }

    #[test]
    fn deterministic_chain() {
        let g = Graph::from_pairs(3, &[(0, 1), (1, 2)]).unwrap();
        // p = 1 is not a valid edge parameter, but the simulator accepts it
        let p = [1.0, 1.0];
        let c = simulate_cascade(&g, &p, &[0], &mut rng::stream(1, "t", 0));
        assert_eq!(c.active_after(1), vec![0, 1]);
        assert_eq!(c.active_after(2), vec![0, 1, 2]);
        assert_eq!(c.activation_time(2), Some(2));
    }

    #[test]
    fn zero_probabilities_never_spread() {
        let (g, p) = chain(0.0);
        for i in 0..20 {
            let c = simulate_cascade(&g, &p, &[0], &mut rng::stream(1, "t", i));
            assert_eq!(c.final_size(), 1);
        }
        let est = influence_mc(&g, &p, &[0, 2], 500, 3).unwrap();
        assert_eq!((est.mean, est.stderr), (2.0, 0.0));
    }

    #[test]
    fn mc_degenerate_all_seeds() {
        let (g, p) = chain(0.5);
        let est = influence_mc(&g, &p, &[0, 1, 2], 100, 3).unwrap();
        assert_eq!(est.mean, 3.0);
        assert_eq!(est.stderr, 0.0);
        assert!(influence_mc(&g, &p, &[0], 0, 3).is_err());
    }

    #[test]
    fn mc_single_edge() {
        let g = Graph::from_pairs(2, &[(0, 1)]).unwrap();
        let est = influence_mc(&g, &[0.5], &[0], 100_000, 11).unwrap();
        assert!((est.mean - 1.5).abs() <= 3.0 * est.stderr, "{est:?}");
    }

    #[test]
    fn exact_examples() {
        let (g, p) = chain(0.5);
        assert!((influence_exact(&g, &p, &[0]).unwrap() - 1.75).abs() < 1e-15);
        assert_eq!(influence_exact(&g, &p, &[0, 1, 2]).unwrap(), 3.0);
        let g1 = Graph::from_pairs(2, &[(0, 1)]).unwrap();
        assert!((influence_exact(&g1, &[0.3], &[0]).unwrap() - 1.3).abs() < 1e-15);
        let many = influence_exact_many(&g, &p, &[vec![0], vec![1], vec![2], vec![0, 2]]).unwrap();
        assert!((many[0] - 1.75).abs() < 1e-15);
        assert!((many[1] - 1.5).abs() < 1e-15);
        assert!((many[2] - 1.0).abs() < 1e-15);
        assert!((many[3] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn exact_capacity_error() {
        let pairs: Vec<_> = (0..23).map(|i| (i, i + 1)).collect();
        let g = Graph::from_pairs(24, &pairs).unwrap();
        let p = vec![0.1; 23];
        assert!(matches!(influence_exact(&g, &p, &[0]), Err(Error::Capacity(msg)) if msg.contains("Monte Carlo")));
    }

    #[test]
    fn same_seed_same_cascade() {
        let (g, p) = load_graph("a b 0.4\nb c 0.4\na c 0.4\nc d 0.4\nb d 0.4\n").unwrap();
        let a = simulate_cascade(&g, p.p(), &[0], &mut rng::stream(42, tag::CASCADE, 9));
        let b = simulate_cascade(&g, p.p(), &[0], &mut rng::stream(42, tag::CASCADE, 9));
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn live_edge_pool_matches_exact() {
        let (g, p) = chain(0.5);
        let pool = LiveEdgePool::sample(&g, &p, 50_000, 5).unwrap();
        let est = pool.spread(&[0]);
        assert!((est.mean - 1.75).abs() <= 4.0 * est.stderr);
    }

    #[test]
    fn from_layers_validates() {
        assert!(Cascade::from_layers(3, vec![vec![0], vec![0]]).is_err());
        let c = Cascade::from_layers(3, vec![vec![0], vec![1], vec![]]).unwrap();
        assert_eq!(c.last_step(), 1);
        assert_eq!(c.final_size(), 2);
    }

    fn small_graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..6).prop_flat_map(|n| {
            let all: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v)))
                .collect();
            (Just(n), proptest::sample::subsequence(all.clone(), 0..=all.len().min(12)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn cascade_invariants((n, edges) in small_graph(), seed in 0u64..1000, p in 0.0f64..0.9) {
            let g = Graph::from_pairs(n, &edges).unwrap();
            let probs = vec![p; g.edge_count()];
            let c = simulate_cascade(&g, &probs, &[0], &mut rng::stream(seed, "prop", 0));
            prop_assert!(c.last_step() < n);
            for tau in 1..=c.last_step() {
                for &v in c.newly_active(tau) {
                    // some in-neighbour became active in the previous step
                    prop_assert!(g.incoming(v).iter().any(|&e| c.activation_time(g.edge(e).source) == Some(tau as u32 - 1)));
                }
                prop_assert!(c.active_after(tau).len() > c.active_after(tau - 1).len());
            }
        }

        #[test]
        fn exact_is_monotone_in_p((n, edges) in small_graph(), raw in proptest::collection::vec((0.0f64..0.95, 0.0f64..1.0), 12)) {
            let g = Graph::from_pairs(n, &edges).unwrap();
            let m = g.edge_count();
            let lo: Vec<f64> = raw[..m].iter().map(|r| r.0).collect();
            let hi: Vec<f64> = raw[..m].iter().map(|r| r.0 + (0.99 - r.0) * r.1).collect();
            let a = influence_exact(&g, &lo, &[0]).unwrap();
            let b = influence_exact(&g, &hi, &[0]).unwrap();
            prop_assert!(a <= b + 1e-12);
        }

        #[test]
        fn exact_is_monotone_in_seeds((n, edges) in small_graph(), p in 0.0f64..0.95, w in 0usize..6) {
            let g = Graph::from_pairs(n, &edges).unwrap();
            let probs = vec![p; g.edge_count()];
            let w = w % n;
            let a = influence_exact(&g, &probs, &[0]).unwrap();
            let b = influence_exact(&g, &probs, &[0, w]).unwrap();
            prop_assert!(a <= b + 1e-12);
        }
    }
}
