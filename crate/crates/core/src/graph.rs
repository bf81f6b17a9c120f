//! Directed graph model, edge-list I/O, characteristic vectors and the
//! probability/weight transform `theta = -ln(1 - p)`.
//!
//! Edge ids are assigned in input order. Inside each incoming-edge list
//! `E_v` the edges keep that order, and every per-node vector or matrix in
//! the crate uses it as the coordinate order.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: NodeId,
    pub target: NodeId,
}

/// Immutable directed graph with per-node incoming and outgoing edge indexes.
#[derive(Debug, Clone)]
pub struct Graph {
    labels: Vec<String>,
    ids: HashMap<String, NodeId>,
    edges: Vec<Edge>,
    incoming: Vec<Vec<EdgeId>>,
    outgoing: Vec<Vec<EdgeId>>,
    // Position of each edge inside the incoming list of its target.
    slot: Vec<usize>,
}

impl Graph {
    /// Builds a graph from node labels and an edge list. Rejects self-loops,
    /// duplicate `(u, v)` pairs and out-of-range endpoints.
    pub fn new(labels: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        let n = labels.len();
        let mut ids = HashMap::with_capacity(n);
        for (i, label) in labels.iter().enumerate() {
            if ids.insert(label.clone(), i).is_some() {
                return Err(Error::domain(format!("duplicate node label {label:?}")));
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        let mut slot = Vec::with_capacity(edges.len());
        for (id, e) in edges.iter().enumerate() {
            if e.source >= n || e.target >= n {
                return Err(Error::domain(format!("edge {id} has an endpoint outside 0..{n}")));
            }
            if e.source == e.target {
                return Err(Error::domain(format!("self-loop on node {}", labels[e.source])));
            }
            if !seen.insert((e.source, e.target)) {
                return Err(Error::domain(format!(
                    "duplicate edge {} -> {}",
                    labels[e.source], labels[e.target]
                )));
            }
            slot.push(incoming[e.target].len());
            incoming[e.target].push(id);
            outgoing[e.source].push(id);
        }
        Ok(Self {
            labels,
            ids,
            edges,
            incoming,
            outgoing,
            slot,
        })
    }

    /// Convenience constructor with labels `"0".."n-1"`.
    pub fn from_pairs(n: usize, pairs: &[(NodeId, NodeId)]) -> Result<Self> {
        let labels = (0..n).map(|i| i.to_string()).collect();
        let edges = pairs
            .iter()
            .map(|&(source, target)| Edge { source, target })
            .collect();
        Self::new(labels, edges)
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> Edge {
        self.edges[e]
    }

    /// `E_v` in coordinate order.
    pub fn incoming(&self, v: NodeId) -> &[EdgeId] {
        &self.incoming[v]
    }

    pub fn outgoing(&self, u: NodeId) -> &[EdgeId] {
        &self.outgoing[u]
    }

    pub fn in_degree(&self, v: NodeId) -> usize {
        self.incoming[v].len()
    }

    /// `D`, the maximum in-degree (0 for an edgeless graph).
    pub fn max_in_degree(&self) -> usize {
        self.incoming.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Coordinate of edge `e` inside `E_v` of its target.
    pub fn slot(&self, e: EdgeId) -> usize {
        self.slot[e]
    }

    pub fn label(&self, v: NodeId) -> &str {
        &self.labels[v]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn node_id(&self, label: &str) -> Option<NodeId> {
        self.ids.get(label).copied()
    }

    /// Resolves a list of labels to ids, failing on the first unknown one.
    pub fn resolve(&self, labels: &[&str]) -> Result<Vec<NodeId>> {
        labels
            .iter()
            .map(|l| {
                self.node_id(l)
                    .ok_or_else(|| Error::domain(format!("unknown node label {l:?}")))
            })
            .collect()
    }

    pub fn find_edge(&self, source: NodeId, target: NodeId) -> Option<EdgeId> {
        self.incoming[target]
            .iter()
            .copied()
            .find(|&e| self.edges[e].source == source)
    }
}

/// Edge probabilities `p` paired with their weights `theta = -ln(1 - p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    p: Vec<f64>,
    theta: Vec<f64>,
}

impl EdgeParams {
    pub fn from_p(p: Vec<f64>) -> Result<Self> {
        let theta = theta_from_p(&p)?;
        Ok(Self { p, theta })
    }

    pub fn from_theta(theta: Vec<f64>) -> Result<Self> {
        let p = p_from_theta(&theta)?;
        Ok(Self { p, theta })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// `prod_{e in E_v} (1 - p(e))`, the probability that `v` resists all
    /// of its in-neighbours at once.
    pub fn survival_product(&self, graph: &Graph, v: NodeId) -> f64 {
        graph.incoming(v).iter().map(|&e| 1.0 - self.p[e]).product()
    }

    /// Checks `prod (1 - p(e)) >= gamma` for every node; returns the first
    /// violating node.
    pub fn check_assumption(&self, graph: &Graph, gamma: f64) -> Result<()> {
        for v in 0..graph.node_count() {
            let prod = self.survival_product(graph, v);
            if prod < gamma {
                return Err(Error::domain(format!(
                    "node {} has survival product {prod} below gamma {gamma}",
                    graph.label(v)
                )));
            }
        }
        Ok(())
    }
}

/// Coordinatewise `-ln(1 - p)`.
pub fn theta_from_p(p: &[f64]) -> Result<Vec<f64>> {
    p.iter()
        .enumerate()
        .map(|(e, &pe)| {
            if !(0.0..1.0).contains(&pe) {
                return Err(Error::domain(format!(
                    "edge {e}: probability {pe} outside [0, 1)"
                )));
            }
            Ok(-(-pe).ln_1p())
        })
        .collect()
}

/// Coordinatewise `1 - exp(-theta)`.
pub fn p_from_theta(theta: &[f64]) -> Result<Vec<f64>> {
    theta
        .iter()
        .enumerate()
        .map(|(e, &t)| {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::domain(format!("edge {e}: weight {t} is not a finite nonnegative number")));
            }
            Ok(-(-t).exp_m1())
        })
        .collect()
}

/// Binary vector over `E_v` for a fixed owner `v`, stored as the sorted list
/// of positions equal to one.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CharVector {
    owner: NodeId,
    dim: usize,
    ones: Vec<usize>,
}

impl CharVector {
    pub fn zeros(owner: NodeId, dim: usize) -> Self {
        Self {
            owner,
            dim,
            ones: Vec::new(),
        }
    }

    /// Builds a vector from raw positions. Positions are sorted and must be
    /// distinct and below `dim`.
    pub fn from_positions(owner: NodeId, dim: usize, mut ones: Vec<usize>) -> Result<Self> {
        ones.sort_unstable();
        if ones.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("repeated position in characteristic vector"));
        }
        if ones.last().is_some_and(|&k| k >= dim) {
            return Err(Error::domain(format!("position out of range for dimension {dim}")));
        }
        Ok(Self { owner, dim, ones })
    }

    /// Parses a `0`/`1` string in `E_v` order.
    pub fn from_bitstring(owner: NodeId, bits: &str) -> Result<Self> {
        let mut ones = Vec::new();
        for (k, c) in bits.chars().enumerate() {
            match c {
                '1' => ones.push(k),
                '0' => {}
                _ => return Err(Error::domain(format!("invalid bit {c:?} in {bits:?}"))),
            }
        }
        Ok(Self {
            owner,
            dim: bits.chars().count(),
            ones,
        })
    }

    pub fn owner(&self) -> NodeId {
        self.owner
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ones(&self) -> &[usize] {
        &self.ones
    }

    pub fn is_zero(&self) -> bool {
        self.ones.is_empty()
    }

    /// `x^T w` for a weight vector over `E_v`.
    pub fn dot(&self, w: &[f64]) -> f64 {
        self.ones.iter().map(|&k| w[k]).sum()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &k in &self.ones {
            out[k] = 1.0;
        }
        out
    }

    pub fn bitstring(&self) -> String {
        let mut s = "0".repeat(self.dim).into_bytes();
        for &k in &self.ones {
            s[k] = b'1';
        }
        String::from_utf8(s).expect("ascii")
    }
}

/// `chi(E')` for `E' ⊆ E_v`.
pub fn char_vector(graph: &Graph, v: NodeId, subset: &[EdgeId]) -> Result<CharVector> {
    let mut ones = Vec::with_capacity(subset.len());
    for &e in subset {
        if e >= graph.edge_count() || graph.edge(e).target != v {
            return Err(Error::domain(format!(
                "edge {e} is not incoming to node {}",
                graph.label(v)
            )));
        }
        ones.push(graph.slot(e));
    }
    CharVector::from_positions(v, graph.in_degree(v), ones)
}

/// Parses `u v p` lines. Blank lines and `#` comments are skipped. Node
/// labels get dense ids in order of first appearance.
pub fn load_graph(source: &str) -> Result<(Graph, EdgeParams)> {
    let mut labels: Vec<String> = Vec::new();
    let mut ids: HashMap<String, NodeId> = HashMap::new();
    let mut edges = Vec::new();
    let mut probs = Vec::new();
    let mut seen = HashSet::new();

    let mut intern = |label: &str, labels: &mut Vec<String>| -> NodeId {
        *ids.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            labels.len() - 1
        })
    };

    for (i, raw) in source.lines().enumerate() {
        let line_no = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected \"u v p\", found {} fields",
                fields.len()
            )));
        }
        let p: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("invalid probability {:?}", fields[2])))?;
        if !(0.0..1.0).contains(&p) {
            return Err(parse_err(format!("probability {p} outside [0, 1)")));
        }
        if fields[0] == fields[1] {
            return Err(parse_err(format!("self-loop on {:?}", fields[0])));
        }
        let u = intern(fields[0], &mut labels);
        let v = intern(fields[1], &mut labels);
        if !seen.insert((u, v)) {
            return Err(parse_err(format!(
                "duplicate edge {} -> {}",
                fields[0], fields[1]
            )));
        }
        edges.push(Edge {
            source: u,
            target: v,
        });
        probs.push(p);
    }
    let graph = Graph::new(labels, edges)?;
    let params = EdgeParams::from_p(probs)?;
    Ok((graph, params))
}

/// Inverse of [`load_graph`]. Isolated nodes cannot be expressed in the
/// edge-list format and are dropped.
pub fn write_edge_list(graph: &Graph, params: &EdgeParams) -> String {
    let mut out = String::new();
    for (e, edge) in graph.edges().iter().enumerate() {
        let _ = writeln!(
            out,
            "{} {} {}",
            graph.label(edge.source),
            graph.label(edge.target),
            params.p()[e]
        );
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub id: EdgeId,
    pub source: NodeId,
    pub target: NodeId,
    pub source_label: String,
    pub target_label: String,
    pub p: f64,
    pub theta: f64,
}

/// JSON mirror of an edge-list file plus the label-to-id mapping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<String>,
    pub max_in_degree: usize,
    pub edges: Vec<EdgeRecord>,
}

impl GraphExport {
    pub fn new(graph: &Graph, params: &EdgeParams) -> Self {
        let edges = graph
            .edges()
            .iter()
            .enumerate()
            .map(|(id, e)| EdgeRecord {
                id,
                source: e.source,
                target: e.target,
                source_label: graph.label(e.source).to_string(),
                target_label: graph.label(e.target).to_string(),
                p: params.p()[id],
                theta: params.theta()[id],
            })
            .collect();
        Self {
            nodes: graph.labels().to_vec(),
            max_in_degree: graph.max_in_degree(),
            edges,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_source_gives_empty_graph() {
        let (g, p) = load_graph("").unwrap();
        assert_eq!(g.node_count(), 0);
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.max_in_degree(), 0);
        assert!(p.is_empty());
    }

    #[test]
    fn two_line_chain() {
        let (g, p) = load_graph("a b 0.5\nb c 0.5\n").unwrap();
        assert_eq!((g.node_count(), g.edge_count(), g.max_in_degree()), (3, 2, 1));
        assert_eq!(g.node_id("c"), Some(2));
        assert_eq!(p.p(), &[0.5, 0.5]);
    }

    #[test]
    fn comments_and_blank_lines() {
        let src = "# header\n\na b 0.25 # trailing\n   \nb a 0.1\n";
        let (g, _) = load_graph(src).unwrap();
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn parse_errors_name_the_line() {
        match load_graph("a b 0.1\na a 0.3\n") {
            Err(Error::Parse { line: 2, message }) => assert!(message.contains("self-loop")),
            other => panic!("unexpected {other:?}"),
        }
        match load_graph("a b 0.1\nc d 0.2\na b 0.3\n") {
            Err(Error::Parse { line: 3, message }) => assert!(message.contains("duplicate")),
            other => panic!("unexpected {other:?}"),
        }
        for bad in ["a b 1.0", "a b -0.1", "a b x", "a b"] {
            assert!(matches!(load_graph(bad), Err(Error::Parse { line: 1, .. })), "{bad}");
        }
    }

    #[test]
    fn incoming_index_keeps_file_order() {
        let (g, _) = load_graph("b c 0.1\na c 0.2\nd c 0.3\na b 0.4\n").unwrap();
        let c = g.node_id("c").unwrap();
        assert_eq!(g.incoming(c), &[0, 1, 2]);
        assert_eq!(g.slot(2), 2);
        assert_eq!(g.slot(3), 0);
        // every edge listed once, under its head
        let mut all: Vec<_> = (0..g.node_count()).flat_map(|v| g.incoming(v).to_vec()).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn char_vector_cases() {
        let g = Graph::from_pairs(4, &[(0, 3), (1, 3), (2, 3)]).unwrap();
        assert_eq!(char_vector(&g, 3, &[]).unwrap().to_dense(), vec![0.0; 3]);
        assert_eq!(char_vector(&g, 3, &[0, 1, 2]).unwrap().to_dense(), vec![1.0; 3]);
        assert_eq!(char_vector(&g, 3, &[1]).unwrap().to_dense(), vec![0.0, 1.0, 0.0]);
        assert_eq!(char_vector(&g, 3, &[1]).unwrap().bitstring(), "010");
        assert!(matches!(char_vector(&g, 2, &[0]), Err(Error::Domain(_))));
    }

    #[test]
    fn bitstring_round_trip() {
        let x = CharVector::from_bitstring(4, "01101").unwrap();
        assert_eq!(x.ones(), &[1, 2, 4]);
        assert_eq!(x.bitstring(), "01101");
        assert!(CharVector::from_bitstring(0, "01a").is_err());
    }

    #[test]
    fn transform_examples() {
        assert_eq!(theta_from_p(&[0.0]).unwrap(), vec![0.0]);
        let t = theta_from_p(&[1.0 - (-1.0f64).exp()]).unwrap()[0];
        assert!((t - 1.0).abs() < 1e-15);
        // -ln(0.7), 30-digit reference
        let t = theta_from_p(&[0.3]).unwrap()[0];
        assert!((t - 0.356_674_943_938_732_4).abs() < 1e-15);
        assert!(theta_from_p(&[1.0]).is_err());
        assert!(theta_from_p(&[1.5]).is_err());
        assert!(theta_from_p(&[-0.1]).is_err());

        assert_eq!(p_from_theta(&[0.0]).unwrap(), vec![0.0]);
        let p = p_from_theta(&[1.0]).unwrap()[0];
        assert!((p - 0.632_120_558_828_557_7).abs() < 1e-15);
        let p = p_from_theta(&[0.356_674_94]).unwrap()[0];
        assert!((p - 0.3).abs() < 1e-8);
        assert!(p_from_theta(&[-1e-3]).is_err());
    }

    #[test]
    fn assumption_check() {
        let g = Graph::from_pairs(3, &[(0, 2), (1, 2)]).unwrap();
        let params = EdgeParams::from_p(vec![0.2, 0.2]).unwrap();
        assert!(params.check_assumption(&g, 0.64).is_ok());
        assert!(params.check_assumption(&g, 0.65).is_err());
    }

    #[test]
    fn json_export_mirrors_edges() {
        let (g, p) = load_graph("x y 0.3\n").unwrap();
        let ex = GraphExport::new(&g, &p);
        assert_eq!(ex.nodes, vec!["x", "y"]);
        assert_eq!(ex.edges[0].source_label, "x");
        assert!((ex.edges[0].theta - 0.356_674_943_938_732_4).abs() < 1e-15);
        let (g2, p2) = load_graph(&write_edge_list(&g, &p)).unwrap();
        assert_eq!(g2.labels(), g.labels());
        assert_eq!(p2, p);
    }

    proptest! {
        #[test]
        fn transform_round_trip(p in proptest::collection::vec(0.0f64..=0.99, 1..40)) {
            let back = p_from_theta(&theta_from_p(&p).unwrap()).unwrap();
            for (a, b) in p.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn transform_is_increasing(a in 0.0f64..0.999, b in 0.0f64..0.999) {
            prop_assume!(a != b);
            let t = theta_from_p(&[a, b]).unwrap();
            prop_assert_eq!(a < b, t[0] < t[1]);
        }

        #[test]
        fn char_vector_is_additive(mask in 0u32..(1 << 6), split in 0u32..(1 << 6)) {
            let g = Graph::from_pairs(7, &[(0, 6), (1, 6), (2, 6), (3, 6), (4, 6), (5, 6)]).unwrap();
            let a: Vec<_> = (0..6).filter(|k| mask & split & (1 << k) != 0).collect();
            let b: Vec<_> = (0..6).filter(|k| mask & !split & (1 << k) != 0).collect();
            let union: Vec<_> = (0..6).filter(|k| mask & (1 << k) != 0).collect();
            let sum: Vec<f64> = char_vector(&g, 6, &a).unwrap().to_dense().iter()
                .zip(char_vector(&g, 6, &b).unwrap().to_dense())
                .map(|(x, y)| x + y)
                .collect();
            prop_assert_eq!(char_vector(&g, 6, &union).unwrap().to_dense(), sum);
        }
    }
}
