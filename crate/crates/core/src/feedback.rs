//! Turning node-level observations into `(X, Y)` data pairs.
//!
//! For a node `v` that is still inactive after step `τ`, the edges from its
//! in-neighbours that became active exactly at `τ` form one batch `X`; the
//! outcome `Y` records whether `v` became active at `τ + 1`. Scanning stops
//! once `v` activates. The initialization phase only looks at the first
//! step of cascades seeded with a single node.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::cascade::Cascade;
use crate::error::{Error, Result};
use crate::graph::{CharVector, Graph, NodeId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPair {
    /// Round `t` in which the cascade was observed.
    pub round: u64,
    pub owner: NodeId,
    /// 1-based position `j` of the pair within its `(t, v)` group.
    pub index: u32,
    pub x: CharVector,
    pub y: bool,
}

/// Economical extraction for one node. Seeds yield no pairs.
pub fn extract_pairs(graph: &Graph, cascade: &Cascade, v: NodeId, round: u64) -> Vec<DataPair> {
    let mut out = Vec::new();
    if cascade.is_seed(v) {
        return out;
    }
    let dim = graph.in_degree(v);
    let activated_at = cascade.activation_time(v).map(|t| t as usize);
    for tau in 0..=cascade.last_step() {
        if activated_at.is_some_and(|a| a <= tau) {
            break;
        }
        let ones: Vec<usize> = graph
            .incoming(v)
            .iter()
            .enumerate()
            .filter(|&(_, &e)| cascade.activation_time(graph.edge(e).source) == Some(tau as u32))
            .map(|(k, _)| k)
            .collect();
        if ones.is_empty() {
            continue;
        }
        let y = activated_at == Some(tau + 1);
        out.push(DataPair {
            round,
            owner: v,
            index: out.len() as u32 + 1,
            x: CharVector::from_positions(v, dim, ones).expect("positions come from E_v"),
            y,
        });
        if y {
            break;
        }
    }
    out
}

/// Economical extraction for every non-seed node, in ascending node order.
pub fn extract_round_pairs(graph: &Graph, cascade: &Cascade, round: u64) -> Vec<DataPair> {
    (0..graph.node_count())
        .flat_map(|v| extract_pairs(graph, cascade, v, round))
        .collect()
}

/// First-step extraction for a cascade seeded with exactly `{seed}`: one
/// single-edge pair per out-neighbour.
pub fn extract_init_pairs(graph: &Graph, cascade: &Cascade, seed: NodeId, round: u64) -> Result<Vec<DataPair>> {
    if cascade.seeds() != [seed] {
        return Err(Error::domain(format!(
            "initialization cascade must be seeded with exactly {{{}}}",
            graph.label(seed)
        )));
    }
    Ok(graph
        .outgoing(seed)
        .iter()
        .map(|&e| {
            let v = graph.edge(e).target;
            DataPair {
                round,
                owner: v,
                index: 1,
                x: CharVector::from_positions(v, graph.in_degree(v), vec![graph.slot(e)])
                    .expect("slot inside E_v"),
                y: cascade.activation_time(v) == Some(1),
            }
        })
        .collect())
}

/// Append-only pair store with a per-node index.
#[derive(Debug, Clone, Default)]
pub struct PairLog {
    pairs: Vec<DataPair>,
    by_node: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairRow {
    t: u64,
    v: NodeId,
    j: u32,
    #[serde(rename = "X")]
    x: String,
    #[serde(rename = "Y")]
    y: u8,
}

impl PairLog {
    pub fn new(node_count: usize) -> Self {
        Self {
            pairs: Vec::new(),
            by_node: vec![Vec::new(); node_count],
        }
    }

    pub fn push(&mut self, pair: DataPair) {
        if pair.owner >= self.by_node.len() {
            self.by_node.resize(pair.owner + 1, Vec::new());
        }
        self.by_node[pair.owner].push(self.pairs.len());
        self.pairs.push(pair);
    }

    pub fn extend(&mut self, pairs: impl IntoIterator<Item = DataPair>) {
        for p in pairs {
            self.push(p);
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[DataPair] {
        &self.pairs
    }

    /// All pairs owned by `v`, in append order.
    pub fn for_node(&self, v: NodeId) -> impl Iterator<Item = &DataPair> + '_ {
        self.by_node
            .get(v)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .map(move |&i| &self.pairs[i])
    }

    /// Pairs owned by `v` observed in rounds `<= round`.
    pub fn for_node_until(&self, v: NodeId, round: u64) -> impl Iterator<Item = &DataPair> + '_ {
        self.for_node(v).filter(move |p| p.round <= round)
    }

    /// CSV with columns `t, v, j, X, Y`; `X` is a bitstring in `E_v` order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.pairs {
            w.serialize(PairRow {
                t: p.round,
                v: p.owner,
                j: p.index,
                x: p.x.bitstring(),
                y: u8::from(p.y),
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut log = PairLog::default();
        let mut r = csv::Reader::from_reader(reader);
        for row in r.deserialize() {
            let row: PairRow = row?;
            if row.y > 1 {
                return Err(Error::domain(format!("Y must be 0 or 1, found {}", row.y)));
            }
            log.push(DataPair {
                round: row.t,
                owner: row.v,
                index: row.j,
                x: CharVector::from_bitstring(row.v, &row.x)?,
                y: row.y == 1,
            });
        }
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::simulate_cascade;
    use crate::rng;
    use proptest::prelude::*;

    fn dense(p: &DataPair) -> (Vec<f64>, bool) {
        (p.x.to_dense(), p.y)
    }

    #[test]
    fn simultaneous_activators_are_batched() {
        // a -> c, b -> c
        let g = Graph::from_pairs(3, &[(0, 2), (1, 2)]).unwrap();
        let c = Cascade::from_layers(3, vec![vec![0, 1], vec![2]]).unwrap();
        let pairs = extract_pairs(&g, &c, 2, 1);
        assert_eq!(pairs.len(), 1);
        assert_eq!(dense(&pairs[0]), (vec![1.0, 1.0], true));
        assert!(extract_pairs(&g, &c, 0, 1).is_empty());
    }

    #[test]
    fn chain_pairs() {
        let g = Graph::from_pairs(3, &[(0, 1), (1, 2)]).unwrap();
        let c = Cascade::from_layers(3, vec![vec![0], vec![1]]).unwrap();
        let pc = extract_pairs(&g, &c, 2, 1);
        assert_eq!(pc.iter().map(dense).collect::<Vec<_>>(), vec![(vec![1.0], false)]);
        let pb = extract_pairs(&g, &c, 1, 1);
        assert_eq!(pb.iter().map(dense).collect::<Vec<_>>(), vec![(vec![1.0], true)]);
    }

    #[test]
    fn sequential_batches() {
        // a -> b, a -> c, b -> c; E_c = (e_ac, e_bc)
        let g = Graph::from_pairs(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let c = Cascade::from_layers(3, vec![vec![0], vec![1]]).unwrap();
        let pairs = extract_pairs(&g, &c, 2, 1);
        assert_eq!(
            pairs.iter().map(dense).collect::<Vec<_>>(),
            vec![(vec![1.0, 0.0], false), (vec![0.0, 1.0], false)]
        );
        assert_eq!(pairs.iter().map(|p| p.index).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn nothing_recorded_after_activation() {
        // a -> c at step 1, then b (activated by a) would try c at step 2
        let g = Graph::from_pairs(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let c = Cascade::from_layers(3, vec![vec![0], vec![1, 2]]).unwrap();
        let pairs = extract_pairs(&g, &c, 2, 1);
        assert_eq!(pairs.iter().map(dense).collect::<Vec<_>>(), vec![(vec![1.0, 0.0], true)]);
    }

    #[test]
    fn init_pairs() {
        let g = Graph::from_pairs(3, &[(0, 1), (0, 2)]).unwrap();
        let c = Cascade::from_layers(3, vec![vec![0], vec![1]]).unwrap();
        let pairs = extract_init_pairs(&g, &c, 0, 1).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].owner, pairs[0].y), (1, true));
        assert_eq!((pairs[1].owner, pairs[1].y), (2, false));
        assert!(extract_init_pairs(&g, &c, 1, 1).is_err());

        let leaf = Cascade::from_layers(3, vec![vec![2]]).unwrap();
        assert!(extract_init_pairs(&g, &leaf, 2, 1).unwrap().is_empty());

        let g1 = Graph::from_pairs(2, &[(0, 1)]).unwrap();
        let c = simulate_cascade(&g1, &[1.0], &[0], &mut rng::stream(0, "t", 0));
        assert!(extract_init_pairs(&g1, &c, 0, 1).unwrap()[0].y);
    }

    #[test]
    fn csv_round_trip() {
        let g = Graph::from_pairs(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        let c = Cascade::from_layers(3, vec![vec![0], vec![1]]).unwrap();
        let mut log = PairLog::new(3);
        log.extend(extract_round_pairs(&g, &c, 4));
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,v,j,X,Y\n4,1,1,1,1\n4,2,1,10,0\n4,2,2,01,0\n"), "{text}");
        let back = PairLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.pairs(), log.pairs());
        assert_eq!(back.for_node(2).count(), 2);
    }

    #[test]
    fn empirical_activation_rate_is_unbiased() {
        // Three sources into one hub; sources fire in different steps via a chain
        // 0 -> 1 -> 2 and all three point at 3.
        let g = Graph::from_pairs(4, &[(0, 1), (1, 2), (0, 3), (1, 3), (2, 3)]).unwrap();
        let p = [0.6, 0.6, 0.2, 0.3, 0.25];
        let mut by_x: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
        for i in 0..40_000 {
            let c = simulate_cascade(&g, &p, &[0], &mut rng::stream(3, "unbiased", i));
            for pair in extract_pairs(&g, &c, 3, i) {
                let e = by_x.entry(pair.x.bitstring()).or_default();
                e.0 += 1.0;
                e.1 += f64::from(u8::from(pair.y));
            }
        }
        let hub = [0.2, 0.3, 0.25];
        for (bits, (count, hits)) in by_x {
            let x = CharVector::from_bitstring(3, &bits).unwrap();
            let expect = 1.0 - x.ones().iter().map(|&k| 1.0 - hub[k]).product::<f64>();
            let mean = hits / count;
            let se = (expect * (1.0 - expect) / count).sqrt();
            assert!((mean - expect).abs() <= 4.0 * se, "{bits}: {mean} vs {expect}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pair_structure(seed in 0u64..10_000, p in 0.05f64..0.95) {
            let g = Graph::from_pairs(5, &[(0, 1), (0, 2), (1, 2), (2, 3), (1, 3), (0, 4), (3, 4), (2, 4)]).unwrap();
            let probs = vec![p; g.edge_count()];
            let c = simulate_cascade(&g, &probs, &[0], &mut rng::stream(seed, "prop", 0));
            for v in 0..5 {
                let pairs = extract_pairs(&g, &c, v, 0);
                prop_assert!(pairs.len() <= g.in_degree(v));
                for (j, pair) in pairs.iter().enumerate() {
                    prop_assert!(!pair.x.is_zero());
                    if j + 1 < pairs.len() {
                        prop_assert!(!pair.y);
                    }
                }
            }
            let init = extract_init_pairs(&g, &c, 0, 0).unwrap();
            for pair in init {
                let first = extract_pairs(&g, &c, pair.owner, 0).into_iter().next().unwrap();
                prop_assert_eq!(first, pair);
            }
        }
    }
}
