//! Synthetic graphs whose incoming probabilities respect a survival floor.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeParams, Graph, NodeId};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphModel {
    /// Each ordered pair of distinct nodes is an edge with probability `p_edge`.
    Erdos { p_edge: f64 },
    /// `0 -> 1 -> ... -> n-1`.
    Chain,
    /// Hub `0` pointing at every other node.
    Star,
    /// Edges only from lower to higher ids, at most `max_indeg` per node.
    Dag { max_indeg: usize },
}

impl fmt::Display for GraphModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphModel::Erdos { p_edge } => write!(f, "erdos:{p_edge}"),
            GraphModel::Chain => f.write_str("chain"),
            GraphModel::Star => f.write_str("star"),
            GraphModel::Dag { max_indeg } => write!(f, "dag:{max_indeg}"),
        }
    }
}

impl FromStr for GraphModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s, None),
        };
        let bad = || Error::Config(format!("unknown graph model {s:?}; expected erdos:<p>, chain, star or dag:<max_indeg>"));
        let model = match (name, arg) {
            ("chain", None) => GraphModel::Chain,
            ("star", None) => GraphModel::Star,
            ("erdos", Some(p)) => GraphModel::Erdos {
                p_edge: p.parse().map_err(|_| bad())?,
            },
            ("dag", Some(d)) => GraphModel::Dag {
                max_indeg: d.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        model.validate()?;
        Ok(model)
    }
}

impl GraphModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GraphModel::Erdos { p_edge } if !(0.0..=1.0).contains(&p_edge) => {
                Err(Error::Config(format!("edge probability {p_edge} outside [0, 1]")))
            }
            GraphModel::Dag { max_indeg: 0 } => Err(Error::Config("dag model needs max_indeg >= 1".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSurvival {
    pub node: String,
    pub in_degree: usize,
    /// `prod (1 - p(e))` over incoming edges.
    pub product: f64,
}

/// Metadata written next to a generated edge list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSidecar {
    pub model: String,
    pub nodes: usize,
    pub edges: usize,
    pub gamma: f64,
    pub seed: u64,
    pub survival: Vec<NodeSurvival>,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub graph: Graph,
    pub params: EdgeParams,
    pub sidecar: GraphSidecar,
}

fn structure<R: Rng + ?Sized>(n: usize, model: GraphModel, r: &mut R) -> Vec<(NodeId, NodeId)> {
    match model {
        GraphModel::Chain => (1..n).map(|v| (v - 1, v)).collect(),
        GraphModel::Star => (1..n).map(|v| (0, v)).collect(),
        GraphModel::Erdos { p_edge } => {
            let mut out = Vec::new();
            for u in 0..n {
                for v in 0..n {
                    if u != v && r.random::<f64>() < p_edge {
                        out.push((u, v));
                    }
                }
            }
            out
        }
        GraphModel::Dag { max_indeg } => {
            let mut out = Vec::new();
            for v in 1..n {
                let d = r.random_range(0..=max_indeg.min(v));
                let mut sources = sample(r, v, d).into_vec();
                sources.sort_unstable();
                out.extend(sources.into_iter().map(|u| (u, v)));
            }
            out
        }
    }
}

/// Draws a graph and, for each node `v`, incoming probabilities uniform in
/// `[0, 1 - gamma^(1/d_v)]`.
pub fn gen_graph(n: usize, model: GraphModel, gamma: f64, seed: u64) -> Result<Generated> {
    if n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma {gamma} must lie in (0, 1)")));
    }
    model.validate()?;
    let mut r = rng::stream(seed, tag::GENERATE, 0);
    let pairs = structure(n, model, &mut r);
    let graph = Graph::from_pairs(n, &pairs)?;
    let mut p = vec![0.0; graph.edge_count()];
    for v in 0..n {
        let incoming = graph.incoming(v);
        if incoming.is_empty() {
            continue;
        }
        let cap = 1.0 - gamma.powf(1.0 / incoming.len() as f64);
        loop {
            for &e in incoming {
                p[e] = r.random::<f64>() * cap;
            }
            // rounding can push the product a hair under gamma
            let prod: f64 = incoming.iter().map(|&e| 1.0 - p[e]).product();
            if prod >= gamma {
                break;
            }
        }
    }
    let params = EdgeParams::from_p(p)?;
    params.check_assumption(&graph, gamma)?;
    let survival = (0..n)
        .map(|v| NodeSurvival {
            node: graph.label(v).to_string(),
            in_degree: graph.in_degree(v),
            product: params.survival_product(&graph, v),
        })
        .collect();
    let sidecar = GraphSidecar {
        model: model.to_string(),
        nodes: n,
        edges: graph.edge_count(),
        gamma,
        seed,
        survival,
    };
    Ok(Generated { graph, params, sidecar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chain_structure() {
        let g = gen_graph(3, GraphModel::Chain, 0.9, 1).unwrap();
        let e: Vec<_> = g.graph.edges().iter().map(|e| (e.source, e.target)).collect();
        assert_eq!(e, vec![(0, 1), (1, 2)]);
        assert!(g.params.p().iter().all(|&p| p <= 0.1 + 1e-15));
        assert_eq!(g.sidecar.survival.len(), 3);
    }

    #[test]
    fn star_structure() {
        let g = gen_graph(5, GraphModel::Star, 0.6, 2).unwrap();
        assert_eq!(g.graph.outgoing(0).len(), 4);
        assert_eq!(g.graph.max_in_degree(), 1);
    }

    #[test]
    fn model_parsing() {
        assert_eq!("chain".parse::<GraphModel>().unwrap(), GraphModel::Chain);
        assert_eq!("dag:3".parse::<GraphModel>().unwrap(), GraphModel::Dag { max_indeg: 3 });
        assert_eq!("erdos:0.25".parse::<GraphModel>().unwrap(), GraphModel::Erdos { p_edge: 0.25 });
        assert!("erdos:1.5".parse::<GraphModel>().is_err());
        assert!("dag:0".parse::<GraphModel>().is_err());
        assert!("grid".parse::<GraphModel>().is_err());
        assert!("chain:2".parse::<GraphModel>().is_err());
        assert_eq!(GraphModel::Erdos { p_edge: 0.25 }.to_string(), "erdos:0.25");
    }

    #[test]
    fn bad_inputs() {
        assert!(gen_graph(0, GraphModel::Chain, 0.5, 1).is_err());
        assert!(gen_graph(3, GraphModel::Chain, 1.0, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let a = gen_graph(8, GraphModel::Erdos { p_edge: 0.3 }, 0.7, 9).unwrap();
        let b = gen_graph(8, GraphModel::Erdos { p_edge: 0.3 }, 0.7, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.sidecar, b.sidecar);
    }

    proptest! {
        #[test]
        fn survival_floor_holds(
            n in 1usize..12,
            which in 0usize..4,
            gamma in 0.05f64..0.99,
            seed in any::<u64>(),
        ) {
            let model = [
                GraphModel::Chain,
                GraphModel::Star,
                GraphModel::Erdos { p_edge: 0.5 },
                GraphModel::Dag { max_indeg: 3 },
            ][which];
            let g = gen_graph(n, model, gamma, seed).unwrap();
            for s in &g.sidecar.survival {
                prop_assert!(s.product >= gamma);
            }
            if let GraphModel::Dag { max_indeg } = model {
                prop_assert!(g.graph.max_in_degree() <= max_indeg);
                prop_assert!(g.graph.edges().iter().all(|e| e.source < e.target));
            }
        }
    }
}
