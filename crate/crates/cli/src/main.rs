use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use oim_core::audit::{gom_check, gom_suite, mle_coverage, CoverageConfig};
use oim_core::cascade::{influence_exact, influence_mc};
use oim_core::estimator::{check_regularity, confidence_radius, estimate_from_log, FitOptions};
use oim_core::experiment::{execute, find_runs, lemma3_from_dir, load_pairs, report, sweep, RunConfig};
use oim_core::feedback::PairLog;
use oim_core::generate::{gen_graph, GraphModel};
use oim_core::graph::{load_graph, write_edge_list, EdgeParams, Graph};
use oim_core::oracle::{brute_force_im, greedy_im, pair_oracle, OracleMode, SpreadEvaluator, DEFAULT_POOL_SAMPLES};
use oim_core::{Error, Result};

/// Worker-count override for the thread pool.
const WORKERS_ENV: &str = "ICUCB_WORKERS";

#[derive(Parser)]
#[command(name = "oim", version, about = "Online influence maximization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random graph whose incoming probabilities respect gamma.
    GenGraph {
        #[arg(long)]
        n: usize,
        /// chain, star, erdos:<p_edge> or dag:<max_indeg>
        #[arg(long)]
        model: String,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Edge-list output; the sidecar goes next to it as <out>.meta.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the spread of a seed set.
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        /// Comma-separated node labels.
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also enumerate live-edge graphs for the exact value.
        #[arg(long)]
        exact: bool,
    },
    /// Fit edge weights from a pairs.csv file.
    Estimate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Graph used for labels; ids are printed without it.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Use [0, 1] as the weight box instead of [0, ln(1/gamma)].
        #[arg(long)]
        unit_box: bool,
    },
    /// Influence maximization on the graph's probabilities or on optimistic
    /// probabilities fitted from a pairs file.
    Solve {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        k: usize,
        /// greedy or brute
        #[arg(long, default_value = "greedy")]
        mode: String,
        /// true, or ucb to fit the pairs file and solve on the upper
        /// confidence weights
        #[arg(long, default_value = "true")]
        p_source: String,
        #[arg(long, required_if_eq("p_source", "ucb"))]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 0.6)]
        gamma: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Live-edge pool size for greedy; exact evaluation when omitted and
        /// the graph is small.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the online learner from a TOML config.
    Run { config: PathBuf },
    /// Run every (T, seed) cell of a config and aggregate the regret.
    Sweep { config: PathBuf },
    /// Summarize a run directory or a sweep directory.
    Report { dir: PathBuf },
    /// Check the smoothness bound on one instance or on a random suite.
    VerifyGom {
        /// Graph holding the true probabilities.
        #[arg(long, requires_all = ["tilde", "seeds"])]
        graph: Option<PathBuf>,
        /// Same edges with the optimistic probabilities.
        #[arg(long)]
        tilde: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<String>,
        /// Random instances when no graph is given.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 6)]
        nodes: usize,
        #[arg(long, default_value_t = 0.6)]
        gamma: f64,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute the norm-sum bound from completed run directories.
    VerifyLemma3 {
        run_dir: PathBuf,
        /// Overrides the graph path stored in each run.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Confidence-ellipsoid coverage of the edge-weight estimate on a star.
    VerifyMle {
        #[arg(long, default_value_t = 1)]
        in_degree: usize,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Pairs per trial; defaults to the regularity threshold.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_graph(path: &Path) -> Result<(Graph, EdgeParams)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read graph file {}: {e}", path.display())))?;
    load_graph(&text)
}

fn parse_seeds(graph: &Graph, list: &str) -> Result<Vec<usize>> {
    let labels: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let mut ids = graph.resolve(&labels)?;
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

fn labels(graph: &Graph, ids: &[usize]) -> Vec<String> {
    ids.iter().map(|&v| graph.label(v).to_string()).collect()
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn dispatch(command: Command) -> Result<Value> {
    match command {
        Command::GenGraph {
            n,
            model,
            gamma,
            seed,
            out,
        } => {
            let model: GraphModel = model.parse()?;
            let g = gen_graph(n, model, gamma, seed)?;
            fs::write(&out, write_edge_list(&g.graph, &g.params))?;
            let mut sidecar = out.clone().into_os_string();
            sidecar.push(".meta.json");
            fs::write(&sidecar, serde_json::to_string_pretty(&g.sidecar)?)?;
            Ok(json!({
                "graph": out,
                "sidecar": PathBuf::from(sidecar),
                "nodes": g.graph.node_count(),
                "edges": g.graph.edge_count(),
                "max_in_degree": g.graph.max_in_degree(),
            }))
        }
        Command::Simulate {
            graph,
            seeds,
            samples,
            seed,
            exact,
        } => {
            let (g, p) = read_graph(&graph)?;
            let s = parse_seeds(&g, &seeds)?;
            let mc = influence_mc(&g, p.p(), &s, samples, seed)?;
            let exact = if exact { Some(influence_exact(&g, p.p(), &s)?) } else { None };
            Ok(json!({ "seeds": labels(&g, &s), "mc": mc, "exact": exact }))
        }
        Command::Estimate {
            pairs,
            gamma,
            delta,
            graph,
            unit_box,
        } => {
            let log: PairLog = load_pairs_file(&pairs)?;
            let g = graph.map(|p| read_graph(&p)).transpose()?.map(|(g, _)| g);
            let rho = confidence_radius(gamma, delta)?;
            let upper = if unit_box { 1.0 } else { (1.0 / gamma).ln() };
            let estimates = estimate_from_log(&log, upper, rho, FitOptions::default())?;
            let nodes: Vec<Value> = estimates
                .iter()
                .map(|e| {
                    let reg = check_regularity(&e.gram, e.dim(), gamma, delta);
                    let node = g.as_ref().map_or(e.node.to_string(), |g| g.label(e.node).to_string());
                    let sources: Option<Vec<String>> = g.as_ref().map(|g| {
                        g.incoming(e.node)
                            .iter()
                            .map(|&ed| g.label(g.edge(ed).source).to_string())
                            .collect()
                    });
                    json!({
                        "node": node,
                        "sources": sources,
                        "pairs": e.pair_count,
                        "theta_hat": e.theta_hat,
                        "p_hat": e.p_hat(),
                        "lambda_min": reg.lambda_min,
                        "regularity_threshold": reg.threshold,
                        "regularity_ok": reg.ok,
                    })
                })
                .collect();
            Ok(json!({ "rho": rho, "upper": upper, "nodes": nodes }))
        }
        Command::Solve {
            graph,
            k,
            mode,
            p_source,
            pairs,
            gamma,
            delta,
            samples,
            seed,
        } => {
            let (g, p) = read_graph(&graph)?;
            let eval = match samples {
                Some(samples) => SpreadEvaluator::MonteCarlo { samples, seed },
                None => SpreadEvaluator::auto(&g, DEFAULT_POOL_SAMPLES, seed),
            };
            match p_source.as_str() {
                "true" => {
                    let choice = match mode.as_str() {
                        "greedy" => greedy_im(&g, p.p(), k, eval)?,
                        "brute" => brute_force_im(&g, p.p(), k)?,
                        other => return Err(Error::Config(format!("mode must be greedy or brute, got {other:?}"))),
                    };
                    Ok(json!({ "seeds": labels(&g, &choice.seeds), "sigma": choice.sigma, "mode": mode }))
                }
                "ucb" => {
                    let oracle_mode = match mode.as_str() {
                        "greedy" => OracleMode::GreedyBox,
                        "brute" => OracleMode::BruteBox,
                        other => return Err(Error::Config(format!("mode must be greedy or brute, got {other:?}"))),
                    };
                    let log = load_pairs_file(pairs.as_deref().expect("required by clap"))?;
                    let rho = confidence_radius(gamma, delta)?;
                    let upper = (1.0 / gamma).ln();
                    let mut estimates = vec![None; g.node_count()];
                    for est in estimate_from_log(&log, upper, rho, FitOptions::default())? {
                        let node = est.node;
                        if node >= g.node_count() {
                            return Err(Error::Domain(format!("pairs file mentions node {node} outside the graph")));
                        }
                        estimates[node] = Some(est);
                    }
                    let out = pair_oracle(&g, k, &estimates, rho, upper, oracle_mode, eval)?;
                    Ok(json!({
                        "seeds": labels(&g, &out.seeds),
                        "sigma": out.sigma_tilde,
                        "mode": out.mode,
                        "p_tilde": out.p_tilde,
                        "alpha": out.alpha,
                        "beta": out.beta,
                    }))
                }
                other => Err(Error::Config(format!("p_source must be true or ucb, got {other:?}"))),
            }
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = execute(&cfg)?;
            Ok(json!({ "output_dir": out.dir, "meta": out.meta }))
        }
        Command::Sweep { config } => {
            let cfg = RunConfig::load(&config)?;
            let rep = sweep(&cfg)?;
            Ok(json!({ "output_dir": cfg.output_dir, "rows": rep.rows, "failures": rep.failures }))
        }
        Command::Report { dir } => {
            let blocks = report(&dir)?;
            let text: Vec<&str> = blocks.iter().map(|b| b.text.as_str()).collect();
            Ok(Value::String(text.join("\n")))
        }
        Command::VerifyGom {
            graph,
            tilde,
            seeds,
            instances,
            nodes,
            gamma,
            samples,
            seed,
        } => match (graph, tilde, seeds) {
            (Some(graph), Some(tilde), Some(seeds)) => {
                let (g, p_star) = read_graph(&graph)?;
                let (gt, p_tilde) = read_graph(&tilde)?;
                if gt.edges() != g.edges() || gt.labels() != g.labels() {
                    return Err(Error::Config("the two graphs must have identical nodes and edges".into()));
                }
                let s = parse_seeds(&g, &seeds)?;
                let rep = gom_check(&g, &s, p_tilde.theta(), p_star.theta(), samples, seed)?;
                Ok(json!({ "seeds": labels(&g, &s), "report": rep }))
            }
            _ => {
                let suite = gom_suite(instances, nodes, gamma, samples, seed)?;
                let held = suite.iter().filter(|i| i.report.holds).count();
                Ok(json!({ "instances": suite.len(), "held": held, "results": suite }))
            }
        },
        Command::VerifyLemma3 { run_dir, graph } => {
            let mut out = Vec::new();
            for dir in find_runs(&run_dir)? {
                let rep = lemma3_from_dir(&dir, graph.as_deref())?;
                out.push(json!({ "run": dir, "report": rep }));
            }
            Ok(Value::Array(out))
        }
        Command::VerifyMle {
            in_degree,
            gamma,
            delta,
            trials,
            pairs,
            seed,
        } => {
            let rep = mle_coverage(&CoverageConfig {
                in_degree,
                gamma,
                delta,
                trials,
                pairs,
                master_seed: seed,
            })?;
            Ok(serde_json::to_value(rep)?)
        }
    }
}

fn load_pairs_file(path: &Path) -> Result<PairLog> {
    if path.is_dir() {
        return load_pairs(path);
    }
    let file = fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot read pairs file {}: {e}", path.display())))?;
    PairLog::read_csv(file)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_workers().and_then(|_| dispatch(cli.command));
    match result {
        Ok(Value::String(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "kind": e.kind() }));
            ExitCode::FAILURE
        }
    }
}
