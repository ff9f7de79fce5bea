//! `kserver`: command-line harness for the fractional k-server pipeline.
//!
//! Verbs: `embed`, `reduce`, `serve`, `certify`, `round`, `opt`, `baseline`,
//! `bench`. The exit code is nonzero whenever a stage fails or a certificate
//! does not pass.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use kserver_core::baselines::{double_coverage, greedy_nearest, work_function};
use kserver_core::bench::{report_to_csv, run_experiment, ExperimentConfig};
use kserver_core::embed::{frt_embed, reduce_depth};
use kserver_core::frac::{serve_sequence, FractionalState, Mode, ServeOptions};
use kserver_core::lp::certify_run;
use kserver_core::metric::FiniteMetric;
use kserver_core::offline::{opt_brute_force, opt_min_cost_flow, DistMatrix, OfflineError};
use kserver_core::rounding::run_rounded;
use kserver_core::tree::{Hst, HstShape, WeightedHst};

#[derive(Parser)]
#[command(
    name = "kserver",
    about = "fractional k-server experiment harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Weighted,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Exact => Mode::ExactHst,
            ModeArg::Weighted => Mode::WeightedHst,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineAlgo {
    Dc,
    Wfa,
    Greedy,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a metric into an exact HST.
    Embed {
        #[arg(long)]
        metric: PathBuf,
        #[arg(long, default_value_t = 8.0)]
        sigma: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduce an exact HST to a weighted HST of logarithmic depth.
    Reduce {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fractional server over a request file.
    Serve {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        k: usize,
        /// Comma-separated leaf indices of the initial configuration.
        #[arg(long)]
        init: String,
        #[arg(long)]
        requests: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        mode: ModeArg,
        /// Optional metric file for original-space costs downstream.
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        substeps: usize,
    },
    /// Check feasibility and the ratio certificate of a recorded trace.
    Certify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Round a recorded fractional trace over independent seeds.
    Round {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 200)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact offline optimum for a request file.
    Opt {
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        init: String,
        #[arg(long)]
        requests: PathBuf,
    },
    /// Run a classical baseline.
    Baseline {
        #[arg(long, value_enum)]
        algo: BaselineAlgo,
        #[arg(long)]
        metric: Option<PathBuf>,
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        init: String,
        #[arg(long)]
        requests: PathBuf,
    },
    /// Run a full experiment family from a JSON configuration.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
}

/// Everything needed to re-check and extend a recorded run.
#[derive(Serialize, Deserialize)]
struct TraceFile {
    tree: String,
    labels: Vec<String>,
    metric: Option<String>,
    requests: Vec<usize>,
    state: FractionalState,
    outcome: kserver_core::frac::SequenceOutcome,
}

fn parse_init(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad leaf index '{t}': {e}"))
        })
        .collect()
}

fn load_metric(path: &PathBuf) -> Result<FiniteMetric, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    FiniteMetric::from_text(&text).map_err(|e| e.to_string())
}

fn load_tree(path: &PathBuf) -> Result<(HstShape, Vec<String>), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    HstShape::from_text(&text).map_err(|e| e.to_string())
}

fn load_requests(path: &PathBuf, labels: &[String]) -> Result<Vec<usize>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let tok = line.trim();
        if tok.is_empty() || tok.starts_with('#') {
            continue;
        }
        if let Ok(idx) = tok.parse::<usize>() {
            out.push(idx);
        } else if let Some(idx) = labels.iter().position(|l| l == tok) {
            out.push(idx);
        } else {
            return Err(format!("line {}: unknown leaf '{tok}'", lineno + 1));
        }
    }
    Ok(out)
}

fn run() -> Result<bool, String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Embed {
            metric,
            sigma,
            seed,
            out,
        } => {
            let m = load_metric(&metric)?;
            let tree = frt_embed(&m, sigma, seed).map_err(|e| e.to_string())?;
            fs::write(&out, tree.shape().to_text(m.labels())).map_err(|e| e.to_string())?;
            println!(
                "embedded {} points into an HST with {} nodes, depth {}",
                m.n(),
                tree.shape().n_nodes(),
                tree.shape().leaf_depth()
            );
            Ok(true)
        }
        Command::Reduce { tree, out } => {
            let (shape, labels) = load_tree(&tree)?;
            let exact = Hst::new(shape).map_err(|e| e.to_string())?;
            let (reduced, report) = reduce_depth(&exact).map_err(|e| e.to_string())?;
            fs::write(&out, reduced.shape().to_text(&labels)).map_err(|e| e.to_string())?;
            println!(
                "depth {} -> {} (budget {}), worst predicted distortion {:.4}",
                report.input_depth, report.output_depth, report.depth_budget, report.max_distortion
            );
            Ok(true)
        }
        Command::Serve {
            tree,
            k,
            init,
            requests,
            mode,
            metric,
            out,
            substeps,
        } => {
            let (shape, labels) = load_tree(&tree)?;
            let mode: Mode = mode.into();
            match mode {
                Mode::ExactHst => {
                    Hst::new(shape.clone()).map_err(|e| e.to_string())?;
                }
                Mode::WeightedHst => {
                    WeightedHst::new(shape.clone()).map_err(|e| e.to_string())?;
                }
            }
            let init = parse_init(&init)?;
            if init.len() != k {
                return Err(format!("--init lists {} leaves but k = {k}", init.len()));
            }
            let reqs = load_requests(&requests, &labels)?;
            let mut state =
                FractionalState::init(&shape, mode, k, &init).map_err(|e| e.to_string())?;
            let outcome = serve_sequence(&shape, &mut state, &reqs, &ServeOptions { substeps })
                .map_err(|e| e.to_string())?;
            println!(
                "served {} requests: primal {:.6}, dual {:.6}, residuals tight {:.2e} mass {:.2e}",
                reqs.len(),
                outcome.total_primal_lp,
                outcome.total_dual_profit,
                outcome.residuals.tightness,
                outcome.residuals.mass,
            );
            let metric_text = match metric {
                Some(p) => {
                    Some(fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?)
                }
                None => None,
            };
            let trace = TraceFile {
                tree: shape.to_text(&labels),
                labels,
                metric: metric_text,
                requests: reqs,
                state,
                outcome,
            };
            fs::write(
                &out,
                serde_json::to_string_pretty(&trace).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            Ok(true)
        }
        Command::Certify { trace } => {
            let text = fs::read_to_string(&trace).map_err(|e| e.to_string())?;
            let tf: TraceFile = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let (shape, _) = HstShape::from_text(&tf.tree).map_err(|e| e.to_string())?;
            let cert = certify_run(&shape, &tf.state, &tf.outcome, &tf.requests)
                .map_err(|e| e.to_string())?;
            let report = serde_json::json!({
                "primal_lp": cert.primal_lp,
                "dual_serve": cert.dual.serve_part,
                "dual_gamma": cert.dual.gamma_part,
                "achieved_ratio": cert.cert.achieved,
                "bound": cert.cert.bound,
                "bound_h": cert.cert.bound_h,
                "pass": cert.cert.pass,
                "primal_violations": cert.primal_violations,
                "dual_violations": cert.dual_check.violations,
                "max_tightness_residual": cert.dual_check.max_tightness_residual,
                "strict_step_residual": cert.dual_check.strict_step_residual,
            });
            println!("{}", serde_json::to_string_pretty(&report).unwrap());
            Ok(cert.cert.pass
                && cert.primal_violations.is_empty()
                && cert.dual_check.violations.is_empty())
        }
        Command::Round { trace, seeds, out } => {
            let text = fs::read_to_string(&trace).map_err(|e| e.to_string())?;
            let tf: TraceFile = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let (shape, _) = HstShape::from_text(&tf.tree).map_err(|e| e.to_string())?;
            let metric = match &tf.metric {
                Some(mt) => Some(FiniteMetric::from_text(mt).map_err(|e| e.to_string())?),
                None => None,
            };
            let dist = metric.as_ref().map(DistMatrix::from_metric);
            let mut csv = String::from("seed,cost_tree,cost_metric\n");
            for seed in 0..seeds as u64 {
                let run = run_rounded(
                    &shape,
                    &tf.outcome.u_history,
                    &tf.requests,
                    seed,
                    dist.as_ref(),
                )
                .map_err(|e| e.to_string())?;
                csv.push_str(&format!(
                    "{seed},{},{}\n",
                    run.total_tree,
                    run.total_metric.map(|c| c.to_string()).unwrap_or_default()
                ));
            }
            fs::write(&out, csv).map_err(|e| e.to_string())?;
            println!("rounded {seeds} streams -> {}", out.display());
            Ok(true)
        }
        Command::Opt {
            metric,
            tree,
            k,
            init,
            requests,
        } => {
            let init = parse_init(&init)?;
            if init.len() != k {
                return Err(format!("--init lists {} leaves but k = {k}", init.len()));
            }
            let (dist, labels) = dist_from_args(&metric, &tree)?;
            let reqs = load_requests(&requests, &labels)?;
            let sol = match opt_brute_force(&dist, &init, &reqs) {
                Ok(sol) => sol,
                Err(OfflineError::TooLarge { .. }) => {
                    opt_min_cost_flow(&dist, &init, &reqs).map_err(|e| e.to_string())?
                }
                Err(e) => return Err(e.to_string()),
            };
            println!("opt cost {:.6}", sol.cost);
            Ok(true)
        }
        Command::Baseline {
            algo,
            metric,
            tree,
            k,
            init,
            requests,
        } => {
            let init = parse_init(&init)?;
            if init.len() != k {
                return Err(format!("--init lists {} leaves but k = {k}", init.len()));
            }
            match algo {
                BaselineAlgo::Dc => {
                    let tree = tree.ok_or_else(|| "double coverage needs --tree".to_string())?;
                    let (shape, labels) = load_tree(&tree)?;
                    let reqs = load_requests(&requests, &labels)?;
                    let run = double_coverage(&shape, &init, &reqs).map_err(|e| e.to_string())?;
                    println!("dc cost {:.6}", run.total_cost);
                }
                BaselineAlgo::Wfa => {
                    let (dist, labels) = dist_from_args(&metric, &tree)?;
                    let reqs = load_requests(&requests, &labels)?;
                    let run = work_function(&dist, &init, &reqs).map_err(|e| e.to_string())?;
                    println!("wfa cost {:.6}", run.total_cost);
                }
                BaselineAlgo::Greedy => {
                    let (dist, labels) = dist_from_args(&metric, &tree)?;
                    let reqs = load_requests(&requests, &labels)?;
                    let run = greedy_nearest(&dist, &init, &reqs);
                    println!("greedy cost {:.6}", run.total_cost);
                }
            }
            Ok(true)
        }
        Command::Bench {
            config,
            out_csv,
            out_json,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| e.to_string())?;
            let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
            if let Some(p) = out_csv {
                fs::write(&p, report_to_csv(&report)).map_err(|e| e.to_string())?;
            }
            if let Some(p) = out_json {
                fs::write(
                    &p,
                    serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?,
                )
                .map_err(|e| e.to_string())?;
            }
            println!(
                "{} rows, certificates pass: {}, violations: {}",
                report.rows.len(),
                report.all_certificates_pass,
                report.violation_count
            );
            Ok(report.all_certificates_pass && report.violation_count == 0)
        }
    }
}

fn dist_from_args(
    metric: &Option<PathBuf>,
    tree: &Option<PathBuf>,
) -> Result<(DistMatrix, Vec<String>), String> {
    match (metric, tree) {
        (Some(m), _) => {
            let metric = load_metric(m)?;
            Ok((DistMatrix::from_metric(&metric), metric.labels().to_vec()))
        }
        (None, Some(t)) => {
            let (shape, labels) = load_tree(t)?;
            Ok((DistMatrix::from_tree(&shape), labels))
        }
        (None, None) => Err("need --metric or --tree".into()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
