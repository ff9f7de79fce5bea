//! Request generation, experiment orchestration, and report emission.
//!
//! One experiment row runs the full pipeline for one seed: metric -> HST ->
//! (optional) weighted HST -> fractional serve -> certificates -> rounding ->
//! offline optima -> baselines. Rows are a pure function of the configuration
//! and the seed; sub-seeds for the embedding, the request stream, and the
//! rounding streams are split off the row seed deterministically.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{double_coverage, greedy_nearest, work_function};
use crate::embed::{frt_embed, reduce_depth};
use crate::frac::{serve_sequence, FractionalState, Mode, SequenceOutcome, ServeOptions};
use crate::lp::certify_run;
use crate::metric::{FiniteMetric, MetricKind};
use crate::offline::{opt_min_cost_flow, DistMatrix};
use crate::rounding::run_rounded;
use crate::tree::HstShape;

/// Error with the pipeline stage that produced it.
#[derive(Debug, Clone)]
pub struct BenchError {
    pub stage: &'static str,
    pub message: String,
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.message)
    }
}

impl std::error::Error for BenchError {}

fn stage<E: fmt::Display>(name: &'static str) -> impl Fn(E) -> BenchError {
    move |e| BenchError {
        stage: name,
        message: e.to_string(),
    }
}

/// Request stream families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RequestKind {
    /// Cycle k+1 fixed points, always requesting the one a lazy reference
    /// leaves uncovered.
    RoundRobinLowerBound,
    UniformRandom,
    Zipf {
        s: f64,
    },
    /// Always request the point farthest from a greedy reference's servers.
    AdversarialGreedy,
}

/// Deterministic request stream over points `0..n`.
///
/// The round-robin and adversarial streams assume the canonical initial
/// configuration `0..k`.
pub fn generate_requests(
    kind: &RequestKind,
    metric: &FiniteMetric,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Vec<usize>, BenchError> {
    let n = metric.n();
    if k >= n {
        return Err(BenchError {
            stage: "requests",
            message: format!("k = {k} >= n = {n}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(m);
    match kind {
        RequestKind::RoundRobinLowerBound => {
            // Lazy reference over the k+1 fixed points 0..=k; always request
            // the unique uncovered one and evict the stalest cover.
            let mut covered: Vec<usize> = (0..k).collect();
            for _ in 0..m {
                let uncovered = (0..=k).find(|p| !covered.contains(p)).unwrap();
                out.push(uncovered);
                covered.remove(0);
                covered.push(uncovered);
            }
        }
        RequestKind::UniformRandom => {
            for _ in 0..m {
                out.push(rng.gen_range(0..n));
            }
        }
        RequestKind::Zipf { s } => {
            if !s.is_finite() || *s <= 0.0 {
                return Err(BenchError {
                    stage: "requests",
                    message: format!("zipf exponent {s} must be positive"),
                });
            }
            let weights: Vec<f64> = (1..=n).map(|r| 1.0 / (r as f64).powf(*s)).collect();
            let total: f64 = weights.iter().sum();
            for _ in 0..m {
                let mut x = rng.gen::<f64>() * total;
                let mut pick = n - 1;
                for (i, w) in weights.iter().enumerate() {
                    if x < *w {
                        pick = i;
                        break;
                    }
                    x -= w;
                }
                out.push(pick);
            }
        }
        RequestKind::AdversarialGreedy => {
            let mut positions: Vec<usize> = (0..k).collect();
            for _ in 0..m {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = positions
                            .iter()
                            .map(|&p| metric.dist(a, p))
                            .fold(f64::MAX, f64::min);
                        let db = positions
                            .iter()
                            .map(|&p| metric.dist(b, p))
                            .fold(f64::MAX, f64::min);
                        da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                    })
                    .unwrap();
                out.push(far);
                let (nearest, _) = positions
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| (i, metric.dist(p, far)))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                    .unwrap();
                positions[nearest] = far;
            }
        }
    }
    Ok(out)
}

/// Configuration of one experiment family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub metric_kind: MetricKind,
    pub n: usize,
    pub k: usize,
    pub sigma: f64,
    /// Run depth reduction and serve in weighted mode.
    pub reduce: bool,
    pub request_kind: RequestKind,
    pub m: usize,
    pub seeds: Vec<u64>,
    /// Independent rounding streams per row.
    pub rounding_seeds: usize,
    /// Skip the exponential baselines when the DP guard would trip.
    pub baselines: bool,
}

/// One row of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub sigma: f64,
    pub mode: Mode,
    pub depth: usize,
    pub m: usize,
    pub frac_cost_lp: f64,
    pub frac_cost_receiver: f64,
    pub dual_serve: f64,
    pub dual_gamma: f64,
    pub achieved_ratio: f64,
    pub cert_bound: f64,
    pub cert_pass: bool,
    pub bound_h: Option<f64>,
    pub primal_violations: usize,
    pub dual_violations: usize,
    pub max_tightness_residual: f64,
    pub opt_tree: f64,
    pub opt_original: f64,
    pub rounded_tree_mean: f64,
    pub rounded_orig_mean: f64,
    pub rounded_orig_se: f64,
    /// frac_cost_lp / opt_tree, when the optimum is positive.
    pub ratio_frac_vs_opt_tree: Option<f64>,
    /// rounded_orig_mean / opt_original, when the optimum is positive.
    pub ratio_rounded_vs_opt_orig: Option<f64>,
    /// Worst per-step mean rounded movement over fractional transport.
    pub c_probe: Option<f64>,
    pub dc_cost: Option<f64>,
    pub wfa_cost: Option<f64>,
    pub greedy_cost: f64,
}

/// A finished experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<RunRow>,
    pub all_certificates_pass: bool,
    pub violation_count: usize,
}

fn subseed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    rng.gen()
}

/// Runs one row of the experiment.
pub fn run_single(cfg: &ExperimentConfig, seed: u64) -> Result<RunRow, BenchError> {
    let metric = FiniteMetric::generate(&cfg.metric_kind, cfg.n, subseed(seed, 1))
        .map_err(stage("metric"))?;
    let exact = frt_embed(&metric, cfg.sigma, subseed(seed, 2)).map_err(stage("embed"))?;
    let (shape, mode, depth): (HstShape, Mode, usize) = if cfg.reduce {
        let (reduced, report) = reduce_depth(&exact).map_err(stage("reduce"))?;
        (reduced.into_shape(), Mode::WeightedHst, report.output_depth)
    } else {
        let d = exact.shape().leaf_depth();
        (exact.into_shape(), Mode::ExactHst, d)
    };
    let requests = generate_requests(&cfg.request_kind, &metric, cfg.k, cfg.m, subseed(seed, 3))?;
    let initial: Vec<usize> = (0..cfg.k).collect();

    let mut state = FractionalState::init(&shape, mode, cfg.k, &initial).map_err(stage("serve"))?;
    let outcome: SequenceOutcome =
        serve_sequence(&shape, &mut state, &requests, &ServeOptions::default())
            .map_err(stage("serve"))?;
    let cert = certify_run(&shape, &state, &outcome, &requests).map_err(stage("certify"))?;

    let tree_dist = DistMatrix::from_tree(&shape);
    let metric_dist = DistMatrix::from_metric(&metric);
    let opt_tree = opt_min_cost_flow(&tree_dist, &initial, &requests)
        .map_err(stage("opt"))?
        .cost;
    let opt_original = opt_min_cost_flow(&metric_dist, &initial, &requests)
        .map_err(stage("opt"))?
        .cost;

    let mut rounded_tree = Vec::new();
    let mut rounded_orig = Vec::new();
    let mut step_cost_sums = vec![0.0; requests.len()];
    let mut step_frac = vec![0.0; requests.len()];
    for i in 0..cfg.rounding_seeds.max(1) {
        let run = run_rounded(
            &shape,
            &outcome.u_history,
            &requests,
            subseed(seed, 100 + i as u64),
            Some(&metric_dist),
        )
        .map_err(stage("round"))?;
        for (t, step) in run.steps.iter().enumerate() {
            step_cost_sums[t] += step.cost_tree;
            step_frac[t] = step.fractional_cost;
        }
        rounded_tree.push(run.total_tree);
        rounded_orig.push(run.total_metric.unwrap());
    }
    // Worst per-step ratio of mean rounded movement to fractional transport.
    let streams = cfg.rounding_seeds.max(1) as f64;
    let c_probe = step_frac
        .iter()
        .zip(&step_cost_sums)
        .filter(|(f, _)| **f > 1e-9)
        .map(|(f, c)| c / streams / f)
        .fold(None::<f64>, |acc, r| Some(acc.map_or(r, |a| a.max(r))));
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let rounded_tree_mean = mean(&rounded_tree);
    let rounded_orig_mean = mean(&rounded_orig);
    let var = rounded_orig
        .iter()
        .map(|x| (x - rounded_orig_mean).powi(2))
        .sum::<f64>()
        / rounded_orig.len().max(2).saturating_sub(1) as f64;
    let rounded_orig_se = (var / rounded_orig.len() as f64).sqrt();

    let greedy = greedy_nearest(&metric_dist, &initial, &requests);
    let dc_cost = if cfg.baselines {
        Some(
            double_coverage(&shape, &initial, &requests)
                .map_err(stage("baseline"))?
                .total_cost,
        )
    } else {
        None
    };
    let wfa_cost = if cfg.baselines {
        work_function(&metric_dist, &initial, &requests)
            .ok()
            .map(|r| r.total_cost)
    } else {
        None
    };

    Ok(RunRow {
        seed,
        n: cfg.n,
        k: cfg.k,
        sigma: cfg.sigma,
        mode,
        depth,
        m: cfg.m,
        frac_cost_lp: outcome.total_primal_lp,
        frac_cost_receiver: outcome.total_primal_receiver,
        dual_serve: cert.dual.serve_part,
        dual_gamma: cert.dual.gamma_part,
        achieved_ratio: cert.cert.achieved,
        cert_bound: cert.cert.bound,
        cert_pass: cert.cert.pass,
        bound_h: cert.cert.bound_h,
        primal_violations: cert.primal_violations.len(),
        dual_violations: cert.dual_check.violations.len(),
        max_tightness_residual: cert.dual_check.max_tightness_residual,
        opt_tree,
        opt_original,
        rounded_tree_mean,
        rounded_orig_mean,
        rounded_orig_se,
        ratio_frac_vs_opt_tree: (opt_tree > 0.0).then(|| outcome.total_primal_lp / opt_tree),
        ratio_rounded_vs_opt_orig: (opt_original > 0.0).then(|| rounded_orig_mean / opt_original),
        c_probe,
        dc_cost,
        wfa_cost,
        greedy_cost: greedy.total_cost,
    })
}

/// Runs every seed of the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, BenchError> {
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        rows.push(run_single(cfg, seed)?);
    }
    let all_certificates_pass = rows.iter().all(|r| r.cert_pass);
    let violation_count = rows
        .iter()
        .map(|r| r.primal_violations + r.dual_violations)
        .sum();
    Ok(ExperimentReport {
        config: cfg.clone(),
        rows,
        all_certificates_pass,
        violation_count,
    })
}

/// Stable CSV header for report rows (documented in the README).
pub const CSV_HEADER: &str = "seed,n,k,sigma,mode,depth,m,frac_cost_lp,frac_cost_receiver,\
dual_serve,dual_gamma,achieved_ratio,cert_bound,cert_pass,primal_violations,dual_violations,\
max_tightness_residual,opt_tree,opt_original,rounded_tree_mean,rounded_orig_mean,\
rounded_orig_se,ratio_frac_vs_opt_tree,ratio_rounded_vs_opt_orig,c_probe,dc_cost,wfa_cost,greedy_cost";

fn opt_col(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Renders rows in the stable column order.
pub fn report_to_csv(report: &ExperimentReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.seed,
            r.n,
            r.k,
            r.sigma,
            r.mode,
            r.depth,
            r.m,
            r.frac_cost_lp,
            r.frac_cost_receiver,
            r.dual_serve,
            r.dual_gamma,
            r.achieved_ratio,
            r.cert_bound,
            r.cert_pass,
            r.primal_violations,
            r.dual_violations,
            r.max_tightness_residual,
            r.opt_tree,
            r.opt_original,
            r.rounded_tree_mean,
            r.rounded_orig_mean,
            r.rounded_orig_se,
            opt_col(r.ratio_frac_vs_opt_tree),
            opt_col(r.ratio_rounded_vs_opt_orig),
            opt_col(r.c_probe),
            opt_col(r.dc_cost),
            opt_col(r.wfa_cost),
            r.greedy_cost,
        ));
    }
    out
}
