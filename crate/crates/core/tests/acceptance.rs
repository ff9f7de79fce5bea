//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kserver_core::baselines::{double_coverage, work_function};
use kserver_core::bench::{generate_requests, run_experiment, ExperimentConfig, RequestKind};
use kserver_core::embed::{frt_embed, mean_embedding_stretch, pairwise_distortion, reduce_depth};
use kserver_core::frac::{serve_sequence, FractionalState, Mode, ResidualStats, ServeOptions};
use kserver_core::lp::{certify_run, ratio_bound, RunCertificate};
use kserver_core::metric::{FiniteMetric, MetricKind};
use kserver_core::offline::{opt_brute_force, opt_min_cost_flow, DistMatrix};
use kserver_core::rounding::RoundingStream;
use kserver_core::tree::{Hst, HstShape, WeightedHst};

fn metric_kind(i: usize, n: usize) -> MetricKind {
    match i % 5 {
        0 => MetricKind::Uniform,
        1 => MetricKind::RandomEuclidean { dim: 2 },
        2 => MetricKind::Line { spacing: 1.0 },
        3 => MetricKind::Star {
            arms: (1..n).map(|a| 1.0 + (a % 3) as f64).collect(),
        },
        _ => MetricKind::RandomTree,
    }
}

fn request_kind(i: usize) -> RequestKind {
    match i % 4 {
        0 => RequestKind::RoundRobinLowerBound,
        1 => RequestKind::UniformRandom,
        2 => RequestKind::Zipf { s: 1.1 },
        _ => RequestKind::AdversarialGreedy,
    }
}

/// A weighted HST with the given depth and leaf count, level ratios >= sigma.
fn random_weighted_hst(ell: usize, sigma: f64, seed: u64) -> WeightedHst {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::new();
    for _ in 1..ell {
        ratios.push(sigma * (1.0 + rng.gen::<f64>()));
    }
    let mut level_len = vec![1.0_f64];
    for r in ratios.iter().rev() {
        let last = *level_len.last().unwrap();
        level_len.push(last * r);
    }
    level_len.reverse();
    let mut parents = vec![None];
    let mut edges = vec![0.0];
    let mut leaf_point = vec![None];
    let mut frontier = vec![0usize];
    for depth in 1..=ell {
        let mut next = Vec::new();
        for (fi, &v) in frontier.iter().enumerate() {
            // Keep at least one branching node per level so the tree grows,
            // but stay small enough for desk-scale serving.
            let kids = if frontier.len() >= 12 {
                1
            } else if fi == 0 {
                2
            } else {
                1 + rng.gen_range(0..2)
            };
            for _ in 0..kids {
                let id = parents.len();
                parents.push(Some(v));
                edges.push(level_len[depth - 1]);
                leaf_point.push(None);
                next.push(id);
            }
        }
        frontier = next;
    }
    for (point, &v) in frontier.iter().enumerate() {
        leaf_point[v] = Some(point);
    }
    WeightedHst::new(HstShape::from_parents(parents, edges, leaf_point, sigma).unwrap()).unwrap()
}

struct FeasibilityRow {
    certificate: RunCertificate,
    residuals: ResidualStats,
}

struct FeasibilitySuite {
    rows: Vec<FeasibilityRow>,
    runtime: std::time::Duration,
}

static FEASIBILITY: OnceLock<FeasibilitySuite> = OnceLock::new();

/// Criterion 1's instance family, shared with criterion 5.
fn feasibility_suite() -> &'static FeasibilitySuite {
    FEASIBILITY.get_or_init(|| {
        let start = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xFEA51B17);
        let mut rows = Vec::new();
        for i in 0..104usize {
            let n = rng.gen_range(3..=16);
            let k = rng.gen_range(1..n);
            let m = rng.gen_range(1..=50);
            let weighted = i % 2 == 1;
            let metric = FiniteMetric::generate(&metric_kind(i, n), n, rng.gen()).unwrap();
            let exact = frt_embed(&metric, 8.0, rng.gen()).unwrap();
            let (shape, mode) = if weighted {
                let (reduced, _) = reduce_depth(&exact).unwrap();
                (reduced.into_shape(), Mode::WeightedHst)
            } else {
                (exact.into_shape(), Mode::ExactHst)
            };
            let requests = generate_requests(&request_kind(i), &metric, k, m, rng.gen()).unwrap();
            let initial: Vec<usize> = (0..k).collect();
            let mut state = FractionalState::init(&shape, mode, k, &initial).unwrap();
            let outcome =
                serve_sequence(&shape, &mut state, &requests, &ServeOptions::default()).unwrap();
            let certificate = certify_run(&shape, &state, &outcome, &requests).unwrap();
            rows.push(FeasibilityRow {
                certificate,
                residuals: outcome.residuals,
            });
        }
        FeasibilitySuite {
            rows,
            runtime: start.elapsed(),
        }
    })
}

#[test]
fn criterion_1_lp_feasibility() {
    let suite = feasibility_suite();
    let primal: usize = suite
        .rows
        .iter()
        .map(|r| r.certificate.primal_violations.len())
        .sum();
    let dual: usize = suite
        .rows
        .iter()
        .map(|r| r.certificate.dual_check.violations.len())
        .sum();
    let pass = primal == 0 && dual == 0 && suite.runtime.as_secs() < 60;
    println!(
        "criterion 1 (LP feasibility, {} instances): {} [primal violations {primal}, dual violations {dual}, {:.1}s]",
        suite.rows.len(),
        if pass { "PASS" } else { "FAIL" },
        suite.runtime.as_secs_f64()
    );
    assert_eq!(primal, 0, "primal violations found");
    assert_eq!(dual, 0, "dual violations found");
    assert!(suite.runtime.as_secs() < 60, "runtime {:?}", suite.runtime);
}

#[test]
fn criterion_2_exact_ratio_certificate() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x37C0FFEE);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for i in 0..51usize {
        let k = 2 + i % 3;
        let n = k + 1;
        let m = 8 + rng.gen_range(0..25);
        let metric = FiniteMetric::generate(&metric_kind(i, n), n, rng.gen()).unwrap();
        let exact = frt_embed(&metric, 8.0, rng.gen()).unwrap();
        let shape = exact.shape();
        let requests = generate_requests(&request_kind(i), &metric, k, m, rng.gen()).unwrap();
        let initial: Vec<usize> = (0..k).collect();
        let mut state = FractionalState::init(shape, Mode::ExactHst, k, &initial).unwrap();
        let outcome =
            serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
        let cert = certify_run(shape, &state, &outcome, &requests).unwrap();
        assert!(
            cert.cert.pass,
            "instance {i} (k={k}): P={} D={} ratio {} exceeds {}; full row: {:?}",
            cert.primal_lp, cert.dual.serve_part, cert.cert.achieved, cert.cert.bound, cert.cert
        );
        if cert.cert.dual > 0.0 {
            worst = worst.max(cert.cert.achieved / cert.cert.bound);
        }
        count += 1;
    }
    println!(
        "criterion 2 (15 ln^2(1+k) certificate, {count} n=k+1 instances): PASS [worst ratio/bound {:.3}]",
        worst
    );
}

#[test]
fn criterion_3_weighted_ratio_certificate() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4E11_AB1E);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for i in 0..52usize {
        let ell = 2 + i % 4;
        let tree = random_weighted_hst(ell, 8.0, rng.gen());
        let shape = tree.shape();
        let n = shape.n_leaves();
        if n < 2 {
            continue;
        }
        let k = rng.gen_range(1..n);
        let m = 6 + rng.gen_range(0..20);
        let requests: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let initial: Vec<usize> = (0..k).collect();
        let mut state = FractionalState::init(shape, Mode::WeightedHst, k, &initial).unwrap();
        let outcome =
            serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
        let cert = certify_run(shape, &state, &outcome, &requests).unwrap();
        assert!(
            cert.cert.pass,
            "instance {i} (ell={ell}, k={k}, n={n}): ratio {} exceeds 4*ell*ln(1+k) = {}",
            cert.cert.achieved, cert.cert.bound
        );
        if cert.cert.dual > 0.0 {
            worst = worst.max(cert.cert.achieved / cert.cert.bound);
        }
        count += 1;
    }
    println!(
        "criterion 3 (4 ell ln(1+k) certificate, {count} weighted instances): PASS [worst ratio/bound {:.3}]",
        worst
    );
}

#[test]
fn criterion_4_oracle_equivalence() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E5);
    let mut worst: f64 = 0.0;
    for i in 0..200usize {
        let n = rng.gen_range(4..=7);
        let k = rng.gen_range(1..=3.min(n - 1));
        let m = rng.gen_range(2..=8);
        let metric = FiniteMetric::generate(&metric_kind(i, n), n, rng.gen()).unwrap();
        let dist = DistMatrix::from_metric(&metric);
        let initial: Vec<usize> = (0..k).collect();
        let requests: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let dp = opt_brute_force(&dist, &initial, &requests).unwrap();
        let flow = opt_min_cost_flow(&dist, &initial, &requests).unwrap();
        let rel = (dp.cost - flow.cost).abs() / (1.0 + dp.cost);
        worst = worst.max(rel);
        assert!(
            rel <= 1e-9,
            "instance {i}: dp {} flow {}",
            dp.cost,
            flow.cost
        );
    }
    let runtime = start.elapsed();
    let pass = runtime.as_secs() < 60;
    println!(
        "criterion 4 (oracle equivalence, 200 instances): {} [worst rel diff {:.2e}, {:.1}s]",
        if pass { "PASS" } else { "FAIL" },
        worst,
        runtime.as_secs_f64()
    );
    assert!(pass, "runtime {runtime:?}");
}

#[test]
fn criterion_5_streaming_residuals() {
    let suite = feasibility_suite();
    let mut acc = ResidualStats::default();
    for row in &suite.rows {
        acc.absorb(&row.residuals);
    }
    let pass = acc.identity <= 1e-7 && acc.relation <= 1e-6 && acc.tightness <= 1e-7;
    println!(
        "criterion 5 (integration residuals): {} [identity {:.2e}, relation {:.2e}, tightness {:.2e}, mass {:.2e}]",
        if pass { "PASS" } else { "FAIL" },
        acc.identity,
        acc.relation,
        acc.tightness,
        acc.mass
    );
    assert!(pass, "{acc:?}");
}

#[test]
fn criterion_6_depth_reduction() {
    let rho = 2.0 * 8.0 / 7.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xDE97);
    let mut worst_distortion: f64 = 1.0;
    for i in 0..100usize {
        let n = [8, 12, 16, 24, 32, 48, 64][i % 7];
        let metric = FiniteMetric::generate(&metric_kind(i, n), n, rng.gen()).unwrap();
        let exact = frt_embed(&metric, 8.0, rng.gen()).unwrap();
        let (reduced, report) = reduce_depth(&exact).unwrap();
        let budget = (n as f64).log2().ceil() as usize + 1;
        assert!(
            report.output_depth <= budget,
            "instance {i}: depth {} over budget {budget}",
            report.output_depth
        );
        let d = pairwise_distortion(exact.shape(), reduced.shape());
        worst_distortion = worst_distortion.max(d);
        assert!(d <= rho + 1e-9, "instance {i}: distortion {d} > {rho}");
    }
    println!(
        "criterion 6 (depth reduction, 100 trees): PASS [worst distortion {:.4} <= {:.4}]",
        worst_distortion, rho
    );
}

#[test]
fn criterion_7_embedding_dominance_and_stretch() {
    // Dominance on the criterion-6 family.
    let mut rng = ChaCha8Rng::seed_from_u64(0xD0417A7C);
    for i in 0..100usize {
        let n = [8, 12, 16, 24, 32, 48, 64][i % 7];
        let metric = FiniteMetric::generate(&metric_kind(i, n), n, rng.gen()).unwrap();
        let tree = frt_embed(&metric, 8.0, rng.gen()).unwrap();
        for p in 0..n {
            for q in (p + 1)..n {
                let dt = tree.shape().leaf_distance(p, q).unwrap();
                assert!(
                    dt >= metric.dist(p, q) * (1.0 - 1e-9),
                    "instance {i}: dominance fails on pair ({p},{q})"
                );
            }
        }
    }
    // Monte-Carlo stretch trend over 200 seeds per size.
    let seeds: Vec<u64> = (0..200).collect();
    let mut table = Vec::new();
    for &n in &[4usize, 8, 16] {
        let metric = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, n, 7).unwrap();
        let stretch = mean_embedding_stretch(&metric, 8.0, &seeds);
        table.push((n, stretch, stretch / (n as f64).log2()));
    }
    let c_fit = table.iter().map(|&(_, _, c)| c).fold(0.0f64, f64::max);
    // Trend guard: growth no faster than logarithmic within a 2x margin.
    let growth = table[2].1 / table[0].1;
    let log_growth = (16.0f64.log2()) / (4.0f64.log2());
    let pass = growth <= 2.0 * log_growth;
    println!(
        "criterion 7 (dominance + stretch trend): {} [per-n mean stretch {:?}, fitted C {:.2}]",
        if pass { "PASS" } else { "FAIL" },
        table
            .iter()
            .map(|&(n, s, _)| (n, (s * 100.0).round() / 100.0))
            .collect::<Vec<_>>(),
        c_fit
    );
    assert!(pass, "stretch grew {growth:.2}x from n=4 to n=16");
}

#[test]
fn criterion_8_rounding_marginals() {
    let metric = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 8, 2).unwrap();
    let tree = frt_embed(&metric, 8.0, 3).unwrap();
    let shape = tree.shape();
    let n = shape.n_leaves();
    let k = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(0x3A3);
    let samples = 10_000usize;
    let mut worst_sigma: f64 = 0.0;
    for state_idx in 0..10 {
        // A fixed fractional state: random masses scaled to sum n - k.
        let mut u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let total: f64 = u.iter().sum();
        for x in u.iter_mut() {
            *x *= (n - k) as f64 / total;
            *x = x.min(1.0);
        }
        // Fix up any clamping drift by spreading the remainder.
        let mut drift = (n - k) as f64 - u.iter().sum::<f64>();
        let mut j = 0;
        while drift > 1e-12 && j < n {
            let room = 1.0 - u[j];
            let add = room.min(drift);
            u[j] += add;
            drift -= add;
            j += 1;
        }
        let mut hits = vec![0usize; n];
        for s in 0..samples {
            let stream = RoundingStream::new(shape, (state_idx * samples + s) as u64);
            for p in stream.sample_config(k, &u).unwrap() {
                hits[p] += 1;
            }
        }
        for p in 0..n {
            let x = 1.0 - u[p];
            let se = (x * (1.0 - x) / samples as f64).sqrt();
            let freq = hits[p] as f64 / samples as f64;
            if se > 0.0 {
                worst_sigma = worst_sigma.max((freq - x).abs() / se);
            }
            assert!(
                (freq - x).abs() <= 3.0 * se + 1e-12,
                "state {state_idx}, leaf {p}: freq {freq} vs x {x} (se {se})"
            );
        }
    }
    // Serving guarantee: rounded configurations always cover the request
    // (asserted inside run_rounded for every stream).
    let initial: Vec<usize> = (0..k).collect();
    let mut state = FractionalState::init(shape, Mode::ExactHst, k, &initial).unwrap();
    let requests: Vec<usize> = (0..20).map(|i| (5 + 3 * i) % n).collect();
    let outcome = serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
    for seed in 0..1000 {
        kserver_core::rounding::run_rounded(shape, &outcome.u_history, &requests, seed, None)
            .unwrap();
    }
    println!(
        "criterion 8 (rounding marginals, 10 states x {samples} samples): PASS [worst deviation {:.2} sigma]",
        worst_sigma
    );
}

#[test]
fn criterion_9_end_to_end_trend() {
    let mut table = Vec::new();
    for &k in &[2usize, 4] {
        let mut per_n = Vec::new();
        for &n in &[8usize, 16, 32] {
            let cfg = ExperimentConfig {
                metric_kind: MetricKind::RandomEuclidean { dim: 2 },
                n,
                k,
                sigma: 8.0,
                reduce: true,
                request_kind: RequestKind::AdversarialGreedy,
                m: 2 * n,
                seeds: (0..20).collect(),
                rounding_seeds: 8,
                baselines: false,
            };
            let report = run_experiment(&cfg).unwrap();
            let ratios: Vec<f64> = report
                .rows
                .iter()
                .filter_map(|r| r.ratio_rounded_vs_opt_orig)
                .collect();
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            per_n.push((n, mean));
        }
        table.push((k, per_n));
    }
    let mut pass = true;
    for (k, per_n) in &table {
        let (n0, r0) = per_n[0];
        let (n2, r2) = per_n[per_n.len() - 1];
        let slope = (r2 / r0).ln() / ((n2 as f64) / (n0 as f64)).ln();
        if slope >= 1.0 {
            pass = false;
        }
        println!(
            "criterion 9 table k={k}: {:?} [log-log slope {:.3}]",
            per_n
                .iter()
                .map(|&(n, r)| (n, (r * 100.0).round() / 100.0))
                .collect::<Vec<_>>(),
            slope
        );
    }
    println!(
        "criterion 9 (end-to-end ratio trend, measured only): {}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{table:?}");
}

#[test]
fn criterion_10_baseline_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E5); // same family as criterion 4
    let mut wfa_excess: f64 = 0.0;
    let mut dc_excess: f64 = 0.0;
    let mut wfa_cap: f64 = 0.0;
    let mut dc_cap: f64 = 0.0;
    for i in 0..200usize {
        let n = rng.gen_range(4..=7);
        let k = rng.gen_range(1..=3.min(n - 1));
        let m = rng.gen_range(2..=8);
        let metric = FiniteMetric::generate(&metric_kind(i, n), n, rng.gen()).unwrap();
        let dist = DistMatrix::from_metric(&metric);
        let initial: Vec<usize> = (0..k).collect();
        let requests: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let opt = opt_brute_force(&dist, &initial, &requests).unwrap();
        let wfa = work_function(&dist, &initial, &requests).unwrap();
        wfa_excess = wfa_excess.max(wfa.total_cost - (2 * k - 1) as f64 * opt.cost);
        wfa_cap = wfa_cap.max(2.0 * k as f64 * dist.max_dist());
        // Double coverage runs on the embedded tree against the tree optimum.
        let tree = frt_embed(&metric, 8.0, rng.gen()).unwrap();
        let tree_dist = DistMatrix::from_tree(tree.shape());
        let tree_opt = opt_brute_force(&tree_dist, &initial, &requests).unwrap();
        let dc = double_coverage(tree.shape(), &initial, &requests).unwrap();
        dc_excess = dc_excess.max(dc.total_cost - k as f64 * tree_opt.cost);
        dc_cap = dc_cap.max(2.0 * k as f64 * tree_dist.max_dist());
    }
    // Paging sanity: on a uniform metric the work function stays within
    // k OPT + c.
    let metric = FiniteMetric::generate(&MetricKind::Uniform, 6, 0).unwrap();
    let dist = DistMatrix::from_metric(&metric);
    let mut paging_excess: f64 = 0.0;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let requests: Vec<usize> = (0..30).map(|_| r.gen_range(0..6)).collect();
        let k = 3;
        let initial: Vec<usize> = (0..k).collect();
        let opt = opt_brute_force(&dist, &initial, &requests).unwrap();
        let wfa = work_function(&dist, &initial, &requests).unwrap();
        paging_excess = paging_excess.max(wfa.total_cost - k as f64 * opt.cost);
    }
    let pass = wfa_excess <= wfa_cap && dc_excess <= dc_cap && paging_excess <= 2.0 * 3.0;
    println!(
        "criterion 10 (baseline bounds): {} [fitted c: wfa {:.3} (cap {:.1}), dc {:.3} (cap {:.1}), paging {:.3}]",
        if pass { "PASS" } else { "FAIL" },
        wfa_excess.max(0.0),
        wfa_cap,
        dc_excess.max(0.0),
        dc_cap,
        paging_excess.max(0.0)
    );
    assert!(pass);
}

#[test]
fn exact_and_weighted_modes_agree_on_full_support() {
    // On an exact HST with n = k + 1 and no saturated leaves, the two modes
    // integrate the same dynamics.
    let metric = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 5, 9).unwrap();
    let tree: Hst = frt_embed(&metric, 8.0, 13).unwrap();
    let shape = tree.shape();
    let k = 4;
    let initial: Vec<usize> = (0..k).collect();
    let requests = vec![4, 0, 2, 4, 1, 3];
    let mut exact_state = FractionalState::init(shape, Mode::ExactHst, k, &initial).unwrap();
    let exact_out =
        serve_sequence(shape, &mut exact_state, &requests, &ServeOptions::default()).unwrap();
    let mut weighted_state = FractionalState::init(shape, Mode::WeightedHst, k, &initial).unwrap();
    let weighted_out = serve_sequence(
        shape,
        &mut weighted_state,
        &requests,
        &ServeOptions::default(),
    )
    .unwrap();
    assert!((exact_out.total_primal_lp - weighted_out.total_primal_lp).abs() < 1e-9);
    for (a, b) in exact_state.leaf_u.iter().zip(&weighted_state.leaf_u) {
        assert!((a - b).abs() < 1e-9);
    }
    let eb = ratio_bound(Mode::ExactHst, k, shape.leaf_depth());
    assert!(exact_out.total_primal_lp <= eb * exact_out.total_dual_profit * (1.0 + 1e-6));
}
