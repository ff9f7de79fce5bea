//! Cross-module integration tests: fixtures, property tests, and the
//! equivalence checks between independent computation routes.

use proptest::prelude::*;

use kserver_core::baselines::{double_coverage, work_function};
use kserver_core::embed::{frt_embed, reduce_depth};
use kserver_core::frac::rates::{phi, rate_assignment};
use kserver_core::frac::view::ActiveView;
use kserver_core::frac::{serve_sequence, FractionalState, Mode, ServeOptions};
use kserver_core::lp::certify_run;
use kserver_core::metric::{FiniteMetric, MetricKind};
use kserver_core::offline::{opt_brute_force, opt_min_cost_flow, DistMatrix};
use kserver_core::rounding::{run_rounded, tree_transport_cost};
use kserver_core::tree::{balanced_hst, verify_hst, HstFlavor};

#[test]
fn line_fixture_matches_generator() {
    let text = include_str!("fixtures/line4.metric");
    let parsed = FiniteMetric::from_text(text).unwrap();
    let generated = FiniteMetric::generate(&MetricKind::Line { spacing: 1.0 }, 4, 0).unwrap();
    assert_eq!(parsed, generated);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn uniform_metric_is_valid_for_any_n(n in 2usize..40) {
        let m = FiniteMetric::generate(&MetricKind::Uniform, n, 0).unwrap();
        prop_assert_eq!(m.n(), n);
    }

    #[test]
    fn generated_metrics_validate_and_round_trip(
        seed in 0u64..5000,
        n in 2usize..12,
        kind in 0usize..3,
    ) {
        let kind = match kind {
            0 => MetricKind::RandomEuclidean { dim: 2 },
            1 => MetricKind::RandomTree,
            _ => MetricKind::Uniform,
        };
        let m = FiniteMetric::generate(&kind, n, seed).unwrap();
        let back = FiniteMetric::from_text(&m.to_text()).unwrap();
        prop_assert_eq!(m, back);
    }

    #[test]
    fn opt_is_monotone_under_extension(seed in 0u64..500) {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 5, seed).unwrap();
        let d = DistMatrix::from_metric(&m);
        let requests: Vec<usize> = (0..5).map(|_| rng.gen_range(0..5)).collect();
        let short = opt_brute_force(&d, &[0, 1], &requests[..4]).unwrap();
        let long = opt_brute_force(&d, &[0, 1], &requests).unwrap();
        prop_assert!(long.cost >= short.cost - 1e-12);
    }
}

#[test]
fn rate_components_match_hand_solved_system() {
    // Depth-2 binary tree, sigma = 2, top edges 2, bottom edges 1; k = 3,
    // u = (0.5, 0.1, 0.2, 0.2), request p0. Solving the tightness and
    // node-identity equations by hand gives the totals below.
    let t = balanced_hst(2, 2, 2.0, 2.0);
    let u = vec![0.5, 0.1, 0.2, 0.2];
    let view = ActiveView::compute(t.shape(), 3, &u, Some(0));
    let rates = rate_assignment(t.shape(), &view, 0).unwrap();
    let s = t.shape();
    // Hand solution: s1 = 1/psi(1) = 2/3; beta1 = -(U0-U1) s1 / U1 with
    // U0 = 1 + 4/3, U1 = 0.6 + 2/3.
    let u0: f64 = 1.0 + 4.0 / 3.0;
    let u1: f64 = 0.6 + 2.0 / 3.0;
    let u2: f64 = 0.5 + 1.0 / 3.0;
    let s1 = 1.0 / phi(s, 1);
    let beta1 = -(u0 - u1) * s1 / u1;
    let s2 = 1.0 - beta1;
    let beta2 = ((1.0 / 2.0) * u1 * beta1 - (u1 - u2) * s2) / u2;
    let a1 = s.ancestor(0, 1);
    let leaf0 = s.leaf_node_of(0);
    let leaf1 = s.leaf_node_of(1);
    assert!((rates.db[a1] - beta1).abs() < 1e-12);
    assert!((rates.db[leaf0] - beta2).abs() < 1e-12);
    assert!((rates.db[leaf1] - s2).abs() < 1e-12);
}

#[test]
fn exact_mode_factor_is_the_stated_constant_on_n_eq_k_plus_1() {
    // With n = k+1 and no saturated leaves, u_r + |S|/k = 2 + 1/(n-1).
    for n in 2..8usize {
        let k = n - 1;
        let t = balanced_hst(n, 1, 8.0, 1.0);
        let cfg: Vec<usize> = (0..k).collect();
        let st = FractionalState::init(t.shape(), Mode::ExactHst, k, &cfg).unwrap();
        let rates = st.rates(t.shape(), n - 1).unwrap();
        let expected = 2.0 + 1.0 / (n as f64 - 1.0);
        assert!((rates.factor - expected).abs() < 1e-12, "n = {n}");
    }
}

#[test]
fn embedding_identity_on_exact_hst() {
    // For leaves with the lowest common ancestor at depth j, the distance is
    // twice the sum of level lengths below j (both legs equal).
    let t = balanced_hst(2, 3, 8.0, 64.0);
    let s = t.shape();
    for p in 0..8 {
        for q in 0..8 {
            if p == q {
                continue;
            }
            let j = s.lca_depth(p, q);
            let expect: f64 = ((j + 1)..=3).map(|m| 2.0 * s.level_len(m)).sum();
            assert!((s.leaf_distance(p, q).unwrap() - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn weighted_serve_on_reduced_tree_certifies() {
    let metric = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 10, 3).unwrap();
    let exact = frt_embed(&metric, 8.0, 11).unwrap();
    let (reduced, _) = reduce_depth(&exact).unwrap();
    assert!(verify_hst(reduced.shape(), HstFlavor::Weighted).is_empty());
    let shape = reduced.shape();
    let k = 3;
    let initial: Vec<usize> = (0..k).collect();
    let mut state = FractionalState::init(shape, Mode::WeightedHst, k, &initial).unwrap();
    let requests = vec![5, 9, 2, 7, 0, 4, 8, 5, 1, 9, 3, 6];
    let out = serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
    assert!(out.residuals.within_contract(), "{:?}", out.residuals);
    let cert = certify_run(shape, &state, &out, &requests).unwrap();
    assert!(
        cert.primal_violations.is_empty(),
        "{:?}",
        cert.primal_violations
    );
    assert!(
        cert.dual_check.violations.is_empty(),
        "{:?}",
        cert.dual_check.violations
    );
    assert!(
        cert.cert.pass,
        "P/D = {} vs bound {}",
        cert.cert.achieved, cert.cert.bound
    );
}

#[test]
fn weak_duality_against_offline_optimum() {
    // The serve-part dual value never exceeds the exact integral optimum.
    for seed in 0..10u64 {
        let metric =
            FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 6, seed).unwrap();
        let exact = frt_embed(&metric, 8.0, seed).unwrap();
        let shape = exact.shape();
        let k = 2;
        let initial = vec![0, 1];
        let mut state = FractionalState::init(shape, Mode::ExactHst, k, &initial).unwrap();
        let requests: Vec<usize> = (0..10).map(|i| (seed as usize + 2 * i + 2) % 6).collect();
        let out = serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
        let cert = certify_run(shape, &state, &out, &requests).unwrap();
        let opt = opt_brute_force(&DistMatrix::from_tree(shape), &initial, &requests).unwrap();
        assert!(
            cert.dual.serve_part <= opt.cost * (1.0 + 1e-6) + 1e-9,
            "dual {} vs opt {} on seed {seed}",
            cert.dual.serve_part,
            opt.cost
        );
    }
}

#[test]
fn rounded_cost_never_beats_fractional_on_star_single_request() {
    // On a uniform star every transport leg has equal length, so each rounded
    // realization of a single serve pays at least the fractional transport.
    let t = balanced_hst(4, 1, 8.0, 1.0);
    let shape = t.shape();
    let mut state = FractionalState::init(shape, Mode::ExactHst, 2, &[0, 1]).unwrap();
    let requests = vec![3];
    let out = serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
    let frac_step = tree_transport_cost(shape, &out.u_history[0], &out.u_history[1]);
    for seed in 0..100 {
        let run = run_rounded(shape, &out.u_history, &requests, seed, None).unwrap();
        assert!(
            run.total_tree >= frac_step - 1e-9,
            "seed {seed}: {} < {frac_step}",
            run.total_tree
        );
    }
}

#[test]
fn dc_and_wfa_beat_nothing_but_serve_everything() {
    let metric = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 6, 5).unwrap();
    let exact = frt_embed(&metric, 8.0, 5).unwrap();
    let shape = exact.shape();
    let initial = vec![0, 1];
    let requests = vec![4, 2, 5, 3, 4, 0, 1, 5];
    let tree_dist = DistMatrix::from_tree(shape);
    let dc = double_coverage(shape, &initial, &requests).unwrap();
    let wfa = work_function(&tree_dist, &initial, &requests).unwrap();
    let opt = opt_brute_force(&tree_dist, &initial, &requests).unwrap();
    assert!(dc.total_cost >= opt.cost - 1e-9);
    assert!(wfa.total_cost >= opt.cost - 1e-9);
    // Sanity: the flow oracle agrees with the DP here too.
    let flow = opt_min_cost_flow(&tree_dist, &initial, &requests).unwrap();
    assert!((flow.cost - opt.cost).abs() < 1e-9 * (1.0 + opt.cost));
}

#[test]
fn two_point_instances_serve_cleanly() {
    let metric = FiniteMetric::generate(&MetricKind::Uniform, 2, 0).unwrap();
    let tree = frt_embed(&metric, 8.0, 1).unwrap();
    let shape = tree.shape();
    let mut state = FractionalState::init(shape, Mode::ExactHst, 1, &[0]).unwrap();
    let requests = vec![1, 0, 1, 0];
    let out = serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
    assert!(out.residuals.within_contract());
    let cert = certify_run(shape, &state, &out, &requests).unwrap();
    assert!(cert.cert.pass);
    assert!(cert.dual_check.violations.is_empty());
}

#[test]
fn rounding_cost_coupling_measured_across_sigmas() {
    // The coupling-loss constant is measured, not asserted: report the worst
    // per-step mean-rounded/fractional ratio for each stretch factor.
    let metric = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 12, 4).unwrap();
    let mut table = Vec::new();
    for &sigma in &[2.0f64, 4.0, 8.0] {
        let tree = frt_embed(&metric, sigma, 17).unwrap();
        let shape = tree.shape();
        let k = 4;
        let initial: Vec<usize> = (0..k).collect();
        let mut state = FractionalState::init(shape, Mode::ExactHst, k, &initial).unwrap();
        let requests: Vec<usize> = (0..24).map(|i| (5 + 7 * i) % 12).collect();
        let out = serve_sequence(shape, &mut state, &requests, &ServeOptions::default()).unwrap();
        let streams = 64u64;
        let mut step_sum = vec![0.0f64; requests.len()];
        let mut step_frac = vec![0.0f64; requests.len()];
        for seed in 0..streams {
            let run = run_rounded(shape, &out.u_history, &requests, seed, None).unwrap();
            for (t, st) in run.steps.iter().enumerate() {
                step_sum[t] += st.cost_tree;
                step_frac[t] = st.fractional_cost;
            }
        }
        let c_probe = step_sum
            .iter()
            .zip(&step_frac)
            .filter(|(_, f)| **f > 1e-9)
            .map(|(c, f)| c / streams as f64 / f)
            .fold(0.0f64, f64::max);
        assert!(c_probe.is_finite() && c_probe > 0.0);
        table.push((sigma, c_probe));
    }
    println!("measured rounding coupling constants (sigma, worst step ratio): {table:?}");
}
