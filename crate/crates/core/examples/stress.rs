//! Randomized robustness driver: serves many random instances across
//! generators, stretch factors, and both modes, checking residuals,
//! feasibility, and the ratio certificates on each.
//!
//! Run with `cargo run --release --example stress`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kserver_core::bench::{generate_requests, RequestKind};
use kserver_core::embed::{frt_embed, reduce_depth};
use kserver_core::frac::{serve_sequence, FractionalState, Mode, ServeOptions};
use kserver_core::lp::certify_run;
use kserver_core::metric::{FiniteMetric, MetricKind};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut worst_tight: f64 = 0.0;
    let mut worst_ratio_frac = 0.0f64;
    let mut phases = 0usize;
    let t0 = std::time::Instant::now();
    let total = 1500;
    for i in 0..total {
        let n = rng.gen_range(3..=24);
        let k = rng.gen_range(1..n);
        let m = rng.gen_range(1..=60);
        let kind = match i % 5 {
            0 => MetricKind::Uniform,
            1 => MetricKind::RandomEuclidean { dim: 3 },
            2 => MetricKind::Line { spacing: 0.5 },
            3 => MetricKind::Star {
                arms: (1..n).map(|a| 0.5 + (a % 5) as f64).collect(),
            },
            _ => MetricKind::RandomTree,
        };
        let rkind = match i % 4 {
            0 => RequestKind::RoundRobinLowerBound,
            1 => RequestKind::UniformRandom,
            2 => RequestKind::Zipf { s: 1.3 },
            _ => RequestKind::AdversarialGreedy,
        };
        let sigma = [6.0, 8.0, 16.0][i % 3];
        let metric = FiniteMetric::generate(&kind, n, rng.gen()).unwrap();
        let exact = frt_embed(&metric, sigma, rng.gen()).unwrap();
        let reduce = i % 2 == 1;
        let (shape, mode) = if reduce {
            (
                reduce_depth(&exact).unwrap().0.into_shape(),
                Mode::WeightedHst,
            )
        } else {
            (exact.into_shape(), Mode::ExactHst)
        };
        let requests = generate_requests(&rkind, &metric, k, m, rng.gen()).unwrap();
        let initial: Vec<usize> = (0..k).collect();
        let mut state = FractionalState::init(&shape, mode, k, &initial).unwrap();
        let out = match serve_sequence(&shape, &mut state, &requests, &ServeOptions::default()) {
            Ok(o) => o,
            Err(e) => {
                println!("FAIL instance {i}: n={n} k={k} m={m} sigma={sigma} reduce={reduce}: {e}");
                std::process::exit(1);
            }
        };
        assert!(
            out.residuals.within_contract(),
            "instance {i}: {:?}",
            out.residuals
        );
        let cert = certify_run(&shape, &state, &out, &requests).unwrap();
        assert!(cert.primal_violations.is_empty(), "instance {i}");
        assert!(
            cert.dual_check.violations.is_empty(),
            "instance {i}: {:?}",
            cert.dual_check.violations
        );
        assert!(
            cert.cert.pass,
            "instance {i}: ratio {} bound {}",
            cert.cert.achieved, cert.cert.bound
        );
        worst_tight = worst_tight.max(cert.dual_check.max_tightness_residual);
        if cert.cert.dual > 0.0 {
            worst_ratio_frac = worst_ratio_frac.max(cert.cert.achieved / cert.cert.bound);
        }
        phases += out.traces.iter().map(|t| t.phases.len()).sum::<usize>();
    }
    println!(
        "{total} instances ok in {:?}: worst tightness {:.2e}, worst ratio/bound {:.3}, {} phases",
        t0.elapsed(),
        worst_tight,
        worst_ratio_frac,
        phases
    );
}
