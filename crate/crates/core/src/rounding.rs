//! Randomized rounding of fractional trajectories into integral server
//! configurations with exact per-leaf marginals.
//!
//! One uniform anchor is drawn per run. Leaves are laid out in depth-first
//! order and the in-cache fractions tile the interval `[0, k)`; the sampled
//! configuration is the set of leaves containing the points `anchor + i`.
//! Because the k sample points sit exactly one unit apart, a leaf of fraction
//! `x` is occupied with probability exactly `x`, and a leaf with `x = 1` is
//! always occupied. Movement between consecutive configurations is realized
//! by greedy bottom-up surplus/deficit matching, which is cost-optimal on
//! trees.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::offline::DistMatrix;
use crate::tree::HstShape;

#[derive(Debug, Clone, PartialEq)]
pub enum RoundError {
    /// In-cache fractions do not sum to k.
    MarginalMismatch { total: f64, k: usize },
    /// Supplied configuration occupies a fully evicted leaf.
    ConfigInvalid { point: usize },
}

impl fmt::Display for RoundError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundError::MarginalMismatch { total, k } => {
                write!(f, "in-cache mass {total} does not match k = {k}")
            }
            RoundError::ConfigInvalid { point } => {
                write!(f, "configuration occupies evicted leaf {point}")
            }
        }
    }
}

impl std::error::Error for RoundError {}

/// Per-run sampling state: the shared anchor plus the leaf layout.
#[derive(Debug, Clone)]
pub struct RoundingStream {
    anchor: f64,
    /// Points in depth-first order.
    order: Vec<usize>,
}

impl RoundingStream {
    pub fn new(shape: &HstShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RoundingStream {
            anchor: rng.gen::<f64>(),
            order: shape.points_in_dfs_order(),
        }
    }

    /// Samples the configuration with per-leaf occupancy `x_p = 1 - u_p`.
    pub fn sample_config(&self, k: usize, leaf_u: &[f64]) -> Result<Vec<usize>, RoundError> {
        let total: f64 = leaf_u.iter().map(|u| 1.0 - u).sum();
        if (total - k as f64).abs() > crate::frac::TAU_MASS {
            return Err(RoundError::MarginalMismatch { total, k });
        }
        let mut cuts = Vec::with_capacity(self.order.len());
        let mut acc = 0.0;
        for &p in &self.order {
            acc += 1.0 - leaf_u[p];
            cuts.push(acc);
        }
        let mut taken = vec![false; leaf_u.len()];
        let mut cfg = Vec::with_capacity(k);
        for i in 0..k {
            let pos = self.anchor + i as f64;
            // Unit spacing puts each sample in a distinct unit of mass; the
            // collision walk only fires on the measure-zero boundary cases
            // floating error can produce.
            let mut idx = cuts
                .partition_point(|&c| c <= pos)
                .min(self.order.len() - 1);
            while taken[self.order[idx]] {
                idx = (idx + 1) % self.order.len();
            }
            taken[self.order[idx]] = true;
            cfg.push(self.order[idx]);
        }
        cfg.sort_unstable();
        Ok(cfg)
    }
}

/// Greedy bottom-up matching of vacated against newly occupied leaves.
/// Returns `(from, to)` moves; their summed tree distance is the optimal
/// transport cost between the two configurations.
pub fn match_configs(shape: &HstShape, old: &[usize], new: &[usize]) -> Vec<(usize, usize)> {
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); shape.n_nodes()];
    let mut sinks: Vec<Vec<usize>> = vec![Vec::new(); shape.n_nodes()];
    for &p in old {
        if !new.contains(&p) {
            sources[shape.leaf_node_of(p)].push(p);
        }
    }
    for &p in new {
        if !old.contains(&p) {
            sinks[shape.leaf_node_of(p)].push(p);
        }
    }
    let mut moves = Vec::new();
    // Post-order: children have larger ids than parents under our builders,
    // so a reverse id sweep visits children first.
    for v in (0..shape.n_nodes()).rev() {
        let (mut src, mut snk) = (
            std::mem::take(&mut sources[v]),
            std::mem::take(&mut sinks[v]),
        );
        while let (Some(&s), Some(&t)) = (src.last(), snk.last()) {
            moves.push((s, t));
            src.pop();
            snk.pop();
        }
        if let Some(parent) = shape.parent(v) {
            sources[parent].append(&mut src);
            sinks[parent].append(&mut snk);
        } else {
            debug_assert!(src.is_empty() && snk.is_empty());
        }
    }
    moves
}

/// Optimal fractional transport cost between two mass vectors on the tree:
/// each edge carries the net change of the mass below it.
pub fn tree_transport_cost(shape: &HstShape, u_old: &[f64], u_new: &[f64]) -> f64 {
    let before = crate::frac::view::physical_masses(shape, u_old);
    let after = crate::frac::view::physical_masses(shape, u_new);
    (1..shape.n_nodes())
        .map(|v| shape.edge(v) * (before[v] - after[v]).abs())
        .sum()
}

/// One rounded transition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundedStep {
    pub config: Vec<usize>,
    pub moves: Vec<(usize, usize)>,
    pub cost_tree: f64,
    pub cost_metric: Option<f64>,
    /// Fractional transport cost of the same step, for coupling ratios.
    pub fractional_cost: f64,
}

/// A full rounded trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundedRun {
    pub seed: u64,
    pub initial: Vec<usize>,
    pub steps: Vec<RoundedStep>,
    pub total_tree: f64,
    pub total_metric: Option<f64>,
}

/// Advances one configuration along a fractional step.
pub fn round_step(
    shape: &HstShape,
    stream: &RoundingStream,
    cfg: &[usize],
    u_old: &[f64],
    u_new: &[f64],
) -> Result<(Vec<usize>, Vec<(usize, usize)>, f64), RoundError> {
    for &p in cfg {
        if u_old[p] >= 1.0 {
            return Err(RoundError::ConfigInvalid { point: p });
        }
    }
    let total_old: f64 = u_old.iter().map(|u| 1.0 - u).sum();
    if (total_old - cfg.len() as f64).abs() > crate::frac::TAU_MASS {
        return Err(RoundError::MarginalMismatch {
            total: total_old,
            k: cfg.len(),
        });
    }
    let new_cfg = stream.sample_config(cfg.len(), u_new)?;
    let moves = match_configs(shape, cfg, &new_cfg);
    let cost = moves
        .iter()
        .map(|&(a, b)| shape.leaf_distance(a, b).unwrap())
        .sum();
    Ok((new_cfg, moves, cost))
}

/// Rounds a whole fractional trajectory. The initial masses must be integral
/// so the starting configuration is forced.
pub fn run_rounded(
    shape: &HstShape,
    u_history: &[Vec<f64>],
    requests: &[usize],
    seed: u64,
    metric: Option<&DistMatrix>,
) -> Result<RoundedRun, RoundError> {
    assert_eq!(u_history.len(), requests.len() + 1);
    let k = u_history[0].iter().map(|u| 1.0 - u).sum::<f64>().round() as usize;
    let stream = RoundingStream::new(shape, seed);
    let initial = stream.sample_config(k, &u_history[0])?;
    let mut cfg = initial.clone();
    let mut steps = Vec::with_capacity(requests.len());
    let mut total_tree = 0.0;
    let mut total_metric = metric.map(|_| 0.0);
    for (t, r) in requests.iter().enumerate() {
        let (new_cfg, moves, cost_tree) =
            round_step(shape, &stream, &cfg, &u_history[t], &u_history[t + 1])?;
        assert!(
            new_cfg.contains(r),
            "request {r} unoccupied after rounded step {t}"
        );
        let cost_metric = metric.map(|d| moves.iter().map(|&(a, b)| d.dist(a, b)).sum::<f64>());
        total_tree += cost_tree;
        if let (Some(total), Some(c)) = (total_metric.as_mut(), cost_metric) {
            *total += c;
        }
        steps.push(RoundedStep {
            config: new_cfg.clone(),
            moves,
            cost_tree,
            cost_metric,
            fractional_cost: tree_transport_cost(shape, &u_history[t], &u_history[t + 1]),
        });
        cfg = new_cfg;
    }
    Ok(RoundedRun {
        seed,
        initial,
        steps,
        total_tree,
        total_metric,
    })
}
