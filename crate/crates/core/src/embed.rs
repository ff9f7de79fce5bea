//! Randomized embedding of finite metrics into exact HSTs, and depth
//! reduction of exact HSTs into weighted HSTs.
//!
//! The embedding draws a random permutation and a log-uniform radius scale,
//! then builds the laminar partition hierarchy with radii shrinking by the
//! stretch factor per level. Edge lengths are chosen so that tree distances
//! dominate the source metric unconditionally (checked in tests, not only in
//! expectation).
//!
//! Depth reduction keeps the root, the leaf level, and every level that hosts
//! a lowest common ancestor, then greedily drops levels (cheapest measured
//! stretch first) until the depth budget `ceil(log2 n) + 1` is met. Surviving
//! level `j` keeps the original edge length just below the previous kept
//! level, which makes consecutive level ratios products of the original
//! stretch, hence at least `sigma`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::metric::FiniteMetric;
use crate::tree::{Hst, HstShape, TreeError, WeightedHst};

/// Summary of one depth reduction.
#[derive(Debug, Clone)]
pub struct ReduceReport {
    pub input_depth: usize,
    pub output_depth: usize,
    pub depth_budget: usize,
    /// output_depth / log2(n): the constant in the depth bound.
    pub depth_constant: f64,
    /// Worst leaf-pair ratio max(new/old, old/new) predicted from level data.
    pub max_distortion: f64,
    /// Levels dropped beyond the always-contractible non-LCA levels.
    pub dropped_lca_levels: usize,
}

/// Embeds a finite metric into an exact `sigma`-HST.
///
/// Deterministic for a fixed seed. The leaf set is the metric's point set and
/// tree distances dominate metric distances for every pair.
pub fn frt_embed(metric: &FiniteMetric, sigma: f64, seed: u64) -> Result<Hst, TreeError> {
    assert!(sigma > 1.0, "stretch must exceed 1");
    let n = metric.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let beta = sigma.powf(rng.gen::<f64>());
    let delta = metric.max_distance();
    let min_d = metric.min_positive_distance();

    // First center in permutation order within `radius` of `p`.
    let center_of = |p: usize, radius: f64| -> usize {
        *order
            .iter()
            .find(|&&c| metric.dist(p, c) <= radius)
            .expect("p is within 0 of itself")
    };

    // Level 0 is the root cluster holding every point.
    let mut parents: Vec<Option<usize>> = vec![None];
    let mut edges: Vec<f64> = vec![0.0];
    let mut leaf_point: Vec<Option<usize>> = vec![None];
    // Clusters of the current level: (node id, members).
    let mut frontier: Vec<(usize, Vec<usize>)> = vec![(0, (0..n).collect())];
    let mut level = 0usize;
    loop {
        level += 1;
        let radius = beta * delta * sigma.powi(-(level as i32));
        let edge = beta * delta * sigma.powi(1 - level as i32);
        let mut next = Vec::new();
        for (node, members) in &frontier {
            // Partition members by their first covering center; preserve
            // permutation order of centers, point order within a cluster.
            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for &p in members {
                let c = center_of(p, radius);
                match groups.iter_mut().find(|(key, _)| *key == c) {
                    Some((_, g)) => g.push(p),
                    None => groups.push((c, vec![p])),
                }
            }
            groups.sort_by_key(|(c, _)| order.iter().position(|&o| o == *c).unwrap());
            for (_, g) in groups {
                let id = parents.len();
                parents.push(Some(*node));
                edges.push(edge);
                leaf_point.push(None);
                next.push((id, g));
            }
        }
        let all_singleton = next.iter().all(|(_, g)| g.len() == 1);
        frontier = next;
        if all_singleton || radius < min_d / 2.0 {
            break;
        }
    }
    for (node, members) in &frontier {
        debug_assert_eq!(members.len(), 1);
        leaf_point[*node] = Some(members[0]);
    }
    Hst::new(HstShape::from_parents(parents, edges, leaf_point, sigma)?)
}

/// Predicted leaf-pair distance for an LCA sitting at original level `c`,
/// given kept cut levels and the original level lengths.
fn reduced_value(cuts: &[usize], level_len: &[f64], c: usize) -> f64 {
    let i = cuts.iter().rposition(|&m| m <= c).unwrap();
    let mut v = 0.0;
    for j in (i + 1)..cuts.len() {
        v += 2.0 * level_len[cuts[j - 1]]; // D at original level cuts[j-1] + 1 (0-based index)
    }
    v
}

fn true_value(level_len: &[f64], c: usize, leaf_depth: usize) -> f64 {
    (c..leaf_depth).map(|m| 2.0 * level_len[m]).sum()
}

fn max_distortion(
    cuts: &[usize],
    level_len: &[f64],
    lca_levels: &[usize],
    leaf_depth: usize,
) -> f64 {
    let mut worst: f64 = 1.0;
    for &c in lca_levels {
        let t = true_value(level_len, c, leaf_depth);
        let r = reduced_value(cuts, level_len, c);
        worst = worst.max((r / t).max(t / r));
    }
    worst
}

/// Contracts an exact HST to a weighted HST within the depth budget
/// `ceil(log2 n) + 1`.
pub fn reduce_depth(tree: &Hst) -> Result<(WeightedHst, ReduceReport), TreeError> {
    let shape = tree.shape();
    let n = shape.n_leaves();
    let ell = shape.leaf_depth();
    let level_len: Vec<f64> = (1..=ell).map(|j| shape.level_len(j)).collect();

    // Levels hosting a lowest common ancestor: internal nodes with >= 2 children.
    let mut lca_levels: Vec<usize> = (0..shape.n_nodes())
        .filter(|&v| shape.children(v).len() >= 2)
        .map(|v| shape.depth(v))
        .collect();
    lca_levels.sort_unstable();
    lca_levels.dedup();

    let mut cuts: Vec<usize> = Vec::new();
    cuts.push(0);
    for &c in &lca_levels {
        if c != 0 {
            cuts.push(c);
        }
    }
    if *cuts.last().unwrap() != ell {
        cuts.push(ell);
    }

    let budget = (n as f64).log2().ceil() as usize + 1;
    let mut dropped = 0usize;
    while cuts.len() - 1 > budget.max(1) {
        // Drop the interior cut whose removal stretches pairs the least.
        let mut best: Option<(usize, f64)> = None;
        for i in 1..cuts.len() - 1 {
            let mut trial = cuts.clone();
            trial.remove(i);
            let d = max_distortion(&trial, &level_len, &lca_levels, ell);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("at least one interior cut");
        cuts.remove(i);
        dropped += 1;
    }

    // Rebuild: nodes at cut levels, parent = ancestor at the previous cut.
    // New level j edge = original level length just below cut j-1.
    let q = cuts.len() - 1;
    let new_level_len: Vec<f64> = (1..=q).map(|j| level_len[cuts[j - 1]]).collect();

    let mut new_id = vec![usize::MAX; shape.n_nodes()];
    let mut parents: Vec<Option<usize>> = Vec::new();
    let mut edges: Vec<f64> = Vec::new();
    let mut leaf_point: Vec<Option<usize>> = Vec::new();
    // Walk cut levels top-down so parents precede children.
    for (ci, &cut) in cuts.iter().enumerate() {
        for v in 0..shape.n_nodes() {
            if shape.depth(v) != cut {
                continue;
            }
            let id = parents.len();
            new_id[v] = id;
            if ci == 0 {
                parents.push(None);
                edges.push(0.0);
            } else {
                // Ancestor of v at the previous cut level.
                let mut a = v;
                while shape.depth(a) != cuts[ci - 1] {
                    a = shape.parent(a).unwrap();
                }
                parents.push(Some(new_id[a]));
                edges.push(new_level_len[ci - 1]);
            }
            leaf_point.push(if ci == cuts.len() - 1 {
                shape.leaf_point(v)
            } else {
                None
            });
        }
    }

    let reduced = WeightedHst::new(HstShape::from_parents(
        parents,
        edges,
        leaf_point,
        shape.sigma(),
    )?)?;
    let report = ReduceReport {
        input_depth: ell,
        output_depth: q,
        depth_budget: budget,
        depth_constant: q as f64 / (n as f64).log2().max(1.0),
        max_distortion: max_distortion(&cuts, &level_len, &lca_levels, ell),
        dropped_lca_levels: dropped,
    };
    Ok((reduced, report))
}

/// Worst-case measured leaf-pair ratio between two trees over the same points.
pub fn pairwise_distortion(a: &HstShape, b: &HstShape) -> f64 {
    let n = a.n_leaves();
    let mut worst: f64 = 1.0;
    for p in 0..n {
        for q in (p + 1)..n {
            let da = a.leaf_distance(p, q).unwrap();
            let db = b.leaf_distance(p, q).unwrap();
            worst = worst.max((da / db).max(db / da));
        }
    }
    worst
}

/// Mean over pairs of tree/metric distance ratios, averaged over seeds.
pub fn mean_embedding_stretch(metric: &FiniteMetric, sigma: f64, seeds: &[u64]) -> f64 {
    let n = metric.n();
    let mut total = 0.0;
    let mut count = 0usize;
    for &seed in seeds {
        let tree = frt_embed(metric, sigma, seed).expect("embedding");
        for p in 0..n {
            for q in (p + 1)..n {
                total += tree.shape().leaf_distance(p, q).unwrap() / metric.dist(p, q);
                count += 1;
            }
        }
    }
    total / count as f64
}
