//! Classical online algorithms for cost comparison: double coverage on
//! trees, the work function algorithm, and a greedy control.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::offline::{ConfigDp, DistMatrix, OfflineError};
use crate::tree::HstShape;

/// Cost record of one baseline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineRun {
    pub algorithm: String,
    pub per_request_cost: Vec<f64>,
    pub total_cost: f64,
    pub final_positions: Vec<usize>,
}

impl BaselineRun {
    fn finish(algorithm: &str, per_request_cost: Vec<f64>, final_positions: Vec<usize>) -> Self {
        let total_cost = per_request_cost.iter().sum();
        BaselineRun {
            algorithm: algorithm.into(),
            per_request_cost,
            total_cost,
            final_positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaselineError {
    BadConfig(String),
    Offline(OfflineError),
}

impl fmt::Display for BaselineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaselineError::BadConfig(msg) => write!(f, "bad configuration: {msg}"),
            BaselineError::Offline(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for BaselineError {}

impl From<OfflineError> for BaselineError {
    fn from(e: OfflineError) -> Self {
        BaselineError::Offline(e)
    }
}

/// Greedy: the nearest server moves, ties broken by server index.
pub fn greedy_nearest(dist: &DistMatrix, initial: &[usize], requests: &[usize]) -> BaselineRun {
    let mut positions = initial.to_vec();
    let mut costs = Vec::with_capacity(requests.len());
    for &r in requests {
        let (best, d) = positions
            .iter()
            .enumerate()
            .map(|(i, &p)| (i, dist.dist(p, r)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
            .unwrap();
        positions[best] = r;
        costs.push(d);
    }
    BaselineRun::finish("greedy", costs, positions)
}

/// Work function algorithm: serve with the server minimizing
/// `w_t(X - x + r) + d(x, r)`.
pub fn work_function(
    dist: &DistMatrix,
    initial: &[usize],
    requests: &[usize],
) -> Result<BaselineRun, BaselineError> {
    let n = dist.n();
    let k = initial.len();
    let states = {
        let mut acc: u128 = 1;
        for i in 0..k.min(n - k) {
            acc = acc * (n - i) as u128 / (i + 1) as u128;
        }
        acc * requests.len().max(1) as u128
    };
    if states > 1_000_000 {
        return Err(OfflineError::TooLarge {
            states,
            limit: 1_000_000,
        }
        .into());
    }
    let mut dp = ConfigDp::new(dist.clone(), initial)?;
    let mut positions = initial.to_vec();
    let mut costs = Vec::with_capacity(requests.len());
    for &r in requests {
        dp.advance(r);
        if positions.contains(&r) {
            costs.push(0.0);
            continue;
        }
        let mask_of = |pos: &[usize]| pos.iter().fold(0u32, |m, &p| m | (1 << p));
        let mut best: Option<(usize, f64)> = None;
        for (i, &x) in positions.iter().enumerate() {
            let mask = (mask_of(&positions) & !(1 << x)) | (1 << r);
            let score = dp.value(mask) + dist.dist(x, r);
            match best {
                None => best = Some((i, score)),
                Some((_, s)) if score < s - 1e-12 => best = Some((i, score)),
                _ => {}
            }
        }
        let (i, _) = best.unwrap();
        costs.push(dist.dist(positions[i], r));
        positions[i] = r;
    }
    Ok(BaselineRun::finish("wfa", costs, positions))
}

/// A point on the tree: `up` length units above `anchor` along its parent
/// edge; `up = 0` means exactly at the node.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Pos {
    anchor: usize,
    up: f64,
}

struct TreeGeom<'a> {
    shape: &'a HstShape,
    rootdist: Vec<f64>,
}

impl<'a> TreeGeom<'a> {
    fn new(shape: &'a HstShape) -> Self {
        let mut rootdist = vec![0.0; shape.n_nodes()];
        for v in 1..shape.n_nodes() {
            rootdist[v] = rootdist[shape.parent(v).unwrap()] + shape.edge(v);
        }
        TreeGeom { shape, rootdist }
    }

    fn node_lca(&self, mut a: usize, mut b: usize) -> usize {
        while self.shape.depth(a) > self.shape.depth(b) {
            a = self.shape.parent(a).unwrap();
        }
        while self.shape.depth(b) > self.shape.depth(a) {
            b = self.shape.parent(b).unwrap();
        }
        while a != b {
            a = self.shape.parent(a).unwrap();
            b = self.shape.parent(b).unwrap();
        }
        a
    }

    fn is_ancestor(&self, a: usize, v: usize) -> bool {
        self.node_lca(a, v) == a
    }

    fn dist(&self, p: Pos, q: Pos) -> f64 {
        if p.anchor == q.anchor {
            return (p.up - q.up).abs();
        }
        let l = self.node_lca(p.anchor, q.anchor);
        let hp = self.rootdist[p.anchor] - p.up;
        let hq = self.rootdist[q.anchor] - q.up;
        if l == q.anchor {
            // q sits on p's root path, above its own anchor.
            hp - self.rootdist[q.anchor] + q.up
        } else if l == p.anchor {
            hq - self.rootdist[p.anchor] + p.up
        } else {
            hp + hq - 2.0 * self.rootdist[l]
        }
    }

    fn leaf_pos(&self, point: usize) -> Pos {
        Pos {
            anchor: self.shape.leaf_node_of(point),
            up: 0.0,
        }
    }
}

/// Double coverage on the tree: all unobstructed servers advance toward the
/// request at equal speed until one covers it. Coincident servers count once
/// (lowest index moves).
pub fn double_coverage(
    shape: &HstShape,
    initial: &[usize],
    requests: &[usize],
) -> Result<BaselineRun, BaselineError> {
    let k = initial.len();
    if k == 0 || k > shape.n_leaves() {
        return Err(BaselineError::BadConfig(format!(
            "k = {k} servers on {} leaves",
            shape.n_leaves()
        )));
    }
    let geom = TreeGeom::new(shape);
    let tol = 1e-9 * (1.0 + shape.level_len(1));
    let mut pos: Vec<Pos> = initial.iter().map(|&p| geom.leaf_pos(p)).collect();
    let mut costs = Vec::with_capacity(requests.len());

    for &r in requests {
        let target = geom.leaf_pos(r);
        let mut cost = 0.0;
        let mut guard = 0;
        loop {
            guard += 1;
            assert!(guard < 100_000, "double coverage failed to converge");
            let dists: Vec<f64> = pos.iter().map(|&p| geom.dist(p, target)).collect();
            let (winner, &dmin) = dists
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            if dmin <= tol {
                pos[winner] = target;
                break;
            }
            // Active servers: not shadowed by another server strictly on
            // their path to the request, and unique among coincident ones.
            let mut active = Vec::new();
            'srv: for i in 0..k {
                for j in 0..k {
                    if i == j {
                        continue;
                    }
                    let dij = geom.dist(pos[i], pos[j]);
                    if dij <= tol && j < i {
                        continue 'srv; // coincident, lower index represents
                    }
                    if dij > tol && (dij + dists[j] - dists[i]).abs() <= tol {
                        continue 'srv; // j sits between i and the request
                    }
                }
                active.push(i);
            }
            debug_assert!(!active.is_empty());
            // Step until the nearest structural event: a node crossing or
            // arrival at the request.
            let mut step = f64::INFINITY;
            for &i in &active {
                step = step.min(dists[i]);
                let p = pos[i];
                let toward_down = geom.is_ancestor(p.anchor, target.anchor);
                if toward_down {
                    if p.up > tol {
                        step = step.min(p.up);
                    } else {
                        let child = shape.ancestor(r, shape.depth(p.anchor) + 1);
                        step = step.min(shape.edge(child));
                    }
                } else {
                    step = step.min(shape.edge(p.anchor) - p.up);
                }
            }
            for &i in &active {
                let p = pos[i];
                let toward_down = geom.is_ancestor(p.anchor, target.anchor);
                pos[i] = if toward_down {
                    if p.up > tol {
                        Pos {
                            anchor: p.anchor,
                            up: p.up - step,
                        }
                    } else {
                        let child = shape.ancestor(r, shape.depth(p.anchor) + 1);
                        Pos {
                            anchor: child,
                            up: shape.edge(child) - step,
                        }
                    }
                } else {
                    Pos {
                        anchor: p.anchor,
                        up: p.up + step,
                    }
                };
                // Normalize exact node landings.
                let lp = pos[i];
                if lp.up >= shape.edge(lp.anchor) - tol && shape.parent(lp.anchor).is_some() {
                    pos[i] = Pos {
                        anchor: shape.parent(lp.anchor).unwrap(),
                        up: 0.0,
                    };
                }
                if lp.up.abs() <= tol {
                    pos[i] = Pos {
                        anchor: lp.anchor,
                        up: 0.0,
                    };
                }
                cost += step;
            }
        }
        costs.push(cost);
    }
    // Final positions snapped to nearest leaves for reporting.
    let finals = pos
        .iter()
        .map(|&p| {
            (0..shape.n_leaves())
                .min_by(|&a, &b| {
                    geom.dist(p, geom.leaf_pos(a))
                        .partial_cmp(&geom.dist(p, geom.leaf_pos(b)))
                        .unwrap()
                })
                .unwrap()
        })
        .collect();
    Ok(BaselineRun::finish("dc", costs, finals))
}
