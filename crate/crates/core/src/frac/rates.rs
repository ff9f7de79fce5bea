//! Instantaneous primal-dual rates for one request.
//!
//! The per-depth closed forms give *component* rates: how much the dual value
//! of the request-path node at depth `j` falls, and how much each non-full
//! sibling at that depth rises, per unit of the set variable `a_S`. Each
//! component also cascades into the subtree below it, shrinking by the level
//! ratio per depth. The total per-node rate is the superposition of its own
//! component with the cascades of all shallower path components; those totals
//! are what the integrator consumes.
//!
//! Two independent routes compute the same numbers: the closed forms and a
//! forward-substitution solve of the tightness/node-identity equation system.
//! [`cross_check`] verifies they agree and that the totals
//! keep every active leaf's dual constraint growing at exactly the rate of
//! `a_S` while conserving mass.

use crate::tree::HstShape;

use super::view::ActiveView;
use super::FracError;

/// Geometric path-rate sum for a node at depth `j`: the sum of cascade
/// factors from depth `j` down to the leaves, `1 + 1/sigma_j + ...`.
///
/// With per-level lengths `L_j` this is `sum_{m>=j} L_m / L_j`.
pub fn phi(shape: &HstShape, j: usize) -> f64 {
    let ell = shape.leaf_depth();
    assert!(j >= 1 && j <= ell, "depth {j} out of 1..={ell}");
    let tail: f64 = (j..=ell).map(|m| shape.level_len(m)).sum();
    tail / shape.level_len(j)
}

/// `psi` for an exact HST equals [`phi`]; provided under the exact-mode name
/// so call sites can say what they mean.
pub fn psi(shape: &HstShape, j: usize) -> f64 {
    phi(shape, j)
}

/// Rates for serving `p_t` from one state snapshot, per unit `a_S`.
#[derive(Debug, Clone)]
pub struct RateAssignment {
    pub p_t: usize,
    /// F = u_r + |S|/k, the multiplier of every component.
    pub factor: f64,
    /// Component decrease of the path node at depth j (index j-1), >= 0.
    pub grad_b_path: Vec<f64>,
    /// Component raise of non-full siblings at depth j (index j-1).
    pub grad_b_sibling: Vec<f64>,
    /// Total db_v/da per node (0 outside the active support).
    pub db: Vec<f64>,
    /// Total du_v/da per node (restricted masses).
    pub du: Vec<f64>,
    /// Depths with at least one non-full sibling (the common-ancestor depths
    /// shifted down by one).
    pub action_depths: Vec<usize>,
}

impl RateAssignment {
    /// du/da for a metric point's leaf.
    pub fn leaf_du(&self, shape: &HstShape, point: usize) -> f64 {
        self.du[shape.leaf_node_of(point)]
    }
}

/// Computes the rate assignment from an active view.
///
/// Fails with [`FracError::RequestAlreadyServed`] when the requested leaf
/// carries no mass (the serve loop should no-op instead).
pub fn rate_assignment(
    shape: &HstShape,
    view: &ActiveView,
    p_t: usize,
) -> Result<RateAssignment, FracError> {
    let leaf = shape.leaf_node_of(p_t);
    if view.ur[leaf] <= 0.0 {
        return Err(FracError::RequestAlreadyServed { point: p_t });
    }
    let ell = shape.leaf_depth();
    let k = view.k as f64;
    let factor = view.ur[0] + view.nl[0] as f64 / k;

    // U_j = restricted mass + restricted leaf count / k along the request path.
    let mut big_u = Vec::with_capacity(ell + 1);
    big_u.push(factor);
    for j in 1..=ell {
        let a = shape.ancestor(p_t, j);
        big_u.push(view.ur[a] + view.nl[a] as f64 / k);
    }

    let mut grad_b_path = vec![0.0; ell];
    let mut grad_b_sibling = vec![0.0; ell];
    for j in 1..=ell {
        let f_over_phi = factor / phi(shape, j);
        grad_b_path[j - 1] = f_over_phi * (1.0 / big_u[j] - 1.0 / big_u[j - 1]);
        grad_b_sibling[j - 1] = f_over_phi / big_u[j - 1];
    }

    // Superpose: cascade the running path total into depth j, then add the
    // depth-j components.
    let mut total_path = vec![0.0; ell + 1];
    let mut total_sibling = vec![0.0; ell + 1];
    for j in 1..=ell {
        let cascade = if j == 1 {
            0.0
        } else {
            total_path[j - 1] * shape.level_len(j) / shape.level_len(j - 1)
        };
        total_path[j] = cascade - grad_b_path[j - 1];
        total_sibling[j] = cascade + grad_b_sibling[j - 1];
    }

    let n_nodes = shape.n_nodes();
    let mut db = vec![0.0; n_nodes];
    let mut action_depths = Vec::new();
    for j in 1..=ell {
        let a_j = shape.ancestor(p_t, j);
        db[a_j] = total_path[j];
        let a_prev = shape.ancestor(p_t, j - 1);
        let mut any_sibling = false;
        for &w in shape.children(a_prev) {
            if w == a_j || view.nl[w] == 0 {
                continue;
            }
            any_sibling = true;
            // The sibling's subtree inherits its rate shrunk by the level
            // ratios: rate at depth m is total * L_m / L_j.
            let mut stack = vec![w];
            while let Some(x) = stack.pop() {
                if view.nl[x] == 0 {
                    continue;
                }
                let m = shape.depth(x);
                db[x] = total_sibling[j] * shape.level_len(m) / shape.level_len(j);
                for &c in shape.children(x) {
                    stack.push(c);
                }
            }
        }
        if any_sibling {
            action_depths.push(j);
        }
    }

    let lambda = (1.0 + k).ln();
    let mut du = vec![0.0; n_nodes];
    for v in 1..n_nodes {
        if view.nl[v] > 0 {
            let g = lambda * (view.ur[v] + view.nl[v] as f64 / k) / (2.0 * shape.edge(v));
            du[v] = g * db[v];
        }
    }

    Ok(RateAssignment {
        p_t,
        factor,
        grad_b_path,
        grad_b_sibling,
        db,
        du,
        action_depths,
    })
}

/// Solves the tightness / node-identity equation system by forward
/// substitution, independently of the closed forms.
///
/// Returns the component rates `(grad_b_path, grad_b_sibling)`.
pub fn appendix_system_rates(
    shape: &HstShape,
    view: &ActiveView,
    p_t: usize,
) -> (Vec<f64>, Vec<f64>) {
    let ell = shape.leaf_depth();
    let k = view.k as f64;
    let factor = view.ur[0] + view.nl[0] as f64 / k;
    let mut big_u = Vec::with_capacity(ell + 1);
    big_u.push(factor);
    for j in 1..=ell {
        let a = shape.ancestor(p_t, j);
        big_u.push(view.ur[a] + view.nl[a] as f64 / k);
    }
    let mut gb = vec![0.0; ell];
    let mut gs = vec![0.0; ell];
    // Accumulated phi(i) * grad_b_i from shallower depths (the growth the
    // sibling raise at depth j must cancel on top of a_S itself).
    let mut acc = 0.0;
    for j in 1..=ell {
        let phi_j = phi(shape, j);
        // Tightness: phi(j) * grad_sibling_j = 1 + sum_{i<j} phi(i) * grad_path_i.
        gs[j - 1] = (1.0 + acc) / phi_j;
        // Node identity at the parent: grad_path_j * U_j = grad_sibling_j * (U_{j-1} - U_j).
        gb[j - 1] = gs[j - 1] * (big_u[j - 1] - big_u[j]) / big_u[j];
        acc += phi_j * gb[j - 1];
    }
    (gb, gs)
}

/// Largest inconsistency across the three routes: closed forms vs the
/// equation system, per-leaf dual tightness of the totals, and conservation
/// of restricted mass. Used as a streaming assert by the integrator.
pub fn cross_check(shape: &HstShape, view: &ActiveView, rates: &RateAssignment) -> f64 {
    let (gb, gs) = appendix_system_rates(shape, view, rates.p_t);
    let mut worst: f64 = 0.0;
    for j in 0..gb.len() {
        worst = worst.max((gb[j] - rates.grad_b_path[j]).abs());
        worst = worst.max((gs[j] - rates.grad_b_sibling[j]).abs());
    }
    // Tightness: along every active leaf's root path the total db sums to 1.
    for &p in &view.s_points {
        if p == rates.p_t {
            continue;
        }
        let sum: f64 = shape.path_of(p).iter().map(|&v| rates.db[v]).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    // Conservation: restricted root mass is unchanged.
    let leak: f64 = view
        .s_points
        .iter()
        .map(|&p| rates.du[shape.leaf_node_of(p)])
        .sum();
    worst = worst.max(leak.abs());
    // Node identity: du of a node equals the sum over its non-full children.
    for v in 0..shape.n_nodes() {
        if view.nl[v] == 0 || shape.is_leaf(v) {
            continue;
        }
        let child_sum: f64 = shape.children(v).iter().map(|&c| rates.du[c]).sum();
        if v == 0 {
            worst = worst.max(child_sum.abs());
        } else {
            worst = worst.max((child_sum - rates.du[v]).abs());
        }
    }
    worst
}
