//! Per-node quantities derived from leaf masses and the active set.
//!
//! The active set S holds every leaf with mass below 1 plus the leaf being
//! served. Restricted masses and leaf counts ignore everything outside S;
//! dual values are recovered from the primal/dual relation, so the relation
//! and the node identity hold by construction at every snapshot.

use crate::tree::HstShape;

/// Dual value from restricted mass: `b = (2 D / ln(1+k)) * ln(1 + k u / m)`.
pub fn b_from_mass(u: f64, m: usize, edge: f64, k: f64) -> f64 {
    debug_assert!(m > 0);
    2.0 * edge / (1.0 + k).ln() * (1.0 + k * u / m as f64).ln()
}

/// Snapshot of restricted state for one phase of a serve.
#[derive(Debug, Clone)]
pub struct ActiveView {
    pub k: usize,
    /// Active points, ascending.
    pub s_points: Vec<usize>,
    pub in_s: Vec<bool>,
    /// Per node: number of active leaves below.
    pub nl: Vec<usize>,
    /// Per node: restricted mass (sum of active leaf masses below).
    pub ur: Vec<f64>,
    /// Per node: dual value; 0 at the root (which has none), `2 D(v)` at
    /// saturated nodes.
    pub b: Vec<f64>,
}

impl ActiveView {
    /// Builds the view for the given leaf masses. `include` forces the
    /// requested leaf into S even while its mass is still 1.
    pub fn compute(shape: &HstShape, k: usize, leaf_u: &[f64], include: Option<usize>) -> Self {
        let n = shape.n_leaves();
        assert_eq!(leaf_u.len(), n);
        let mut in_s = vec![false; n];
        let mut s_points = Vec::new();
        for p in 0..n {
            if leaf_u[p] < 1.0 || include == Some(p) {
                in_s[p] = true;
                s_points.push(p);
            }
        }
        let n_nodes = shape.n_nodes();
        let mut nl = vec![0usize; n_nodes];
        let mut ur = vec![0.0; n_nodes];
        for v in (0..n_nodes).rev() {
            if let Some(p) = shape.leaf_point(v) {
                if in_s[p] {
                    nl[v] = 1;
                    ur[v] = leaf_u[p];
                }
            } else {
                for &c in shape.children(v) {
                    nl[v] += nl[c];
                    ur[v] += ur[c];
                }
            }
        }
        let kf = k as f64;
        let mut b = vec![0.0; n_nodes];
        for v in 1..n_nodes {
            b[v] = if nl[v] == 0 {
                2.0 * shape.edge(v)
            } else {
                b_from_mass(ur[v], nl[v], shape.edge(v), kf)
            };
        }
        ActiveView {
            k,
            s_points,
            in_s,
            nl,
            ur,
            b,
        }
    }

    /// Active points other than the request.
    pub fn receivers(&self, p_t: usize) -> impl Iterator<Item = usize> + '_ {
        self.s_points.iter().copied().filter(move |&p| p != p_t)
    }

    /// Same membership, fresh masses. Keeps a saturating receiver inside the
    /// set so dual values stay continuous up to the phase boundary.
    pub fn with_masses(&self, shape: &HstShape, leaf_u: &[f64]) -> Self {
        let n_nodes = shape.n_nodes();
        let mut ur = vec![0.0; n_nodes];
        for v in (0..n_nodes).rev() {
            if let Some(p) = shape.leaf_point(v) {
                if self.in_s[p] {
                    ur[v] = leaf_u[p];
                }
            } else {
                for &c in shape.children(v) {
                    ur[v] += ur[c];
                }
            }
        }
        let kf = self.k as f64;
        let mut b = vec![0.0; n_nodes];
        for v in 1..n_nodes {
            b[v] = if self.nl[v] == 0 {
                2.0 * shape.edge(v)
            } else {
                b_from_mass(ur[v], self.nl[v], shape.edge(v), kf)
            };
        }
        ActiveView {
            k: self.k,
            s_points: self.s_points.clone(),
            in_s: self.in_s.clone(),
            nl: self.nl.clone(),
            ur,
            b,
        }
    }
}

/// Unrestricted subtree masses (all leaves, saturated or not), used by the
/// LP-form cost accounting.
pub fn physical_masses(shape: &HstShape, leaf_u: &[f64]) -> Vec<f64> {
    let n_nodes = shape.n_nodes();
    let mut u = vec![0.0; n_nodes];
    for v in (0..n_nodes).rev() {
        if let Some(p) = shape.leaf_point(v) {
            u[v] = leaf_u[p];
        } else {
            u[v] = shape.children(v).iter().map(|&c| u[c]).sum();
        }
    }
    u
}
