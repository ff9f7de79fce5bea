//! Exact constrained steps of the serve dynamics.
//!
//! Within one phase (constant active set) the flow over a span of virtual
//! time `da` is fully determined by its endpoint conditions: every receiver's
//! root-path dual sum grows by exactly `da`, the active mass total is
//! conserved, and internal quantities follow from the leaf masses. Solving
//! those equations with Newton's method gives the endpoint directly; the only
//! discretization anywhere is the choice of reporting points. Event landings
//! (request mass reaching 0, a receiver reaching 1) swap the pinned
//! coordinate for `da` and solve the same system.

use crate::tree::HstShape;

use super::rates::RateAssignment;
use super::view::{b_from_mass, ActiveView};
use super::FracError;

/// What a single solve pins down.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepKind {
    /// Advance by exactly this much virtual time.
    FixedDa(f64),
    /// Land the request mass on 0; `da` becomes an unknown.
    PinTerminal,
    /// Land this receiver's mass on 1; `da` becomes an unknown.
    PinSaturation(usize),
}

#[derive(Debug, Clone)]
pub struct StepSolution {
    /// Full leaf-mass vector at the endpoint (inactive leaves untouched).
    pub new_u: Vec<f64>,
    pub delta_a: f64,
    /// Final max-norm of the equation residuals.
    pub residual: f64,
}

/// Dense LU with partial pivoting; `a` is row-major `n x n`, `rhs` length `n`.
/// Returns false on (numerical) singularity.
fn lu_solve(a: &mut [f64], n: usize, rhs: &mut [f64]) -> bool {
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return false;
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            rhs.swap(col, piv);
        }
        let d = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            a[r * n + col] = 0.0;
            for c in (col + 1)..n {
                a[r * n + c] -= f * a[col * n + c];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = rhs[col];
        for c in (col + 1)..n {
            v -= a[col * n + c] * rhs[c];
        }
        rhs[col] = v / a[col * n + col];
    }
    true
}

struct System<'a> {
    shape: &'a HstShape,
    view: &'a ActiveView,
    /// Reference dual values the tightness equations difference against.
    b_ref: &'a [f64],
    /// Receivers in order (rows 0..s-2 of the system).
    receivers: Vec<usize>,
    /// Points whose mass is a variable, in variable order.
    var_points: Vec<usize>,
    /// Pinned (point, value), if any.
    pin: Option<(usize, f64)>,
    da_fixed: Option<f64>,
    mass_target: f64,
    kf: f64,
    lambda: f64,
}

impl<'a> System<'a> {
    fn dim(&self) -> usize {
        self.var_points.len() + usize::from(self.da_fixed.is_none())
    }

    fn unpack(&self, z: &[f64], leaf_u: &[f64]) -> (Vec<f64>, f64) {
        let mut u = leaf_u.to_vec();
        for (i, &p) in self.var_points.iter().enumerate() {
            u[p] = z[i];
        }
        if let Some((p, v)) = self.pin {
            u[p] = v;
        }
        let da = self.da_fixed.unwrap_or_else(|| z[self.dim() - 1]);
        (u, da)
    }

    /// Restricted node masses for a candidate leaf vector.
    fn node_masses(&self, u: &[f64]) -> Vec<f64> {
        let shape = self.shape;
        let mut m = vec![0.0; shape.n_nodes()];
        for v in (0..shape.n_nodes()).rev() {
            if let Some(p) = shape.leaf_point(v) {
                if self.view.in_s[p] {
                    m[v] = u[p];
                }
            } else {
                m[v] = shape.children(v).iter().map(|&c| m[c]).sum();
            }
        }
        m
    }

    fn residual(&self, z: &[f64], leaf_u: &[f64]) -> Vec<f64> {
        let shape = self.shape;
        let (u, da) = self.unpack(z, leaf_u);
        let mass = self.node_masses(&u);
        let mut r = Vec::with_capacity(self.dim());
        for &p in &self.receivers {
            let mut acc = -da;
            for &v in shape.path_of(p) {
                let b = b_from_mass(mass[v], self.view.nl[v], shape.edge(v), self.kf);
                acc += b - self.b_ref[v];
            }
            r.push(acc);
        }
        let total: f64 = self.view.s_points.iter().map(|&p| u[p]).sum();
        r.push(total - self.mass_target);
        r
    }

    fn jacobian(&self, z: &[f64], leaf_u: &[f64]) -> Vec<f64> {
        let shape = self.shape;
        let (u, _) = self.unpack(z, leaf_u);
        let mass = self.node_masses(&u);
        let dim = self.dim();
        let mut jac = vec![0.0; dim * dim];
        // Per-node sensitivity of its dual value to any active mass below it.
        let mut w = vec![0.0; shape.n_nodes()];
        for v in 1..shape.n_nodes() {
            if self.view.nl[v] > 0 {
                w[v] = 2.0 * shape.edge(v) * self.kf
                    / (self.lambda * (self.view.nl[v] as f64 + self.kf * mass[v]));
            }
        }
        let mut var_of = vec![usize::MAX; shape.n_leaves()];
        for (i, &p) in self.var_points.iter().enumerate() {
            var_of[p] = i;
        }
        for (row, &p) in self.receivers.iter().enumerate() {
            for &v in shape.path_of(p) {
                if w[v] == 0.0 {
                    continue;
                }
                for &q in shape.points_below(v) {
                    if self.view.in_s[q] && var_of[q] != usize::MAX {
                        jac[row * dim + var_of[q]] += w[v];
                    }
                }
            }
            if self.da_fixed.is_none() {
                jac[row * dim + (dim - 1)] = -1.0;
            }
        }
        let last = self.receivers.len();
        for i in 0..self.var_points.len() {
            jac[last * dim + i] = 1.0;
        }
        jac
    }
}

/// Solves one constrained step. `b_ref` is the dual snapshot the tightness
/// accumulates from (the start of this micro-step).
pub fn solve_step(
    shape: &HstShape,
    view: &ActiveView,
    leaf_u: &[f64],
    p_t: usize,
    b_ref: &[f64],
    kind: StepKind,
    rates: &RateAssignment,
) -> Result<StepSolution, FracError> {
    let receivers: Vec<usize> = view.receivers(p_t).collect();
    let (pin, da_fixed) = match kind {
        StepKind::FixedDa(da) => (None, Some(da)),
        StepKind::PinTerminal => (Some((p_t, 0.0)), None),
        StepKind::PinSaturation(q) => (Some((q, 1.0)), None),
    };
    let var_points: Vec<usize> = view
        .s_points
        .iter()
        .copied()
        .filter(|&p| pin.map_or(true, |(pp, _)| pp != p))
        .collect();
    let mass_target: f64 = view.s_points.iter().map(|&p| leaf_u[p]).sum();
    let kf = view.k as f64;
    let sys = System {
        shape,
        view,
        b_ref,
        receivers,
        var_points,
        pin,
        da_fixed,
        mass_target,
        kf,
        lambda: (1.0 + kf).ln(),
    };

    // Initial guess from the instantaneous rates.
    let da_guess = match kind {
        StepKind::FixedDa(da) => da,
        StepKind::PinTerminal => {
            let r = rates.leaf_du(shape, p_t);
            if r < -1e-300 {
                (leaf_u[p_t] / -r).min(1e12)
            } else {
                0.0
            }
        }
        StepKind::PinSaturation(q) => {
            let r = rates.leaf_du(shape, q);
            if r > 1e-300 {
                ((1.0 - leaf_u[q]) / r).min(1e12)
            } else {
                0.0
            }
        }
    };
    let dim = sys.dim();
    let mut z = Vec::with_capacity(dim);
    for &p in &sys.var_points {
        let guess = leaf_u[p] + rates.leaf_du(shape, p) * da_guess;
        z.push(guess.clamp(0.0, 1.5));
    }
    if sys.da_fixed.is_none() {
        z.push(da_guess);
    }

    let scale = 1.0 + shape.level_len(1);
    let tol = 1e-12 * scale;
    let mut r = sys.residual(&z, leaf_u);
    let mut rnorm = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    for _ in 0..60 {
        if rnorm <= tol {
            let (u, da) = sys.unpack(&z, leaf_u);
            if da < -1e-9 * scale {
                return Err(FracError::SolverFailure("negative virtual time".into()));
            }
            return Ok(StepSolution {
                new_u: u,
                delta_a: da.max(0.0),
                residual: rnorm,
            });
        }
        let mut jac = sys.jacobian(&z, leaf_u);
        let mut dz: Vec<f64> = r.iter().map(|x| -x).collect();
        if !lu_solve(&mut jac, dim, &mut dz) {
            return Err(FracError::SolverFailure("singular step system".into()));
        }
        // Damped update: keep masses in the log-domain and require progress.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + step * d).collect();
            let domain_ok = sys
                .var_points
                .iter()
                .enumerate()
                .all(|(i, _)| trial[i] >= -1e-12 && trial[i] <= 2.0);
            if domain_ok {
                let tr = sys.residual(&trial, leaf_u);
                let tn = tr.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if tn < rnorm || tn <= tol {
                    z = trial;
                    r = tr;
                    rnorm = tn;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(FracError::SolverFailure("line search stalled".into()));
        }
    }
    Err(FracError::SolverFailure(format!(
        "no convergence, residual {rnorm:.3e}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frac::rates::rate_assignment;
    use crate::tree::balanced_hst;

    #[test]
    fn terminal_solve_on_uniform_star() {
        // n = 3, k = 2, u = (0, 0, 1), serve point 2: by symmetry the unit
        // mass splits evenly over the two receivers.
        let t = balanced_hst(3, 1, 8.0, 1.0);
        let u = vec![0.0, 0.0, 1.0];
        let view = ActiveView::compute(t.shape(), 2, &u, Some(2));
        let rates = rate_assignment(t.shape(), &view, 2).unwrap();
        let sol = solve_step(
            t.shape(),
            &view,
            &u,
            2,
            &view.b,
            StepKind::PinTerminal,
            &rates,
        )
        .unwrap();
        assert_eq!(sol.new_u[2], 0.0);
        assert!((sol.new_u[0] - 0.5).abs() < 1e-10);
        assert!((sol.new_u[1] - 0.5).abs() < 1e-10);
        assert!(sol.delta_a > 0.0);
    }

    #[test]
    fn fixed_da_conserves_mass_and_tightness() {
        let t = balanced_hst(2, 2, 8.0, 8.0);
        let u = vec![0.6, 0.4, 0.3, 0.7];
        let view = ActiveView::compute(t.shape(), 2, &u, Some(0));
        let rates = rate_assignment(t.shape(), &view, 0).unwrap();
        let da = 0.05;
        let sol = solve_step(
            t.shape(),
            &view,
            &u,
            0,
            &view.b,
            StepKind::FixedDa(da),
            &rates,
        )
        .unwrap();
        let total_before: f64 = u.iter().sum();
        let total_after: f64 = sol.new_u.iter().sum();
        assert!((total_before - total_after).abs() < 1e-10);
        // Tightness against the reference snapshot for one receiver.
        let after = ActiveView::compute(t.shape(), 2, &sol.new_u, Some(0));
        let p = 3usize;
        let sum: f64 = t
            .shape()
            .path_of(p)
            .iter()
            .map(|&v| after.b[v] - view.b[v])
            .sum();
        assert!((sum - da).abs() < 1e-10);
    }

    #[test]
    fn saturation_pin_lands_exactly_on_one() {
        let t = balanced_hst(3, 1, 8.0, 1.0);
        // Receiver 0 is close to full and will hit 1 before the serve ends.
        let u = vec![0.95, 0.05, 1.0];
        let view = ActiveView::compute(t.shape(), 1, &u, Some(2));
        let rates = rate_assignment(t.shape(), &view, 2).unwrap();
        let sol = solve_step(
            t.shape(),
            &view,
            &u,
            2,
            &view.b,
            StepKind::PinSaturation(0),
            &rates,
        )
        .unwrap();
        assert_eq!(sol.new_u[0], 1.0);
        assert!(sol.new_u[2] > 0.0 && sol.new_u[2] < 1.0);
    }
}
