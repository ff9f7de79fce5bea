//! The online primal-dual fractional k-server on (weighted) HSTs.
//!
//! State is the vector of leaf masses `u` (mass 1 = fully evicted). A serve
//! drains the requested leaf to 0 while distributing its mass over the other
//! active leaves at the rates that keep every active dual constraint tight
//! and every node's restricted mass equal to the sum over its non-full
//! children. The integrator lands exactly on events: a receiver saturating
//! (leaves the active set, the phase ends) or the request reaching 0 (the
//! serve ends). Every committed step re-derives dual values from masses, so
//! the primal-dual relation and the node identity hold at every snapshot and
//! the streaming residuals measure genuine solver error.

pub mod newton;
pub mod rates;
pub mod view;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tree::HstShape;

use newton::{solve_step, StepKind, StepSolution};
use rates::{cross_check, rate_assignment, RateAssignment};
use view::{physical_masses, ActiveView};

/// Mass tolerance from the artifact contract.
pub const TAU_MASS: f64 = 1e-7;
/// Relative tolerance on the primal-dual relation.
pub const TAU_RELATION: f64 = 1e-6;
/// A request below this mass is treated as already served.
pub const NOOP_EPS: f64 = 1e-12;
const SAT_EPS: f64 = 1e-12;

/// Which formula family the run is certified against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    ExactHst,
    WeightedHst,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::ExactHst => write!(f, "exact"),
            Mode::WeightedHst => write!(f, "weighted"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FracError {
    TooManyServers { k: usize, n: usize },
    DuplicateLeaf { point: usize },
    UnknownLeaf { point: usize },
    RequestAlreadyServed { point: usize },
    SolverFailure(String),
}

impl fmt::Display for FracError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FracError::TooManyServers { k, n } => {
                write!(f, "need k < n, got k = {k} with {n} leaves")
            }
            FracError::DuplicateLeaf { point } => {
                write!(f, "initial configuration repeats leaf {point}")
            }
            FracError::UnknownLeaf { point } => write!(f, "no leaf for point {point}"),
            FracError::RequestAlreadyServed { point } => {
                write!(f, "leaf {point} carries no mass")
            }
            FracError::SolverFailure(msg) => write!(f, "integration failure: {msg}"),
        }
    }
}

impl std::error::Error for FracError {}

/// Fractional server state between requests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FractionalState {
    pub mode: Mode,
    pub k: usize,
    /// Requests served so far.
    pub t: usize,
    /// Mass out of cache per metric point.
    pub leaf_u: Vec<f64>,
    pub initial_config: Vec<usize>,
    /// Dual values at time 0 (feeds the initial-configuration dual credits).
    pub init_b: Vec<f64>,
}

/// Integration knobs.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Reporting steps per phase segment (each an exact solve).
    pub substeps: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { substeps: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ServeEvent {
    Reached0 { point: usize },
    Reached1 { point: usize },
}

/// One maximal interval of constant active set within a serve; the unit the
/// dual objective sums over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub s_points: Vec<usize>,
    pub delta_a: f64,
    pub b_start: Vec<f64>,
    pub b_end: Vec<f64>,
    /// Number of depths carrying a sibling raise during this phase.
    pub action_depths: usize,
}

/// One committed integration step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub delta_a: f64,
    /// Per-node change of the dual values over this step.
    pub b_delta: Vec<f64>,
    /// Per-node change of the restricted masses over this step.
    pub u_delta: Vec<f64>,
    pub tightness_residual: f64,
    pub identity_residual: f64,
    pub relation_residual: f64,
    pub mass_residual: f64,
}

/// Residual maxima over a serve (or a whole sequence).
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct ResidualStats {
    pub tightness: f64,
    pub identity: f64,
    pub relation: f64,
    pub mass: f64,
}

impl ResidualStats {
    pub fn absorb(&mut self, other: &ResidualStats) {
        self.tightness = self.tightness.max(other.tightness);
        self.identity = self.identity.max(other.identity);
        self.relation = self.relation.max(other.relation);
        self.mass = self.mass.max(other.mass);
    }

    pub fn within_contract(&self) -> bool {
        self.tightness <= TAU_MASS
            && self.identity <= TAU_MASS
            && self.relation <= TAU_RELATION
            && self.mass <= TAU_MASS
    }
}

/// Full record of one serve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServeTrace {
    pub t: usize,
    pub request: usize,
    pub noop: bool,
    pub phases: Vec<PhaseRecord>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<ServeEvent>,
    /// LP-objective cost: sum over nodes of 2 D(v) max(0, -delta u_v).
    pub primal_cost_lp: f64,
    /// Receiver-side cost: sum over nodes of 2 D(v) max(0, +delta u_v).
    pub primal_cost_receiver: f64,
    /// Sum over phases of (|S| - k) delta_a.
    pub dual_profit: f64,
    pub residuals: ResidualStats,
    /// Dual values at the start of the step, before the request joins S.
    pub b_step_start: Vec<f64>,
    /// Dual values after the serve.
    pub b_step_end: Vec<f64>,
    pub u_end: Vec<f64>,
    pub max_action_depths: usize,
}

/// Outcome of serving a whole sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceOutcome {
    pub traces: Vec<ServeTrace>,
    /// Leaf masses after each step; entry 0 is the initial state.
    pub u_history: Vec<Vec<f64>>,
    pub per_step_cost_lp: Vec<f64>,
    pub total_primal_lp: f64,
    pub total_primal_receiver: f64,
    pub total_dual_profit: f64,
    pub residuals: ResidualStats,
}

impl FractionalState {
    /// Places k servers on distinct leaves; everything else starts evicted.
    pub fn init(
        shape: &HstShape,
        mode: Mode,
        k: usize,
        initial_config: &[usize],
    ) -> Result<Self, FracError> {
        let n = shape.n_leaves();
        if k >= n || initial_config.len() != k {
            return Err(FracError::TooManyServers {
                k: initial_config.len().max(k),
                n,
            });
        }
        let mut leaf_u = vec![1.0; n];
        for &p in initial_config {
            if p >= n {
                return Err(FracError::UnknownLeaf { point: p });
            }
            if leaf_u[p] == 0.0 {
                return Err(FracError::DuplicateLeaf { point: p });
            }
            leaf_u[p] = 0.0;
        }
        let init_b = ActiveView::compute(shape, k, &leaf_u, None).b;
        Ok(FractionalState {
            mode,
            k,
            t: 0,
            leaf_u,
            initial_config: initial_config.to_vec(),
            init_b,
        })
    }

    pub fn view(&self, shape: &HstShape) -> ActiveView {
        ActiveView::compute(shape, self.k, &self.leaf_u, None)
    }

    /// Instantaneous rates for a hypothetical request at `p_t`.
    pub fn rates(&self, shape: &HstShape, p_t: usize) -> Result<RateAssignment, FracError> {
        let view = ActiveView::compute(shape, self.k, &self.leaf_u, Some(p_t));
        rate_assignment(shape, &view, p_t)
    }
}

/// Residuals of a committed step, measured from scratch rather than trusted
/// from the solver.
fn measure_residuals(
    shape: &HstShape,
    view_before: &ActiveView,
    after: &ActiveView,
    p_t: usize,
    da: f64,
    n_minus_k: f64,
    new_u: &[f64],
) -> ResidualStats {
    let mut tight: f64 = 0.0;
    for &p in &view_before.s_points {
        if p == p_t {
            continue;
        }
        let sum: f64 = shape
            .path_of(p)
            .iter()
            .map(|&v| after.b[v] - view_before.b[v])
            .sum();
        tight = tight.max((sum - da).abs());
    }
    // Node identity, re-summed directly over subtree point lists.
    let mut ident: f64 = 0.0;
    for v in 0..shape.n_nodes() {
        if shape.is_leaf(v) {
            continue;
        }
        let direct: f64 = shape
            .points_below(v)
            .iter()
            .filter(|&&p| after.in_s[p])
            .map(|&p| new_u[p])
            .sum();
        ident = ident.max((direct - after.ur[v]).abs());
    }
    // Relation u = f(b), relative.
    let kf = after.k as f64;
    let lambda = (1.0 + kf).ln();
    let mut rel: f64 = 0.0;
    for v in 1..shape.n_nodes() {
        if after.nl[v] == 0 {
            continue;
        }
        let f_of_b =
            after.nl[v] as f64 / kf * ((after.b[v] * lambda / (2.0 * shape.edge(v))).exp() - 1.0);
        rel = rel.max((f_of_b - after.ur[v]).abs() / after.ur[v].max(1.0));
    }
    let total: f64 = new_u.iter().sum();
    ResidualStats {
        tightness: tight,
        identity: ident,
        relation: rel,
        mass: (total - n_minus_k).abs(),
    }
}

struct ServeRun<'a> {
    shape: &'a HstShape,
    p_t: usize,
    opts: &'a ServeOptions,
    steps: Vec<StepRecord>,
    residuals: ResidualStats,
    n_minus_k: f64,
}

impl<'a> ServeRun<'a> {
    /// Commits a solved segment, splitting it into reporting substeps. The
    /// final substep re-solves with the segment's pin so events land exactly.
    fn commit_segment(
        &mut self,
        leaf_u: &mut Vec<f64>,
        view: &ActiveView,
        sol: &StepSolution,
        kind: StepKind,
        rates: &RateAssignment,
    ) -> Result<f64, FracError> {
        let substeps = self.opts.substeps.max(1);
        let mut committed = 0.0;
        for i in 1..=substeps {
            let target = sol.delta_a * i as f64 / substeps as f64;
            let view_now = view.with_masses(self.shape, leaf_u);
            let b_ref = view_now.b.clone();
            let step_rates =
                rate_assignment(self.shape, &view_now, self.p_t).unwrap_or_else(|_| rates.clone());
            let step_sol = if i == substeps {
                match kind {
                    StepKind::FixedDa(_) => solve_step(
                        self.shape,
                        view,
                        leaf_u,
                        self.p_t,
                        &b_ref,
                        StepKind::FixedDa(sol.delta_a - committed),
                        &step_rates,
                    )?,
                    pinned => solve_step(
                        self.shape,
                        view,
                        leaf_u,
                        self.p_t,
                        &b_ref,
                        pinned,
                        &step_rates,
                    )?,
                }
            } else {
                solve_step(
                    self.shape,
                    view,
                    leaf_u,
                    self.p_t,
                    &b_ref,
                    StepKind::FixedDa(target - committed),
                    &step_rates,
                )?
            };
            let da = step_sol.delta_a;
            let after = view_now.with_masses(self.shape, &step_sol.new_u);
            let res = measure_residuals(
                self.shape,
                &view_now,
                &after,
                self.p_t,
                da,
                self.n_minus_k,
                &step_sol.new_u,
            );
            // Monotonicity: the request drains, receivers fill.
            debug_assert!(step_sol.new_u[self.p_t] <= leaf_u[self.p_t] + 1e-9);
            debug_assert!(view_now
                .s_points
                .iter()
                .all(|&p| p == self.p_t || step_sol.new_u[p] >= leaf_u[p] - 1e-9));
            self.residuals.absorb(&res);
            self.steps.push(StepRecord {
                delta_a: da,
                b_delta: after.b.iter().zip(&view_now.b).map(|(a, b)| a - b).collect(),
                u_delta: after.ur.iter().zip(&view_now.ur).map(|(a, b)| a - b).collect(),
                tightness_residual: res.tightness,
                identity_residual: res.identity,
                relation_residual: res.relation,
                mass_residual: res.mass,
            });
            *leaf_u = step_sol.new_u;
            committed += da;
        }
        Ok(committed)
    }
}

/// Serves one request, mutating the state and returning the full trace.
pub fn serve_request(
    shape: &HstShape,
    state: &mut FractionalState,
    p_t: usize,
    opts: &ServeOptions,
) -> Result<ServeTrace, FracError> {
    let n = shape.n_leaves();
    if p_t >= n {
        return Err(FracError::UnknownLeaf { point: p_t });
    }
    state.t += 1;
    let t = state.t;
    let k = state.k;
    let b_step_start = state.view(shape).b;
    let u_phys_start = physical_masses(shape, &state.leaf_u);

    if state.leaf_u[p_t] <= NOOP_EPS {
        return Ok(ServeTrace {
            t,
            request: p_t,
            noop: true,
            phases: Vec::new(),
            steps: Vec::new(),
            events: Vec::new(),
            primal_cost_lp: 0.0,
            primal_cost_receiver: 0.0,
            dual_profit: 0.0,
            residuals: ResidualStats::default(),
            b_step_end: b_step_start.clone(),
            b_step_start,
            u_end: state.leaf_u.clone(),
            max_action_depths: 0,
        });
    }

    let n_minus_k = (n - k) as f64;
    let mut run = ServeRun {
        shape,
        p_t,
        opts,
        steps: Vec::new(),
        residuals: ResidualStats::default(),
        n_minus_k,
    };
    let mut leaf_u = state.leaf_u.clone();
    let mut phases: Vec<PhaseRecord> = Vec::new();
    let mut events: Vec<ServeEvent> = Vec::new();
    let mut dual_profit = 0.0;
    let mut max_h = 0;
    let mut guard = 0usize;

    'serve: loop {
        guard += 1;
        if guard > 10_000 {
            return Err(FracError::SolverFailure(
                "phase loop did not terminate".into(),
            ));
        }
        let view = ActiveView::compute(shape, k, &leaf_u, Some(p_t));
        // A serve with mass to move always has strictly more active leaves
        // than servers; anything else is a state-corruption bug.
        assert!(
            view.s_points.len() > k,
            "active set of size {} with k = {k}",
            view.s_points.len()
        );
        let rates = rate_assignment(shape, &view, p_t)?;
        let cc = cross_check(shape, &view, &rates);
        if cc > 1e-9 {
            return Err(FracError::SolverFailure(format!(
                "rate routes disagree by {cc:.3e}"
            )));
        }
        max_h = max_h.max(rates.action_depths.len());
        let phase_b_start = view.b.clone();
        let phase_points = view.s_points.clone();
        let phase_h = rates.action_depths.len();

        // Try to finish the serve within this phase.
        let terminal = solve_step(
            shape,
            &view,
            &leaf_u,
            p_t,
            &view.b,
            StepKind::PinTerminal,
            &rates,
        );
        let plan: Option<(StepKind, StepSolution)> = match terminal {
            Ok(sol) => {
                let crossers: Vec<usize> = view
                    .receivers(p_t)
                    .filter(|&q| sol.new_u[q] > 1.0 + SAT_EPS)
                    .collect();
                if crossers.is_empty() {
                    Some((StepKind::PinTerminal, sol))
                } else {
                    // The earliest saturation ends the phase instead.
                    let mut best: Option<(usize, StepSolution)> = None;
                    for &q in &crossers {
                        if let Ok(s) = solve_step(
                            shape,
                            &view,
                            &leaf_u,
                            p_t,
                            &view.b,
                            StepKind::PinSaturation(q),
                            &rates,
                        ) {
                            let valid = s.new_u[p_t] >= -SAT_EPS
                                && view
                                    .receivers(p_t)
                                    .all(|r| r == q || s.new_u[r] <= 1.0 + 1e-9);
                            if valid {
                                let better = match &best {
                                    None => true,
                                    Some((bq, bs)) => {
                                        s.delta_a < bs.delta_a - 1e-12
                                            || (s.delta_a < bs.delta_a + 1e-12 && q < *bq)
                                    }
                                };
                                if better {
                                    best = Some((q, s));
                                }
                            }
                        }
                    }
                    best.map(|(q, s)| (StepKind::PinSaturation(q), s))
                }
            }
            Err(_) => None,
        };

        match plan {
            Some((kind @ StepKind::PinTerminal, sol)) => {
                let da = run.commit_segment(&mut leaf_u, &view, &sol, kind, &rates)?;
                dual_profit += (phase_points.len() as f64 - k as f64) * da;
                let b_end = view.with_masses(shape, &leaf_u).b;
                phases.push(PhaseRecord {
                    s_points: phase_points,
                    delta_a: da,
                    b_start: phase_b_start,
                    b_end,
                    action_depths: phase_h,
                });
                events.push(ServeEvent::Reached0 { point: p_t });
                break 'serve;
            }
            Some((kind @ StepKind::PinSaturation(q), sol)) => {
                let da = run.commit_segment(&mut leaf_u, &view, &sol, kind, &rates)?;
                dual_profit += (phase_points.len() as f64 - k as f64) * da;
                let b_end = view.with_masses(shape, &leaf_u).b;
                phases.push(PhaseRecord {
                    s_points: phase_points,
                    delta_a: da,
                    b_start: phase_b_start,
                    b_end,
                    action_depths: phase_h,
                });
                events.push(ServeEvent::Reached1 { point: q });
                leaf_u[q] = 1.0;
                if leaf_u[p_t] <= NOOP_EPS {
                    leaf_u[p_t] = 0.0;
                    events.push(ServeEvent::Reached0 { point: p_t });
                    break 'serve;
                }
            }
            _ => {
                // Conservative fallback: advance by a fraction of the nearest
                // event estimate, halving on any trouble.
                let du_pt = rates.leaf_du(shape, p_t);
                let mut est = leaf_u[p_t] / (-du_pt).max(1e-300);
                for q in view.receivers(p_t) {
                    let r = rates.leaf_du(shape, q);
                    if r > 0.0 {
                        est = est.min((1.0 - leaf_u[q]) / r);
                    }
                }
                let mut da = est * 0.5;
                let mut done = false;
                for _ in 0..48 {
                    match solve_step(
                        shape,
                        &view,
                        &leaf_u,
                        p_t,
                        &view.b,
                        StepKind::FixedDa(da),
                        &rates,
                    ) {
                        Ok(sol)
                            if view.receivers(p_t).all(|r| sol.new_u[r] <= 1.0 + SAT_EPS)
                                && sol.new_u[p_t] >= -SAT_EPS =>
                        {
                            let committed = run.commit_segment(
                                &mut leaf_u,
                                &view,
                                &sol,
                                StepKind::FixedDa(da),
                                &rates,
                            )?;
                            dual_profit += (phase_points.len() as f64 - k as f64) * committed;
                            let b_end = view.with_masses(shape, &leaf_u).b;
                            phases.push(PhaseRecord {
                                s_points: phase_points.clone(),
                                delta_a: committed,
                                b_start: phase_b_start.clone(),
                                b_end,
                                action_depths: phase_h,
                            });
                            done = true;
                            break;
                        }
                        _ => da *= 0.5,
                    }
                }
                if !done {
                    return Err(FracError::SolverFailure(
                        "fallback stepping made no progress".into(),
                    ));
                }
                if leaf_u[p_t] <= NOOP_EPS {
                    leaf_u[p_t] = 0.0;
                    events.push(ServeEvent::Reached0 { point: p_t });
                    break 'serve;
                }
            }
        }
    }

    state.leaf_u = leaf_u;
    let u_phys_end = physical_masses(shape, &state.leaf_u);
    let mut cost_lp = 0.0;
    let mut cost_recv = 0.0;
    for v in 1..shape.n_nodes() {
        let d = u_phys_start[v] - u_phys_end[v];
        cost_lp += 2.0 * shape.edge(v) * d.max(0.0);
        cost_recv += 2.0 * shape.edge(v) * (-d).max(0.0);
    }
    let b_step_end = state.view(shape).b;
    let residuals = run.residuals;
    Ok(ServeTrace {
        t,
        request: p_t,
        noop: false,
        phases,
        steps: run.steps,
        events,
        primal_cost_lp: cost_lp,
        primal_cost_receiver: cost_recv,
        dual_profit,
        residuals,
        b_step_start,
        b_step_end,
        u_end: state.leaf_u.clone(),
        max_action_depths: max_h,
    })
}

/// Serves a whole request sequence.
pub fn serve_sequence(
    shape: &HstShape,
    state: &mut FractionalState,
    requests: &[usize],
    opts: &ServeOptions,
) -> Result<SequenceOutcome, FracError> {
    let mut traces = Vec::with_capacity(requests.len());
    let mut u_history = vec![state.leaf_u.clone()];
    let mut per_step = Vec::with_capacity(requests.len());
    let mut residuals = ResidualStats::default();
    let mut total_lp = 0.0;
    let mut total_recv = 0.0;
    let mut total_dual = 0.0;
    for &p_t in requests {
        let trace = serve_request(shape, state, p_t, opts)?;
        residuals.absorb(&trace.residuals);
        per_step.push(trace.primal_cost_lp);
        total_lp += trace.primal_cost_lp;
        total_recv += trace.primal_cost_receiver;
        total_dual += trace.dual_profit;
        u_history.push(state.leaf_u.clone());
        traces.push(trace);
    }
    Ok(SequenceOutcome {
        traces,
        u_history,
        per_step_cost_lp: per_step,
        total_primal_lp: total_lp,
        total_primal_receiver: total_recv,
        total_dual_profit: total_dual,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::balanced_hst;

    #[test]
    fn init_state_from_spec_example() {
        // n = 3, k = 2, servers on p1, p2: u = (0, 0, 1), root mass 1.
        let t = balanced_hst(3, 1, 8.0, 1.0);
        let st = FractionalState::init(t.shape(), Mode::ExactHst, 2, &[0, 1]).unwrap();
        assert_eq!(st.leaf_u, vec![0.0, 0.0, 1.0]);
        let phys = view::physical_masses(t.shape(), &st.leaf_u);
        assert!((phys[0] - 1.0).abs() < 1e-12);
        // Boundary dual value: the evicted leaf sits at b = 2 D.
        let full = t.shape().leaf_node_of(2);
        assert!((st.init_b[full] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn init_state_rejects_bad_configs() {
        let t = balanced_hst(3, 1, 8.0, 1.0);
        assert!(matches!(
            FractionalState::init(t.shape(), Mode::ExactHst, 3, &[0, 1, 2]),
            Err(FracError::TooManyServers { .. })
        ));
        assert!(matches!(
            FractionalState::init(t.shape(), Mode::ExactHst, 2, &[1, 1]),
            Err(FracError::DuplicateLeaf { point: 1 })
        ));
    }

    #[test]
    fn mass_sums_to_n_minus_k_after_init() {
        let t = balanced_hst(2, 3, 8.0, 64.0);
        for k in 1..8 {
            let cfg: Vec<usize> = (0..k).collect();
            let st = FractionalState::init(t.shape(), Mode::ExactHst, k, &cfg).unwrap();
            let sum: f64 = st.leaf_u.iter().sum();
            assert!((sum - (8 - k) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn serve_uniform_star_splits_mass_evenly() {
        let t = balanced_hst(3, 1, 8.0, 1.0);
        let mut st = FractionalState::init(t.shape(), Mode::ExactHst, 2, &[0, 1]).unwrap();
        let trace = serve_request(t.shape(), &mut st, 2, &ServeOptions::default()).unwrap();
        assert!(!trace.noop);
        assert_eq!(st.leaf_u[2], 0.0);
        assert!((st.leaf_u[0] - 0.5).abs() < 1e-9);
        assert!((st.leaf_u[1] - 0.5).abs() < 1e-9);
        assert!(trace.residuals.within_contract());
        // On a star both cost forms agree and equal the moved mass times 2 D.
        assert!((trace.primal_cost_lp - 2.0).abs() < 1e-9);
        assert!((trace.primal_cost_receiver - 2.0).abs() < 1e-9);
        assert!(trace.events.contains(&ServeEvent::Reached0 { point: 2 }));
    }

    #[test]
    fn repeated_request_is_noop() {
        let t = balanced_hst(3, 1, 8.0, 1.0);
        let mut st = FractionalState::init(t.shape(), Mode::ExactHst, 2, &[0, 1]).unwrap();
        serve_request(t.shape(), &mut st, 2, &ServeOptions::default()).unwrap();
        let u = st.leaf_u.clone();
        let trace = serve_request(t.shape(), &mut st, 2, &ServeOptions::default()).unwrap();
        assert!(trace.noop);
        assert_eq!(trace.primal_cost_lp, 0.0);
        assert_eq!(st.leaf_u, u);
    }

    #[test]
    fn requests_in_initial_config_cost_nothing() {
        let t = balanced_hst(2, 2, 8.0, 8.0);
        let mut st = FractionalState::init(t.shape(), Mode::ExactHst, 2, &[0, 1]).unwrap();
        let out =
            serve_sequence(t.shape(), &mut st, &[0, 1, 0, 1], &ServeOptions::default()).unwrap();
        assert_eq!(out.total_primal_lp, 0.0);
        assert_eq!(out.total_dual_profit, 0.0);
    }

    #[test]
    fn saturation_event_updates_active_set() {
        // k = 1 on a 3-star: serving p2 from {p0} pushes p0 to 1 exactly when
        // p2 reaches 0 (the only receiver absorbs everything).
        let t = balanced_hst(3, 1, 8.0, 1.0);
        let mut st = FractionalState::init(t.shape(), Mode::ExactHst, 1, &[0]).unwrap();
        let trace = serve_request(t.shape(), &mut st, 1, &ServeOptions::default()).unwrap();
        assert_eq!(st.leaf_u[1], 0.0);
        assert!((st.leaf_u[0] - 1.0).abs() < 1e-9);
        assert!(trace.residuals.within_contract());
        // Serving a full leaf afterwards works: p0 is full, request it back.
        let trace2 = serve_request(t.shape(), &mut st, 0, &ServeOptions::default()).unwrap();
        assert_eq!(st.leaf_u[0], 0.0);
        assert!(trace2.residuals.within_contract());
    }

    #[test]
    fn deep_tree_serve_respects_invariants() {
        let t = balanced_hst(2, 3, 8.0, 64.0);
        let mut st = FractionalState::init(t.shape(), Mode::ExactHst, 3, &[0, 3, 5]).unwrap();
        let out = serve_sequence(
            t.shape(),
            &mut st,
            &[7, 2, 0, 6, 1, 4, 7, 3],
            &ServeOptions::default(),
        )
        .unwrap();
        assert!(
            out.residuals.within_contract(),
            "residuals {:?}",
            out.residuals
        );
        let total: f64 = st.leaf_u.iter().sum();
        assert!((total - 5.0).abs() < TAU_MASS);
        for &u in &st.leaf_u {
            assert!((-1e-9..=1.0 + 1e-9).contains(&u));
        }
    }
}
