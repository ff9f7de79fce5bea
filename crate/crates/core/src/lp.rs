//! Objectives, feasibility checks, and competitive-ratio certificates.
//!
//! The primal objective is the LP form: per step, each node pays twice its
//! parent-edge length per unit of mass leaving its subtree. The dual ledger
//! keeps one entry per phase (a maximal constant-active-set interval of a
//! serve) in time order, plus the initial-configuration credits. Constraint
//! checks run against recorded trajectories and report every violation with
//! witnesses; certificates compare the two objectives against the stated
//! ratio bounds.
//!
//! Constraint bookkeeping for leaves outside the active set: a phase's dual
//! increment is matched against the dual-value motion *during that phase* of
//! the leaves the set credits. Saturated leaves receive no credit and no
//! tightness requirement; the re-derivation jumps at phase boundaries are
//! attributed to the boundary event rather than to either phase. The strict
//! per-step residual (boundary jumps included) is still measured and
//! reported so the gap is visible rather than hidden.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::frac::view::physical_masses;
use crate::frac::{FractionalState, Mode, SequenceOutcome, ServeTrace, TAU_MASS};
use crate::tree::HstShape;

/// Tolerance on accumulated dual tightness, absolute.
pub const TAU_DUAL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum LpError {
    /// A served request retained mass at the end of its step.
    InfeasiblePrimal { t: usize, retained: f64 },
    /// Positive primal cost against a zero dual value.
    ZeroDual { primal: f64 },
}

impl fmt::Display for LpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LpError::InfeasiblePrimal { t, retained } => {
                write!(f, "request at step {t} retained mass {retained:.3e}")
            }
            LpError::ZeroDual { primal } => {
                write!(f, "primal cost {primal} with zero dual value")
            }
        }
    }
}

impl std::error::Error for LpError {}

/// One dual increment: the set variable of a phase.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub t: usize,
    pub s_points: Vec<usize>,
    pub delta_a: f64,
}

/// Accumulated dual bookkeeping for a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualLedger {
    pub n: usize,
    pub k: usize,
    pub entries: Vec<LedgerEntry>,
    /// Initial-configuration credit per point (0 for initially covered ones).
    pub gamma: Vec<f64>,
    pub initial_config: Vec<usize>,
    /// Dual values at time 0.
    pub init_b: Vec<f64>,
}

impl DualLedger {
    /// Builds the ledger from a finished run.
    pub fn from_run(shape: &HstShape, state: &FractionalState, traces: &[ServeTrace]) -> Self {
        let n = shape.n_leaves();
        let mut gamma = vec![0.0; n];
        for p in 0..n {
            if !state.initial_config.contains(&p) {
                gamma[p] = shape.path_of(p).iter().map(|&v| state.init_b[v]).sum();
            }
        }
        let mut entries = Vec::new();
        for trace in traces {
            for phase in &trace.phases {
                entries.push(LedgerEntry {
                    t: trace.t,
                    s_points: phase.s_points.clone(),
                    delta_a: phase.delta_a,
                });
            }
        }
        DualLedger {
            n,
            k: state.k,
            entries,
            gamma,
            initial_config: state.initial_config.clone(),
            init_b: state.init_b.clone(),
        }
    }
}

/// Dual objective split into its serve part and the initial credits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DualObjective {
    pub serve_part: f64,
    pub gamma_part: f64,
}

impl DualObjective {
    pub fn total(&self) -> f64 {
        self.serve_part + self.gamma_part
    }
}

/// Sum over entries of `(|S| - k) delta_a`, plus the gamma credits.
pub fn dual_objective(ledger: &DualLedger) -> DualObjective {
    let serve_part = ledger
        .entries
        .iter()
        .map(|e| (e.s_points.len() as f64 - ledger.k as f64) * e.delta_a)
        .sum();
    DualObjective {
        serve_part,
        gamma_part: ledger.gamma.iter().sum(),
    }
}

/// LP-form primal objective over a recorded trajectory.
///
/// `u_history[t]` holds the leaf masses after step `t` (entry 0 is initial).
/// Fails if any served request retained mass beyond the mass tolerance.
pub fn primal_objective(
    shape: &HstShape,
    u_history: &[Vec<f64>],
    requests: &[usize],
) -> Result<f64, LpError> {
    assert_eq!(u_history.len(), requests.len() + 1);
    let mut cost = 0.0;
    for t in 1..u_history.len() {
        let retained = u_history[t][requests[t - 1]];
        if retained > TAU_MASS {
            return Err(LpError::InfeasiblePrimal { t, retained });
        }
        let before = physical_masses(shape, &u_history[t - 1]);
        let after = physical_masses(shape, &u_history[t]);
        for v in 1..shape.n_nodes() {
            cost += 2.0 * shape.edge(v) * (before[v] - after[v]).max(0.0);
        }
    }
    Ok(cost)
}

/// Violations of the primal constraints on a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrimalViolation {
    MassOutOfRange {
        t: usize,
        point: usize,
        value: f64,
    },
    TotalMassDrift {
        t: usize,
        total: f64,
        expected: f64,
    },
    /// Some m smallest masses sum below m - k: a set constraint fails.
    CoverageShortfall {
        t: usize,
        set_size: usize,
        mass: f64,
    },
    RequestRetainedMass {
        t: usize,
        point: usize,
        value: f64,
    },
}

/// Checks mass bounds, conservation, the family of set covering constraints,
/// and the served-request gate at every recorded step.
pub fn check_primal_feasibility(
    u_history: &[Vec<f64>],
    requests: &[usize],
    n: usize,
    k: usize,
) -> Vec<PrimalViolation> {
    let mut out = Vec::new();
    let expected = (n - k) as f64;
    for (t, u) in u_history.iter().enumerate() {
        for (p, &m) in u.iter().enumerate() {
            if !(-TAU_MASS..=1.0 + TAU_MASS).contains(&m) {
                out.push(PrimalViolation::MassOutOfRange {
                    t,
                    point: p,
                    value: m,
                });
            }
        }
        let total: f64 = u.iter().sum();
        if (total - expected).abs() > TAU_MASS {
            out.push(PrimalViolation::TotalMassDrift { t, total, expected });
        }
        // Worst set of each size is the one keeping the smallest masses.
        let mut sorted = u.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prefix = 0.0;
        for (i, &m) in sorted.iter().enumerate() {
            prefix += m;
            let size = i + 1;
            if size > k && prefix < (size - k) as f64 - TAU_MASS {
                out.push(PrimalViolation::CoverageShortfall {
                    t,
                    set_size: size,
                    mass: prefix,
                });
            }
        }
        if t >= 1 {
            let p_t = requests[t - 1];
            if u[p_t] > TAU_MASS {
                out.push(PrimalViolation::RequestRetainedMass {
                    t,
                    point: p_t,
                    value: u[p_t],
                });
            }
        }
    }
    out
}

/// Violations of the dual constraints on a recorded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DualViolation {
    /// b_v beyond twice its edge length.
    CapExceeded {
        t: usize,
        node: usize,
        b: f64,
        cap: f64,
    },
    NegativeDual {
        t: usize,
        node: usize,
        b: f64,
    },
    NegativeIncrement {
        t: usize,
        delta_a: f64,
    },
    /// Accumulated credited increments outran the dual-value motion for a leaf.
    TightnessBroken {
        t: usize,
        point: usize,
        residual: f64,
    },
    /// Initial credit exceeds the dual values backing it.
    GammaTooLarge {
        point: usize,
        gamma: f64,
        available: f64,
    },
}

/// Summary of a dual feasibility check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualCheck {
    pub violations: Vec<DualViolation>,
    /// Largest in-phase tightness deviation over credited leaves (both signs).
    pub max_tightness_residual: f64,
    /// Largest literal per-step residual with boundary re-derivations
    /// included; positive values witness the gap the phase bookkeeping
    /// attributes to saturation events.
    pub strict_step_residual: f64,
}

/// Checks the dual constraints over full serve traces.
pub fn check_dual_feasibility(
    shape: &HstShape,
    ledger: &DualLedger,
    traces: &[ServeTrace],
) -> DualCheck {
    let mut violations = Vec::new();
    let mut max_tight: f64 = 0.0;
    let mut strict: f64 = f64::NEG_INFINITY;
    for trace in traces {
        let t = trace.t;
        for phase in &trace.phases {
            if phase.delta_a < -1e-15 {
                violations.push(DualViolation::NegativeIncrement {
                    t,
                    delta_a: phase.delta_a,
                });
            }
            for snapshot in [&phase.b_start, &phase.b_end] {
                for v in 1..shape.n_nodes() {
                    let cap = 2.0 * shape.edge(v);
                    if snapshot[v] > cap + 1e-7 * shape.edge(v) {
                        violations.push(DualViolation::CapExceeded {
                            t,
                            node: v,
                            b: snapshot[v],
                            cap,
                        });
                    }
                    if snapshot[v] < -1e-12 {
                        violations.push(DualViolation::NegativeDual {
                            t,
                            node: v,
                            b: snapshot[v],
                        });
                    }
                }
            }
        }
        // Per-leaf accumulated tightness over the phases crediting it.
        for p in 0..shape.n_leaves() {
            if p == trace.request {
                continue;
            }
            let mut acc = 0.0;
            let mut credited = false;
            for phase in &trace.phases {
                if phase.s_points.binary_search(&p).is_ok() {
                    credited = true;
                    let moved: f64 = shape
                        .path_of(p)
                        .iter()
                        .map(|&v| phase.b_end[v] - phase.b_start[v])
                        .sum();
                    acc += phase.delta_a - moved;
                }
            }
            if credited {
                max_tight = max_tight.max(acc.abs());
                if acc > TAU_DUAL {
                    violations.push(DualViolation::TightnessBroken {
                        t,
                        point: p,
                        residual: acc,
                    });
                }
            }
            // Literal step residual: all credited increments against the
            // net step motion, jumps included.
            let credited_a: f64 = trace
                .phases
                .iter()
                .filter(|ph| ph.s_points.binary_search(&p).is_ok())
                .map(|ph| ph.delta_a)
                .sum();
            let net: f64 = shape
                .path_of(p)
                .iter()
                .map(|&v| trace.b_step_end[v] - trace.b_step_start[v])
                .sum();
            strict = strict.max(credited_a - net);
        }
    }
    for p in 0..ledger.n {
        let available: f64 = shape.path_of(p).iter().map(|&v| ledger.init_b[v]).sum();
        if ledger.gamma[p] > available + 1e-9 {
            violations.push(DualViolation::GammaTooLarge {
                point: p,
                gamma: ledger.gamma[p],
                available,
            });
        }
    }
    DualCheck {
        violations,
        max_tightness_residual: max_tight,
        strict_step_residual: if strict.is_finite() { strict } else { 0.0 },
    }
}

/// Result of a ratio certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertResult {
    pub mode: Mode,
    pub k: usize,
    pub ell: usize,
    pub primal: f64,
    pub dual: f64,
    /// P / D, or 0 when both vanish.
    pub achieved: f64,
    pub bound: f64,
    pub pass: bool,
    /// Weighted mode only: the tighter bound using the observed number of
    /// raise depths instead of the full tree depth (reported, not enforced).
    pub bound_h: Option<f64>,
    pub pass_h: Option<bool>,
}

/// Certified ratio bound for the given mode.
pub fn ratio_bound(mode: Mode, k: usize, ell: usize) -> f64 {
    let lk = (1.0 + k as f64).ln();
    match mode {
        Mode::ExactHst => 15.0 * lk * lk,
        Mode::WeightedHst => 4.0 * ell as f64 * lk,
    }
}

/// Compares primal cost against the certified multiple of the dual value.
///
/// `max_h` is the largest number of raise depths observed in any phase; pass
/// `None` when unknown.
pub fn certify_ratio(
    primal: f64,
    dual: f64,
    k: usize,
    ell: usize,
    mode: Mode,
    max_h: Option<usize>,
) -> Result<CertResult, LpError> {
    assert!(primal >= -1e-12 && dual >= -1e-12);
    let bound = ratio_bound(mode, k, ell);
    if dual <= 0.0 {
        if primal > 1e-9 {
            return Err(LpError::ZeroDual { primal });
        }
        return Ok(CertResult {
            mode,
            k,
            ell,
            primal,
            dual,
            achieved: 0.0,
            bound,
            pass: true,
            bound_h: None,
            pass_h: None,
        });
    }
    let achieved = primal / dual;
    let pass = primal <= bound * dual * (1.0 + 1e-6);
    let (bound_h, pass_h) = match (mode, max_h) {
        (Mode::WeightedHst, Some(h)) => {
            let bh = 4.0 * h.max(1) as f64 * (1.0 + k as f64).ln();
            (Some(bh), Some(primal <= bh * dual * (1.0 + 1e-6)))
        }
        _ => (None, None),
    };
    Ok(CertResult {
        mode,
        k,
        ell,
        primal,
        dual,
        achieved,
        bound,
        pass,
        bound_h,
        pass_h,
    })
}

/// Convenience: ledger, objectives, checks and certificate for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunCertificate {
    pub ledger: DualLedger,
    pub dual: DualObjective,
    pub primal_lp: f64,
    pub cert: CertResult,
    pub primal_violations: Vec<PrimalViolation>,
    pub dual_check: DualCheck,
}

/// Runs the full certification pipeline over a finished sequence.
pub fn certify_run(
    shape: &HstShape,
    state: &FractionalState,
    outcome: &SequenceOutcome,
    requests: &[usize],
) -> Result<RunCertificate, LpError> {
    let ledger = DualLedger::from_run(shape, state, &outcome.traces);
    let dual = dual_objective(&ledger);
    let primal_lp = primal_objective(shape, &outcome.u_history, requests)?;
    let max_h = outcome.traces.iter().map(|tr| tr.max_action_depths).max();
    let cert = certify_ratio(
        primal_lp,
        dual.serve_part,
        state.k,
        shape.leaf_depth(),
        state.mode,
        max_h,
    )?;
    let primal_violations =
        check_primal_feasibility(&outcome.u_history, requests, shape.n_leaves(), state.k);
    let dual_check = check_dual_feasibility(shape, &ledger, &outcome.traces);
    Ok(RunCertificate {
        ledger,
        dual,
        primal_lp,
        cert,
        primal_violations,
        dual_check,
    })
}
