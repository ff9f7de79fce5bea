//! Fractional k-server on hierarchically well-separated trees.
//!
//! The crate covers the full experimental pipeline:
//!
//! * [`metric`] — finite metric spaces, generators, and a text format;
//! * [`tree`] — exact and weighted HSTs with structural verification;
//! * [`embed`] — randomized metric embedding and depth reduction;
//! * [`frac`] — the online primal-dual fractional server;
//! * [`lp`] — objectives, feasibility checks, ratio certificates;
//! * [`rounding`] — marginal-preserving randomized rounding;
//! * [`offline`] — exact offline optima (configuration DP and min-cost flow);
//! * [`baselines`] — double coverage, work function, greedy;
//! * [`bench`] — request generators and experiment orchestration.

pub mod baselines;
pub mod bench;
pub mod embed;
pub mod frac;
pub mod lp;
pub mod metric;
pub mod offline;
pub mod rounding;
pub mod tree;

pub use frac::{FractionalState, Mode, ServeOptions};
pub use metric::{FiniteMetric, MetricKind};
pub use tree::{Hst, HstShape, WeightedHst};
