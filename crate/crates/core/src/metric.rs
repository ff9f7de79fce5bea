//! Finite metric spaces: validation, generators, and a plain-text file format.
//!
//! A [`FiniteMetric`] is an `n x n` symmetric distance matrix with zero
//! diagonal, positive off-diagonal entries, and the triangle inequality
//! checked up to a relative tolerance. Everything downstream (embeddings,
//! offline optima, baselines) consumes this type.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Relative tolerance for triangle-inequality checks.
pub const METRIC_TOL: f64 = 1e-9;

/// A validated finite metric on `n` points.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMetric {
    n: usize,
    dist: Vec<f64>,
    labels: Vec<String>,
}

/// Validation and parse errors for metric inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    NotSquare {
        rows: usize,
        cols: usize,
    },
    TooSmall {
        n: usize,
    },
    NonzeroDiagonal {
        i: usize,
        value: f64,
    },
    AsymmetricMatrix {
        i: usize,
        j: usize,
    },
    NonpositiveOffDiagonal {
        i: usize,
        j: usize,
        value: f64,
    },
    TriangleViolation {
        i: usize,
        s: usize,
        j: usize,
    },
    NonFinite {
        i: usize,
        j: usize,
    },
    BadParams(String),
    Parse {
        line: usize,
        col: usize,
        msg: String,
    },
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::NotSquare { rows, cols } => {
                write!(f, "matrix is not square: {rows} rows but {cols} columns")
            }
            MetricError::TooSmall { n } => write!(f, "need at least 2 points, got {n}"),
            MetricError::NonzeroDiagonal { i, value } => {
                write!(f, "diagonal entry ({i},{i}) is {value}, expected 0")
            }
            MetricError::AsymmetricMatrix { i, j } => {
                write!(f, "entries ({i},{j}) and ({j},{i}) differ")
            }
            MetricError::NonpositiveOffDiagonal { i, j, value } => {
                write!(f, "off-diagonal entry ({i},{j}) is {value}, expected > 0")
            }
            MetricError::TriangleViolation { i, s, j } => {
                write!(
                    f,
                    "triangle inequality fails: d({i},{j}) > d({i},{s}) + d({s},{j})"
                )
            }
            MetricError::NonFinite { i, j } => write!(f, "entry ({i},{j}) is not finite"),
            MetricError::BadParams(msg) => write!(f, "bad generator parameters: {msg}"),
            MetricError::Parse { line, col, msg } => {
                write!(f, "parse error at line {line}, column {col}: {msg}")
            }
        }
    }
}

impl std::error::Error for MetricError {}

/// Built-in instance generators.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum MetricKind {
    /// All off-diagonal distances equal 1 (paging).
    Uniform,
    /// Points on a line with the given spacing: `d(i,j) = spacing * |i-j|`.
    Line { spacing: f64 },
    /// Star with one hub (point 0) and given arm lengths for points `1..n`.
    Star { arms: Vec<f64> },
    /// Points drawn uniformly from the unit hypercube of the given dimension.
    RandomEuclidean { dim: usize },
    /// Shortest-path metric of a random spanning tree with edge lengths in `[1, 2)`.
    RandomTree,
}

impl FiniteMetric {
    /// Validates a raw square matrix and wraps it as a metric.
    pub fn validate(raw: &[Vec<f64>]) -> Result<Self, MetricError> {
        let n = raw.len();
        if n < 2 {
            return Err(MetricError::TooSmall { n });
        }
        for (i, row) in raw.iter().enumerate() {
            if row.len() != n {
                return Err(MetricError::NotSquare {
                    rows: n,
                    cols: row.len(),
                });
            }
            for (j, &d) in row.iter().enumerate() {
                if !d.is_finite() {
                    return Err(MetricError::NonFinite { i, j });
                }
                if i == j && d != 0.0 {
                    return Err(MetricError::NonzeroDiagonal { i, value: d });
                }
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if raw[i][j] != raw[j][i] {
                    return Err(MetricError::AsymmetricMatrix { i, j });
                }
                if raw[i][j] <= 0.0 {
                    return Err(MetricError::NonpositiveOffDiagonal {
                        i,
                        j,
                        value: raw[i][j],
                    });
                }
            }
        }
        for s in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let direct = raw[i][j];
                    let via = raw[i][s] + raw[s][j];
                    if direct > via * (1.0 + METRIC_TOL) {
                        return Err(MetricError::TriangleViolation { i, s, j });
                    }
                }
            }
        }
        let dist = raw.iter().flatten().copied().collect();
        let labels = (0..n).map(|i| format!("p{i}")).collect();
        Ok(FiniteMetric { n, dist, labels })
    }

    /// Deterministic generator for the built-in instance families.
    pub fn generate(kind: &MetricKind, n: usize, seed: u64) -> Result<Self, MetricError> {
        if n < 2 {
            return Err(MetricError::TooSmall { n });
        }
        let mut raw = vec![vec![0.0; n]; n];
        match kind {
            MetricKind::Uniform => {
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            raw[i][j] = 1.0;
                        }
                    }
                }
            }
            MetricKind::Line { spacing } => {
                if !spacing.is_finite() || *spacing <= 0.0 {
                    return Err(MetricError::BadParams(format!(
                        "line spacing {spacing} must be > 0"
                    )));
                }
                for i in 0..n {
                    for j in 0..n {
                        raw[i][j] = spacing * (i as f64 - j as f64).abs();
                    }
                }
            }
            MetricKind::Star { arms } => {
                if arms.len() != n - 1 {
                    return Err(MetricError::BadParams(format!(
                        "star with {n} points needs {} arm lengths, got {}",
                        n - 1,
                        arms.len()
                    )));
                }
                if arms.iter().any(|a| !a.is_finite() || *a <= 0.0) {
                    return Err(MetricError::BadParams(
                        "star arm lengths must be > 0".into(),
                    ));
                }
                for i in 1..n {
                    raw[0][i] = arms[i - 1];
                    raw[i][0] = arms[i - 1];
                }
                for i in 1..n {
                    for j in 1..n {
                        if i != j {
                            raw[i][j] = arms[i - 1] + arms[j - 1];
                        }
                    }
                }
            }
            MetricKind::RandomEuclidean { dim } => {
                if *dim == 0 {
                    return Err(MetricError::BadParams("dimension must be >= 1".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..*dim).map(|_| rng.gen::<f64>()).collect())
                    .collect();
                for i in 0..n {
                    for j in 0..n {
                        let d2: f64 = pts[i]
                            .iter()
                            .zip(&pts[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        raw[i][j] = d2.sqrt();
                    }
                }
                // Degenerate coincidences are astronomically unlikely but would
                // break the positivity invariant; nudge via re-seed.
                if (0..n).any(|i| (0..n).any(|j| i != j && raw[i][j] == 0.0)) {
                    return Self::generate(kind, n, seed.wrapping_add(0x9e3779b97f4a7c15));
                }
            }
            MetricKind::RandomTree => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                // Random attachment tree; edge lengths in [1, 2).
                let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
                for v in 1..n {
                    let p = rng.gen_range(0..v);
                    let w = 1.0 + rng.gen::<f64>();
                    adj[v].push((p, w));
                    adj[p].push((v, w));
                }
                for s in 0..n {
                    // DFS accumulation of path lengths from s; mirrored below
                    // because float addition order differs per source.
                    let mut stack = vec![(s, usize::MAX)];
                    while let Some((v, parent)) = stack.pop() {
                        for &(w, len) in &adj[v] {
                            if w != parent {
                                raw[s][w] = raw[s][v] + len;
                                stack.push((w, v));
                            }
                        }
                    }
                }
                for i in 0..n {
                    for j in (i + 1)..n {
                        raw[j][i] = raw[i][j];
                    }
                }
            }
        }
        Self::validate(&raw)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Replaces point labels; lengths must match.
    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, MetricError> {
        if labels.len() != self.n {
            return Err(MetricError::BadParams(format!(
                "{} labels for {} points",
                labels.len(),
                self.n
            )));
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn max_distance(&self) -> f64 {
        self.dist.iter().copied().fold(0.0, f64::max)
    }

    pub fn min_positive_distance(&self) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    m = m.min(self.dist(i, j));
                }
            }
        }
        m
    }

    /// Serializes to the plain-text metric format (round-trips bit-exactly).
    pub fn to_text(&self) -> String {
        let mut out = String::from("# kserver metric v1\n");
        out.push_str(&format!("n {}\n", self.n));
        out.push_str(&format!("labels {}\n", self.labels.join(" ")));
        for i in 0..self.n {
            out.push_str("row");
            for j in 0..self.n {
                out.push_str(&format!(" {}", self.dist(i, j)));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the plain-text metric format produced by [`FiniteMetric::to_text`].
    pub fn from_text(text: &str) -> Result<Self, MetricError> {
        let mut n: Option<usize> = None;
        let mut labels: Option<Vec<String>> = None;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split_whitespace();
            let key = parts.next().unwrap();
            let col = |tok: &str| line.find(tok).map(|c| c + 1).unwrap_or(1);
            match key {
                "n" => {
                    let tok = parts.next().ok_or(MetricError::Parse {
                        line: lineno,
                        col: line.len() + 1,
                        msg: "missing point count".into(),
                    })?;
                    n = Some(tok.parse().map_err(|_| MetricError::Parse {
                        line: lineno,
                        col: col(tok),
                        msg: format!("invalid point count '{tok}'"),
                    })?);
                }
                "labels" => {
                    labels = Some(parts.map(str::to_string).collect());
                }
                "row" => {
                    let mut row = Vec::new();
                    for tok in parts {
                        let v: f64 = tok.parse().map_err(|_| MetricError::Parse {
                            line: lineno,
                            col: col(tok),
                            msg: format!("invalid distance '{tok}'"),
                        })?;
                        row.push(v);
                    }
                    rows.push(row);
                }
                other => {
                    return Err(MetricError::Parse {
                        line: lineno,
                        col: col(other),
                        msg: format!("unknown directive '{other}'"),
                    });
                }
            }
        }
        let n = n.ok_or(MetricError::Parse {
            line: 1,
            col: 1,
            msg: "missing 'n' line".into(),
        })?;
        if rows.len() != n {
            return Err(MetricError::Parse {
                line: text.lines().count(),
                col: 1,
                msg: format!("expected {n} rows, found {}", rows.len()),
            });
        }
        let metric = Self::validate(&rows)?;
        match labels {
            Some(l) if !l.is_empty() => metric.with_labels(l),
            _ => Ok(metric),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_metric_is_valid() {
        let m = FiniteMetric::validate(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.n(), 2);
        assert_eq!(m.dist(0, 1), 1.0);
    }

    #[test]
    fn asymmetry_is_rejected() {
        let err = FiniteMetric::validate(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap_err();
        assert_eq!(err, MetricError::AsymmetricMatrix { i: 0, j: 1 });
    }

    #[test]
    fn triangle_violation_names_witnesses() {
        // d(0,2) = 5 > d(0,1) + d(1,2) = 2.
        let err = FiniteMetric::validate(&[
            vec![0.0, 1.0, 5.0],
            vec![1.0, 0.0, 1.0],
            vec![5.0, 1.0, 0.0],
        ])
        .unwrap_err();
        match err {
            MetricError::TriangleViolation { i, s, j } => {
                assert_eq!((i, s, j), (0, 1, 2));
            }
            other => panic!("expected triangle violation, got {other:?}"),
        }
    }

    #[test]
    fn uniform_generator_matches_definition() {
        let m = FiniteMetric::generate(&MetricKind::Uniform, 3, 0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.dist(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn line_generator_is_path_metric() {
        let m = FiniteMetric::generate(&MetricKind::Line { spacing: 1.0 }, 4, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.dist(i, j), (i as f64 - j as f64).abs());
            }
        }
    }

    #[test]
    fn euclidean_generator_is_deterministic() {
        let a = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 10, 7).unwrap();
        let b = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 2 }, 10, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn star_requires_arm_lengths() {
        let err = FiniteMetric::generate(&MetricKind::Star { arms: vec![1.0] }, 3, 0).unwrap_err();
        assert!(matches!(err, MetricError::BadParams(_)));
    }

    #[test]
    fn text_round_trip_is_identity() {
        let m = FiniteMetric::generate(&MetricKind::RandomEuclidean { dim: 3 }, 6, 42).unwrap();
        let back = FiniteMetric::from_text(&m.to_text()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn missing_row_is_a_parse_error() {
        let text = "n 3\nrow 0 1 1\nrow 1 0 1\n";
        let err = FiniteMetric::from_text(text).unwrap_err();
        assert!(matches!(err, MetricError::Parse { .. }));
    }

    #[test]
    fn junk_token_reports_line_and_column() {
        let text = "n 2\nrow 0 oops\nrow 1 0\n";
        match FiniteMetric::from_text(text).unwrap_err() {
            MetricError::Parse { line, col, .. } => {
                assert_eq!(line, 2);
                assert!(col > 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
