//! Rooted trees with per-level edge lengths: exact and weighted HSTs.
//!
//! Both tree flavors share a [`HstShape`]: a rooted tree whose leaves sit at a
//! common depth and whose edge lengths are uniform per level. An exact HST has
//! a constant ratio `sigma` between consecutive level lengths; a weighted HST
//! only requires each ratio to be at least `sigma`. [`verify_hst`] reports
//! every violated property with witnesses instead of failing fast.

use std::fmt;

/// Relative tolerance for structural checks.
pub const HST_TOL: f64 = 1e-9;

/// Shared topology + geometry of an HST-like tree.
///
/// Node 0 is always the root. `edge_len[v]` is the length of the edge from
/// `v` to its parent (`0.0` for the root). Leaves carry metric point indices.
#[derive(Debug, Clone, PartialEq)]
pub struct HstShape {
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    edge_len: Vec<f64>,
    leaf_point: Vec<Option<usize>>,
    /// point index -> node id
    leaf_node: Vec<usize>,
    /// ancestor node at depth j of each point: `paths[p][j-1]`, j = 1..=leaf_depth
    paths: Vec<Vec<usize>>,
    /// metric point indices below each node
    points_below: Vec<Vec<usize>>,
    /// edge length per level, `level_len[j-1]` = length of edges into depth-j nodes
    level_len: Vec<f64>,
    leaf_depth: usize,
    sigma: f64,
}

/// Errors from building or loading a tree.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeError {
    BadTopology(String),
    UnknownLeaf(String),
    Structure(StructureReport),
    Parse {
        line: usize,
        col: usize,
        msg: String,
    },
}

impl fmt::Display for TreeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeError::BadTopology(msg) => write!(f, "bad tree topology: {msg}"),
            TreeError::UnknownLeaf(l) => write!(f, "unknown leaf '{l}'"),
            TreeError::Structure(rep) => write!(f, "structure violations: {rep}"),
            TreeError::Parse { line, col, msg } => {
                write!(f, "parse error at line {line}, column {col}: {msg}")
            }
        }
    }
}

impl std::error::Error for TreeError {}

/// One violated HST property, with witnesses.
#[derive(Debug, Clone, PartialEq)]
pub enum StructureViolation {
    /// Children of `parent` carry different edge lengths (property 1).
    UnequalSiblingEdges { parent: usize },
    /// Edge lengths at one depth differ across the tree.
    NonuniformLevelLength { depth: usize },
    /// `d(p(v), v) != sigma * d(v, child)` for an exact HST (property 2).
    StretchMismatch {
        node: usize,
        expected: f64,
        actual: f64,
    },
    /// Level ratio below `sigma` in a weighted HST.
    StretchTooSmall {
        depth: usize,
        ratio: f64,
        sigma: f64,
    },
    /// Leaves at different depths (property 3).
    UnequalLeafDepth {
        leaf: usize,
        depth: usize,
        expected: usize,
    },
    /// Non-positive or non-finite edge length.
    BadEdgeLength { node: usize, value: f64 },
    /// Leaf/point correspondence is not a bijection.
    LeafMapNotBijective,
}

impl fmt::Display for StructureViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Result of [`verify_hst`]: empty iff the tree satisfies every property.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StructureReport {
    pub violations: Vec<StructureViolation>,
}

impl StructureReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            write!(f, "ok")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Which flavor of HST a shape claims to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HstFlavor {
    Exact,
    Weighted,
}

/// An exact sigma-HST (constant level ratio), verified on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Hst {
    shape: HstShape,
}

/// A weighted sigma-HST (level ratios >= sigma), verified on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedHst {
    shape: HstShape,
}

impl Hst {
    pub fn new(shape: HstShape) -> Result<Self, TreeError> {
        let rep = verify_hst(&shape, HstFlavor::Exact);
        if rep.is_empty() {
            Ok(Hst { shape })
        } else {
            Err(TreeError::Structure(rep))
        }
    }

    pub fn shape(&self) -> &HstShape {
        &self.shape
    }

    pub fn into_shape(self) -> HstShape {
        self.shape
    }
}

impl WeightedHst {
    pub fn new(shape: HstShape) -> Result<Self, TreeError> {
        let rep = verify_hst(&shape, HstFlavor::Weighted);
        if rep.is_empty() {
            Ok(WeightedHst { shape })
        } else {
            Err(TreeError::Structure(rep))
        }
    }

    pub fn shape(&self) -> &HstShape {
        &self.shape
    }

    pub fn into_shape(self) -> HstShape {
        self.shape
    }
}

impl HstShape {
    /// Builds a shape from parent pointers.
    ///
    /// `parents[v]` is `None` exactly for the root (node 0). `leaf_point[v]`
    /// assigns metric point indices to leaves and must be `None` on internal
    /// nodes. Children keep the insertion order of their node ids.
    pub fn from_parents(
        parents: Vec<Option<usize>>,
        edge_len: Vec<f64>,
        leaf_point: Vec<Option<usize>>,
        sigma: f64,
    ) -> Result<Self, TreeError> {
        let n_nodes = parents.len();
        if n_nodes == 0 {
            return Err(TreeError::BadTopology("empty tree".into()));
        }
        if parents[0].is_some() {
            return Err(TreeError::BadTopology("node 0 must be the root".into()));
        }
        if edge_len.len() != n_nodes || leaf_point.len() != n_nodes {
            return Err(TreeError::BadTopology("array length mismatch".into()));
        }
        let mut children = vec![Vec::new(); n_nodes];
        for v in 1..n_nodes {
            match parents[v] {
                Some(p) if p < v => children[p].push(v),
                Some(p) => {
                    return Err(TreeError::BadTopology(format!(
                        "node {v} has parent {p}; parents must precede children"
                    )))
                }
                None => {
                    return Err(TreeError::BadTopology(format!("node {v} has no parent")));
                }
            }
        }
        let mut depth = vec![0usize; n_nodes];
        for v in 1..n_nodes {
            depth[v] = depth[parents[v].unwrap()] + 1;
        }
        // Leaves are childless nodes; each must carry a point, internal nodes must not.
        let mut leaf_pairs: Vec<(usize, usize)> = Vec::new();
        for v in 0..n_nodes {
            if children[v].is_empty() {
                match leaf_point[v] {
                    Some(p) => leaf_pairs.push((p, v)),
                    None => {
                        return Err(TreeError::BadTopology(format!(
                            "leaf node {v} has no point"
                        )))
                    }
                }
            } else if leaf_point[v].is_some() {
                return Err(TreeError::BadTopology(format!(
                    "internal node {v} carries a leaf point"
                )));
            }
        }
        let n_points = leaf_pairs.len();
        let mut leaf_node = vec![usize::MAX; n_points];
        for &(p, v) in &leaf_pairs {
            if p >= n_points || leaf_node[p] != usize::MAX {
                return Err(TreeError::BadTopology(
                    "leaf points must be a permutation of 0..n".into(),
                ));
            }
            leaf_node[p] = v;
        }
        let leaf_depth = leaf_pairs.iter().map(|&(_, v)| depth[v]).max().unwrap_or(0);
        // Per-level edge lengths from the first node seen at each depth.
        let mut level_len = vec![f64::NAN; leaf_depth];
        for v in 1..n_nodes {
            let j = depth[v];
            if j >= 1 && j <= leaf_depth && level_len[j - 1].is_nan() {
                level_len[j - 1] = edge_len[v];
            }
        }
        let mut paths = vec![Vec::new(); n_points];
        for p in 0..n_points {
            let mut chain = Vec::new();
            let mut v = leaf_node[p];
            while let Some(par) = parents[v] {
                chain.push(v);
                v = par;
            }
            chain.reverse();
            paths[p] = chain;
        }
        let mut points_below = vec![Vec::new(); n_nodes];
        for v in (0..n_nodes).rev() {
            if children[v].is_empty() {
                points_below[v] = vec![leaf_point[v].unwrap()];
            } else {
                let mut acc = Vec::new();
                for &c in &children[v] {
                    acc.extend_from_slice(&points_below[c]);
                }
                points_below[v] = acc;
            }
        }
        Ok(HstShape {
            parent: parents,
            children,
            depth,
            edge_len,
            leaf_point,
            leaf_node,
            paths,
            points_below,
            level_len,
            leaf_depth,
            sigma,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_node.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Common leaf depth.
    pub fn leaf_depth(&self) -> usize {
        self.leaf_depth
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn depth(&self, v: usize) -> usize {
        self.depth[v]
    }

    /// D(v): length of the edge from `v` to its parent.
    pub fn edge(&self, v: usize) -> f64 {
        self.edge_len[v]
    }

    /// Length of edges into depth-`j` nodes, `j` in `1..=leaf_depth`.
    pub fn level_len(&self, j: usize) -> f64 {
        self.level_len[j - 1]
    }

    /// Ratio of level `j` to level `j+1` edge lengths (the per-depth stretch).
    pub fn level_ratio(&self, j: usize) -> f64 {
        self.level_len(j) / self.level_len(j + 1)
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.children[v].is_empty()
    }

    pub fn leaf_point(&self, v: usize) -> Option<usize> {
        self.leaf_point[v]
    }

    pub fn leaf_node_of(&self, point: usize) -> usize {
        self.leaf_node[point]
    }

    /// Root-to-leaf ancestor chain of a point: entry `j-1` is `A(p, j)`.
    pub fn path_of(&self, point: usize) -> &[usize] {
        &self.paths[point]
    }

    /// A(p, j): the ancestor of point `p` at depth `j` (j = 0 is the root).
    pub fn ancestor(&self, point: usize, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.paths[point][j - 1]
        }
    }

    pub fn points_below(&self, v: usize) -> &[usize] {
        &self.points_below[v]
    }

    pub fn subtree_leaf_count(&self, v: usize) -> usize {
        self.points_below[v].len()
    }

    /// Metric points in depth-first leaf order (used by the rounding coupling).
    pub fn points_in_dfs_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_leaves());
        let mut stack = vec![0usize];
        while let Some(v) = stack.pop() {
            if let Some(p) = self.leaf_point[v] {
                out.push(p);
            }
            for &c in self.children[v].iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    /// Tree distance between two metric points (sum of path edge lengths).
    pub fn leaf_distance(&self, p: usize, q: usize) -> Result<f64, TreeError> {
        if p >= self.n_leaves() {
            return Err(TreeError::UnknownLeaf(format!("point {p}")));
        }
        if q >= self.n_leaves() {
            return Err(TreeError::UnknownLeaf(format!("point {q}")));
        }
        if p == q {
            return Ok(0.0);
        }
        let (pa, qa) = (&self.paths[p], &self.paths[q]);
        let mut split = 0;
        while split < pa.len() && split < qa.len() && pa[split] == qa[split] {
            split += 1;
        }
        let mut d = 0.0;
        for &v in &pa[split..] {
            d += self.edge_len[v];
        }
        for &v in &qa[split..] {
            d += self.edge_len[v];
        }
        Ok(d)
    }

    /// Depth of the lowest common ancestor of two points.
    pub fn lca_depth(&self, p: usize, q: usize) -> usize {
        let (pa, qa) = (&self.paths[p], &self.paths[q]);
        let mut split = 0;
        while split < pa.len() && split < qa.len() && pa[split] == qa[split] {
            split += 1;
        }
        split
    }

    /// Serializes to the plain-text tree format.
    pub fn to_text(&self, labels: &[String]) -> String {
        let mut out = String::from("# kserver tree v1\n");
        out.push_str(&format!("sigma {}\n", self.sigma));
        for v in 0..self.n_nodes() {
            let parent = match self.parent[v] {
                Some(p) => p.to_string(),
                None => "-".to_string(),
            };
            let label = match self.leaf_point[v] {
                Some(p) => labels.get(p).cloned().unwrap_or_else(|| format!("p{p}")),
                None => "-".to_string(),
            };
            out.push_str(&format!("node {v} {parent} {} {label}\n", self.edge_len[v]));
        }
        out
    }

    /// Parses the plain-text tree format. Returns the shape and leaf labels
    /// in point order.
    pub fn from_text(text: &str) -> Result<(Self, Vec<String>), TreeError> {
        let mut sigma: Option<f64> = None;
        let mut parents: Vec<Option<usize>> = Vec::new();
        let mut edges: Vec<f64> = Vec::new();
        let mut labels: Vec<Option<String>> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let toks: Vec<&str> = trimmed.split_whitespace().collect();
            let col = |tok: &str| line.find(tok).map(|c| c + 1).unwrap_or(1);
            match toks[0] {
                "sigma" => {
                    let tok = toks.get(1).ok_or(TreeError::Parse {
                        line: lineno,
                        col: line.len() + 1,
                        msg: "missing sigma value".into(),
                    })?;
                    sigma = Some(tok.parse().map_err(|_| TreeError::Parse {
                        line: lineno,
                        col: col(tok),
                        msg: format!("invalid sigma '{tok}'"),
                    })?);
                }
                "node" => {
                    if toks.len() != 5 {
                        return Err(TreeError::Parse {
                            line: lineno,
                            col: 1,
                            msg: "node lines need: node <id> <parent|-> <edge_len> <label|->"
                                .into(),
                        });
                    }
                    let id: usize = toks[1].parse().map_err(|_| TreeError::Parse {
                        line: lineno,
                        col: col(toks[1]),
                        msg: format!("invalid node id '{}'", toks[1]),
                    })?;
                    if id != parents.len() {
                        return Err(TreeError::Parse {
                            line: lineno,
                            col: col(toks[1]),
                            msg: format!("node ids must be sequential; expected {}", parents.len()),
                        });
                    }
                    let parent = if toks[2] == "-" {
                        None
                    } else {
                        Some(toks[2].parse().map_err(|_| TreeError::Parse {
                            line: lineno,
                            col: col(toks[2]),
                            msg: format!("invalid parent '{}'", toks[2]),
                        })?)
                    };
                    let edge: f64 = toks[3].parse().map_err(|_| TreeError::Parse {
                        line: lineno,
                        col: col(toks[3]),
                        msg: format!("invalid edge length '{}'", toks[3]),
                    })?;
                    parents.push(parent);
                    edges.push(edge);
                    labels.push(if toks[4] == "-" {
                        None
                    } else {
                        Some(toks[4].to_string())
                    });
                }
                other => {
                    return Err(TreeError::Parse {
                        line: lineno,
                        col: col(other),
                        msg: format!("unknown directive '{other}'"),
                    });
                }
            }
        }
        let sigma = sigma.ok_or(TreeError::Parse {
            line: 1,
            col: 1,
            msg: "missing 'sigma' line".into(),
        })?;
        // Assign point indices in node order of appearance.
        let mut leaf_point = vec![None; parents.len()];
        let mut point_labels = Vec::new();
        for (v, label) in labels.iter().enumerate() {
            if let Some(l) = label {
                leaf_point[v] = Some(point_labels.len());
                point_labels.push(l.clone());
            }
        }
        let shape = HstShape::from_parents(parents, edges, leaf_point, sigma)?;
        Ok((shape, point_labels))
    }
}

fn rel_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= HST_TOL * a.abs().max(b.abs()).max(1e-300)
}

/// Checks every HST property and reports all violations with witnesses.
pub fn verify_hst(shape: &HstShape, flavor: HstFlavor) -> StructureReport {
    let mut violations = Vec::new();
    let n_nodes = shape.n_nodes();
    for v in 1..n_nodes {
        let d = shape.edge_len[v];
        if !d.is_finite() || d <= 0.0 {
            violations.push(StructureViolation::BadEdgeLength { node: v, value: d });
        }
    }
    // Property (1): children of one node share an edge length.
    for v in 0..n_nodes {
        let cs = shape.children(v);
        if cs.len() >= 2 {
            let d0 = shape.edge_len[cs[0]];
            if cs.iter().any(|&c| !rel_eq(shape.edge_len[c], d0)) {
                violations.push(StructureViolation::UnequalSiblingEdges { parent: v });
            }
        }
    }
    // Level lengths must be uniform across the whole tree for the per-depth
    // stretch to be well defined.
    for v in 1..n_nodes {
        let j = shape.depth[v];
        if j >= 1 && j <= shape.leaf_depth && !rel_eq(shape.edge_len[v], shape.level_len[j - 1]) {
            violations.push(StructureViolation::NonuniformLevelLength { depth: j });
        }
    }
    violations.dedup();
    // Property (3): common leaf depth.
    for p in 0..shape.n_leaves() {
        let v = shape.leaf_node[p];
        if shape.depth[v] != shape.leaf_depth {
            violations.push(StructureViolation::UnequalLeafDepth {
                leaf: v,
                depth: shape.depth[v],
                expected: shape.leaf_depth,
            });
        }
    }
    // Stretch conditions on level ratios.
    for j in 1..shape.leaf_depth {
        let ratio = shape.level_len(j) / shape.level_len(j + 1);
        match flavor {
            HstFlavor::Exact => {
                if !rel_eq(ratio, shape.sigma) {
                    // Witness: some node at depth j.
                    let node = (1..n_nodes).find(|&v| shape.depth[v] == j).unwrap_or(0);
                    violations.push(StructureViolation::StretchMismatch {
                        node,
                        expected: shape.sigma,
                        actual: ratio,
                    });
                }
            }
            HstFlavor::Weighted => {
                if ratio < shape.sigma * (1.0 - HST_TOL) {
                    violations.push(StructureViolation::StretchTooSmall {
                        depth: j,
                        ratio,
                        sigma: shape.sigma,
                    });
                }
            }
        }
    }
    // Leaf map bijectivity is enforced at construction; re-check defensively.
    let mut seen = vec![false; shape.n_leaves()];
    let mut bad = false;
    for v in 0..n_nodes {
        if let Some(p) = shape.leaf_point[v] {
            if p >= seen.len() || seen[p] {
                bad = true;
            } else {
                seen[p] = true;
            }
        }
    }
    if bad || seen.iter().any(|s| !s) {
        violations.push(StructureViolation::LeafMapNotBijective);
    }
    StructureReport { violations }
}

/// Builds a balanced exact HST: `arity^levels` leaves, top edge `top_len`.
///
/// Handy for tests and synthetic suites.
pub fn balanced_hst(arity: usize, levels: usize, sigma: f64, top_len: f64) -> Hst {
    assert!(arity >= 1 && levels >= 1);
    let mut parents = vec![None];
    let mut edges = vec![0.0];
    let mut leaf_point = vec![None];
    let mut frontier = vec![0usize];
    let mut len = top_len;
    for depth in 1..=levels {
        let mut next = Vec::new();
        for &v in &frontier {
            for _ in 0..arity {
                let id = parents.len();
                parents.push(Some(v));
                edges.push(len);
                leaf_point.push(None);
                next.push(id);
            }
        }
        frontier = next;
        if depth < levels {
            len /= sigma;
        }
    }
    let mut point = 0;
    for &v in &frontier {
        leaf_point[v] = Some(point);
        point += 1;
    }
    Hst::new(HstShape::from_parents(parents, edges, leaf_point, sigma).unwrap()).unwrap()
}
