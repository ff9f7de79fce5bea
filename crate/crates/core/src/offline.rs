//! Exact offline optima: configuration dynamic programming and an
//! independent min-cost-flow reduction.
//!
//! The DP keeps the work function over all k-subsets; one request updates it
//! by seeding configurations covering the request with their previous values
//! and relaxing single-server moves with Dijkstra (single-move shortest paths
//! realize the matching distance between configurations). The flow reduction
//! routes k unit flows through mandatory per-request arcs with a large
//! negative reward, solved by successive shortest paths with potentials. The
//! two must agree exactly; the acceptance suite checks that on hundreds of
//! random instances.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use crate::metric::FiniteMetric;
use crate::tree::HstShape;

/// Dense distance lookup shared by oracles and baselines.
#[derive(Debug, Clone)]
pub struct DistMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistMatrix {
    pub fn from_metric(m: &FiniteMetric) -> Self {
        let n = m.n();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = m.dist(i, j);
            }
        }
        DistMatrix { n, d }
    }

    pub fn from_tree(shape: &HstShape) -> Self {
        let n = shape.n_leaves();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = shape.leaf_distance(i, j).unwrap();
            }
        }
        DistMatrix { n, d }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn max_dist(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OfflineError {
    TooLarge { states: u128, limit: u128 },
    BadConfig(String),
}

impl fmt::Display for OfflineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OfflineError::TooLarge { states, limit } => {
                write!(f, "instance needs {states} DP states, limit {limit}")
            }
            OfflineError::BadConfig(msg) => write!(f, "bad configuration: {msg}"),
        }
    }
}

impl std::error::Error for OfflineError {}

/// One server move.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MoveRec {
    pub server: usize,
    pub from: usize,
    pub to: usize,
}

/// An optimal offline schedule.
#[derive(Debug, Clone)]
pub struct OfflineSolution {
    pub cost: f64,
    /// Moves per request, in execution order.
    pub schedule: Vec<Vec<MoveRec>>,
}

#[derive(Copy, Clone, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on cost.
        other
            .0
            .partial_cmp(&self.0)
            .unwrap()
            .then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn binom(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k.min(n - k) {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Work-function table over all k-subsets of points.
pub struct ConfigDp {
    dist: DistMatrix,
    configs: Vec<u32>,
    index_of: std::collections::HashMap<u32, usize>,
    pub w: Vec<f64>,
    /// Predecessor per config from the latest advance: `(prev index, from, to)`.
    pred: Vec<Option<(usize, u8, u8)>>,
}

impl ConfigDp {
    /// Builds the table and initializes `w` to matching distances from the
    /// initial configuration.
    pub fn new(dist: DistMatrix, initial: &[usize]) -> Result<Self, OfflineError> {
        let n = dist.n();
        let k = initial.len();
        if k == 0 || k >= n || n > 24 {
            return Err(OfflineError::BadConfig(format!(
                "need 0 < k < n <= 24, got k={k} n={n}"
            )));
        }
        let mut init_mask: u32 = 0;
        for &p in initial {
            if p >= n {
                return Err(OfflineError::BadConfig(format!("point {p} out of range")));
            }
            if init_mask & (1 << p) != 0 {
                return Err(OfflineError::BadConfig(format!("duplicate point {p}")));
            }
            init_mask |= 1 << p;
        }
        // Gosper's hack over k-subsets of n bits.
        let mut configs = Vec::new();
        let mut mask: u32 = (1 << k) - 1;
        while mask < (1u32 << n) {
            configs.push(mask);
            let c = mask & mask.wrapping_neg();
            let r = mask + c;
            mask = (((r ^ mask) >> 2) / c) | r;
            if c == 0 {
                break;
            }
        }
        let index_of: std::collections::HashMap<u32, usize> =
            configs.iter().enumerate().map(|(i, &m)| (m, i)).collect();
        let mut dp = ConfigDp {
            dist,
            pred: vec![None; configs.len()],
            w: vec![f64::INFINITY; configs.len()],
            configs,
            index_of,
        };
        let start = dp.index_of[&init_mask];
        let mut seeds = vec![f64::INFINITY; dp.configs.len()];
        seeds[start] = 0.0;
        dp.relax(seeds);
        Ok(dp)
    }

    pub fn config_count(&self) -> usize {
        self.configs.len()
    }

    pub fn value(&self, mask: u32) -> f64 {
        self.w[self.index_of[&mask]]
    }

    /// Dijkstra over single-server moves from the given seed values.
    fn relax(&mut self, seeds: Vec<f64>) {
        let n = self.dist.n();
        let mut dist = seeds;
        let mut pred: Vec<Option<(usize, u8, u8)>> = vec![None; self.configs.len()];
        let mut heap = BinaryHeap::new();
        for (i, &v) in dist.iter().enumerate() {
            if v.is_finite() {
                heap.push(HeapItem(v, i));
            }
        }
        while let Some(HeapItem(cost, i)) = heap.pop() {
            if cost > dist[i] {
                continue;
            }
            let mask = self.configs[i];
            for x in 0..n {
                if mask & (1 << x) == 0 {
                    continue;
                }
                for q in 0..n {
                    if mask & (1 << q) != 0 {
                        continue;
                    }
                    let next_mask = (mask & !(1 << x)) | (1 << q);
                    let j = self.index_of[&next_mask];
                    let c = cost + self.dist.dist(x, q);
                    if c < dist[j] - 1e-15 {
                        dist[j] = c;
                        pred[j] = Some((i, x as u8, q as u8));
                        heap.push(HeapItem(c, j));
                    }
                }
            }
        }
        self.w = dist;
        self.pred = pred;
    }

    /// Advances the work function by one request.
    pub fn advance(&mut self, request: usize) {
        let mut seeds = vec![f64::INFINITY; self.configs.len()];
        for (i, &mask) in self.configs.iter().enumerate() {
            if mask & (1 << request) != 0 {
                seeds[i] = self.w[i];
            }
        }
        self.relax(seeds);
    }
}

/// Exact optimum by configuration DP.
///
/// Guarded: `C(n, k) * |requests|` must stay within 10^6 states.
pub fn opt_brute_force(
    dist: &DistMatrix,
    initial: &[usize],
    requests: &[usize],
) -> Result<OfflineSolution, OfflineError> {
    let n = dist.n();
    let k = initial.len();
    if k == 0 || k >= n {
        return Err(OfflineError::BadConfig(format!(
            "need 0 < k < n, got k={k} n={n}"
        )));
    }
    let states = binom(n, k) * requests.len().max(1) as u128;
    if states > 1_000_000 {
        return Err(OfflineError::TooLarge {
            states,
            limit: 1_000_000,
        });
    }
    let mut dp = ConfigDp::new(dist.clone(), initial)?;
    if requests.is_empty() {
        return Ok(OfflineSolution {
            cost: 0.0,
            schedule: Vec::new(),
        });
    }
    // Remember each step's predecessor table for schedule extraction.
    let mut tables: Vec<(Vec<f64>, Vec<Option<(usize, u8, u8)>>)> = Vec::new();
    tables.push((dp.w.clone(), dp.pred.clone()));
    for &r in requests {
        dp.advance(r);
        tables.push((dp.w.clone(), dp.pred.clone()));
    }
    // Optimum: cheapest final configuration covering the last request, ties
    // broken by lexicographically smallest member list (ascending mask works).
    let last = *requests.last().unwrap();
    let mut best: Option<(f64, usize)> = None;
    for (i, &mask) in dp.configs.iter().enumerate() {
        if mask & (1 << last) == 0 {
            continue;
        }
        let v = dp.w[i];
        match best {
            None => best = Some((v, i)),
            Some((bv, _)) if v < bv - 1e-12 => best = Some((v, i)),
            _ => {}
        }
    }
    let (cost, best_idx) = best.expect("some config covers the request");

    // Backtrack the per-step predecessor chains. The chain recorded at step t
    // leads from where serving step t ended back to where step t's moves
    // started, so a table-t chain belongs to request t's repositioning (the
    // final table's own chain holds post-serve moves and is appended last).
    let chain = |table: &[Option<(usize, u8, u8)>], mask: u32| {
        let mut moves = Vec::new();
        let mut i = dp.index_of[&mask];
        while let Some((prev, x, q)) = table[i] {
            moves.push((x as usize, q as usize));
            i = prev;
        }
        moves.reverse();
        (dp.configs[i], moves)
    };
    let mut per_request_moves: Vec<Vec<(usize, usize)>> = vec![Vec::new(); requests.len()];
    let (mut z, post_moves) = chain(&tables[requests.len()].1, dp.configs[best_idx]);
    for t in (1..=requests.len()).rev() {
        // z covers request t; the previous table's chain lands on it.
        let (seed, moves) = chain(&tables[t - 1].1, z);
        per_request_moves[t - 1] = moves;
        z = seed;
    }
    per_request_moves[requests.len() - 1].extend(post_moves);

    // Assign server indices by replay.
    let mut positions: Vec<usize> = initial.to_vec();
    let mut schedule = Vec::with_capacity(requests.len());
    for moves in per_request_moves {
        let mut recs = Vec::new();
        for (from, to) in moves {
            let s = positions
                .iter()
                .position(|&p| p == from)
                .expect("schedule move from an occupied point");
            positions[s] = to;
            recs.push(MoveRec {
                server: s,
                from,
                to,
            });
        }
        schedule.push(recs);
    }
    Ok(OfflineSolution { cost, schedule })
}

struct Mcmf {
    to: Vec<usize>,
    cap: Vec<i32>,
    cost: Vec<f64>,
    head: Vec<Vec<usize>>,
}

impl Mcmf {
    fn new(n: usize) -> Self {
        Mcmf {
            to: Vec::new(),
            cap: Vec::new(),
            cost: Vec::new(),
            head: vec![Vec::new(); n],
        }
    }

    fn add(&mut self, a: usize, b: usize, cap: i32, cost: f64) -> usize {
        let id = self.to.len();
        self.to.push(b);
        self.cap.push(cap);
        self.cost.push(cost);
        self.head[a].push(id);
        self.to.push(a);
        self.cap.push(0);
        self.cost.push(-cost);
        self.head[b].push(id + 1);
        id
    }

    /// Successive shortest paths with potentials; the network must be a DAG
    /// in node order for the initial potential pass.
    fn run(&mut self, s: usize, t: usize, flow_target: i32) -> f64 {
        let n = self.head.len();
        let mut potential = vec![f64::INFINITY; n];
        potential[s] = 0.0;
        // DAG relaxation in node order handles the negative arcs.
        for v in 0..n {
            if !potential[v].is_finite() {
                continue;
            }
            for &e in &self.head[v] {
                if self.cap[e] > 0 {
                    let w = self.to[e];
                    debug_assert!(w > v, "initial network must be a DAG in node order");
                    let cand = potential[v] + self.cost[e];
                    if cand < potential[w] {
                        potential[w] = cand;
                    }
                }
            }
        }
        let mut total = 0.0;
        let mut flow = 0;
        while flow < flow_target {
            let mut dist = vec![f64::INFINITY; n];
            let mut prev_edge = vec![usize::MAX; n];
            dist[s] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(HeapItem(0.0, s));
            while let Some(HeapItem(c, v)) = heap.pop() {
                if c > dist[v] {
                    continue;
                }
                for &e in &self.head[v] {
                    if self.cap[e] <= 0 {
                        continue;
                    }
                    let w = self.to[e];
                    if !potential[v].is_finite() || !potential[w].is_finite() {
                        continue;
                    }
                    let rc = dist[v] + self.cost[e] + potential[v] - potential[w];
                    if rc < dist[w] - 1e-12 {
                        dist[w] = rc;
                        prev_edge[w] = e;
                        heap.push(HeapItem(rc, w));
                    }
                }
            }
            assert!(dist[t].is_finite(), "flow target unreachable");
            for v in 0..n {
                if dist[v].is_finite() {
                    potential[v] += dist[v];
                }
            }
            let mut v = t;
            while v != s {
                let e = prev_edge[v];
                self.cap[e] -= 1;
                self.cap[e ^ 1] += 1;
                total += self.cost[e];
                v = self.to[e ^ 1];
            }
            flow += 1;
        }
        total
    }
}

/// Exact optimum by the min-cost-flow reduction. Independent of the DP.
pub fn opt_min_cost_flow(
    dist: &DistMatrix,
    initial: &[usize],
    requests: &[usize],
) -> Result<OfflineSolution, OfflineError> {
    let n = dist.n();
    let k = initial.len();
    if k == 0 || k >= n {
        return Err(OfflineError::BadConfig(format!(
            "need 0 < k < n, got k={k} n={n}"
        )));
    }
    let m = requests.len();
    if m > 10_000 {
        return Err(OfflineError::TooLarge {
            states: m as u128,
            limit: 10_000,
        });
    }
    if m == 0 {
        return Ok(OfflineSolution {
            cost: 0.0,
            schedule: Vec::new(),
        });
    }
    // Node order: source, origins, (in_t, out_t) by time, sink.
    let source = 0;
    let origin = |i: usize| 1 + i;
    let req_in = |t: usize| 1 + k + 2 * t;
    let req_out = |t: usize| 2 + k + 2 * t;
    let sink = 1 + k + 2 * m;
    let big = 2.0 * (m + k + 1) as f64 * dist.max_dist() + 1.0;

    let mut net = Mcmf::new(sink + 1);
    let mut serve_edges = Vec::with_capacity(m);
    for i in 0..k {
        net.add(source, origin(i), 1, 0.0);
        net.add(origin(i), sink, 1, 0.0);
        for t in 0..m {
            net.add(origin(i), req_in(t), 1, dist.dist(initial[i], requests[t]));
        }
    }
    for t in 0..m {
        serve_edges.push(net.add(req_in(t), req_out(t), 1, -big));
        net.add(req_out(t), sink, 1, 0.0);
        for s in (t + 1)..m {
            net.add(
                req_out(t),
                req_in(s),
                1,
                dist.dist(requests[t], requests[s]),
            );
        }
    }
    let raw = net.run(source, sink, k as i32);
    for (t, &e) in serve_edges.iter().enumerate() {
        assert!(
            net.cap[e] == 0,
            "request {t} left unserved; reward too small"
        );
    }
    let cost = raw + m as f64 * big;

    // Extract chains: each origin's unit flow visits its requests in order.
    let mut schedule: Vec<Vec<MoveRec>> = vec![Vec::new(); m];
    for i in 0..k {
        let mut at = origin(i);
        let mut pos = initial[i];
        loop {
            // Follow the saturated outgoing arc.
            let mut next = None;
            for &e in &net.head[at] {
                if e % 2 == 0 && net.cap[e] == 0 {
                    // Forward arc fully used.
                    next = Some(e);
                    break;
                }
            }
            let e = next.expect("unit flow leaves every visited node");
            let w = net.to[e];
            if w == sink {
                break;
            }
            // w is req_in(t) for some t; its serve arc leads on.
            let t = (w - 1 - k) / 2;
            if requests[t] != pos {
                schedule[t].push(MoveRec {
                    server: i,
                    from: pos,
                    to: requests[t],
                });
            }
            pos = requests[t];
            at = req_out(t);
        }
    }
    Ok(OfflineSolution { cost, schedule })
}
