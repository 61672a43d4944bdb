//! Communication graphs, Metropolis-Hastings walk matrices and their spectra.
//!
//! Every graph carries a self-loop on each device and `deg(i)` counts it, so
//! the walk chains built here are aperiodic on any connected topology.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{seed_stream, Purpose, Stream};

/// Largest device count for which dense matrices are built.
pub const MAX_DEVICES: usize = 4096;

const EXPANDER_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TopologyKind {
    Complete,
    Ring,
    Expander { c: usize },
    Custom,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::Complete => write!(f, "complete"),
            TopologyKind::Ring => write!(f, "ring"),
            TopologyKind::Expander { c } => write!(f, "expander({c})"),
            TopologyKind::Custom => write!(f, "custom"),
        }
    }
}

/// Undirected, connected device graph with a self-loop on every device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    neighbors: Vec<Vec<usize>>,
    kind: TopologyKind,
}

impl Graph {
    /// Builds a graph from adjacency lists. Self-loops are added when absent;
    /// asymmetric or disconnected inputs are rejected.
    pub fn from_adjacency(adjacency: Vec<Vec<usize>>, kind: TopologyKind) -> Result<Self> {
        let n = adjacency.len();
        check_size(n)?;
        let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(n);
        for (i, list) in adjacency.into_iter().enumerate() {
            let mut set = BTreeSet::new();
            for j in list {
                if j >= n {
                    return Err(Error::Topology(format!(
                        "device {i} lists neighbor {j} outside 0..{n}"
                    )));
                }
                set.insert(j);
            }
            set.insert(i);
            sets.push(set);
        }
        for (i, set) in sets.iter().enumerate() {
            for &j in set {
                if !sets[j].contains(&i) {
                    return Err(Error::Topology(format!(
                        "asymmetric adjacency: {i} lists {j} but {j} does not list {i}"
                    )));
                }
            }
        }
        let graph = Graph {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
            kind,
        };
        if !graph.is_connected() {
            return Err(Error::Topology("graph is disconnected".into()));
        }
        Ok(graph)
    }

    /// Parses the text adjacency format: one `id: j1 j2 ...` line per device.
    /// Blank lines and `#` comments are ignored.
    pub fn parse_adjacency(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, Vec<usize>)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Topology(format!("line {}: {what}", lineno + 1));
            let (id, rest) = line.split_once(':').ok_or_else(|| bad("missing ':'"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("bad device id"))?;
            let list = rest
                .split_whitespace()
                .map(|tok| tok.parse::<usize>().map_err(|_| bad("bad neighbor id")))
                .collect::<Result<Vec<_>>>()?;
            entries.push((id, list));
        }
        let n = entries.len();
        let mut adjacency = vec![None; n];
        for (id, list) in entries {
            if id >= n {
                return Err(Error::Topology(format!(
                    "device id {id} out of range for {n} devices"
                )));
            }
            if adjacency[id].replace(list).is_some() {
                return Err(Error::Topology(format!("device {id} listed twice")));
            }
        }
        let adjacency = adjacency
            .into_iter()
            .map(|l| l.expect("every id in 0..n seen exactly once"))
            .collect();
        Graph::from_adjacency(adjacency, TopologyKind::Custom)
    }

    pub fn load_adjacency(path: &Path) -> Result<Self> {
        Graph::parse_adjacency(&std::fs::read_to_string(path)?)
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    /// Sorted neighbor ids of `i`, including `i` itself.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `|N(i)|`, self-loop included.
    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == n
    }
}

fn check_size(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Topology(format!("need n >= 2 devices, got {n}")));
    }
    if n > MAX_DEVICES {
        return Err(Error::Topology(format!(
            "n = {n} exceeds the dense limit of {MAX_DEVICES} devices"
        )));
    }
    Ok(())
}

/// Builds one of the standard topologies. Only expanders consume randomness.
pub fn build_topology(kind: TopologyKind, n: usize, seed: u64) -> Result<Graph> {
    check_size(n)?;
    match kind {
        TopologyKind::Complete => {
            let adjacency = (0..n).map(|_| (0..n).collect()).collect();
            Graph::from_adjacency(adjacency, kind)
        }
        TopologyKind::Ring => {
            if n < 3 {
                return Err(Error::Topology(format!("ring needs n >= 3, got {n}")));
            }
            let adjacency = (0..n).map(|i| vec![(i + n - 1) % n, (i + 1) % n]).collect();
            Graph::from_adjacency(adjacency, kind)
        }
        TopologyKind::Expander { c } => {
            if c < 2 || c >= n {
                return Err(Error::Topology(format!(
                    "expander needs 2 <= c < n, got c = {c}, n = {n}"
                )));
            }
            if (c * n) % 2 != 0 {
                return Err(Error::Topology(format!(
                    "expander needs c*n even, got c = {c}, n = {n}"
                )));
            }
            let mut rng = seed_stream(seed, Purpose::Topology, &[n as u64, c as u64]);
            for _ in 0..EXPANDER_ATTEMPTS {
                if let Some(adjacency) = random_regular(n, c, &mut rng) {
                    if let Ok(g) = Graph::from_adjacency(adjacency, kind) {
                        return Ok(g);
                    }
                }
            }
            Err(Error::Topology(format!(
                "no connected simple {c}-regular graph on {n} devices after {EXPANDER_ATTEMPTS} attempts"
            )))
        }
        TopologyKind::Custom => Err(Error::Topology(
            "custom topologies are loaded from an adjacency file".into(),
        )),
    }
}

/// One attempt at a simple c-regular graph: random matching of the `c*n`
/// half-edges, restricted at every draw to partners that keep the graph simple.
fn random_regular(n: usize, c: usize, rng: &mut Stream) -> Option<Vec<Vec<usize>>> {
    let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, c)).collect();
    stubs.shuffle(rng);
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    while let Some(u) = stubs.pop() {
        let partners: Vec<usize> = stubs
            .iter()
            .enumerate()
            .filter(|&(_, &v)| v != u && !adjacency[u].contains(&v))
            .map(|(idx, _)| idx)
            .collect();
        if partners.is_empty() {
            return None;
        }
        let idx = partners[rng.random_range(0..partners.len())];
        let v = stubs.swap_remove(idx);
        adjacency[u].insert(v);
        adjacency[v].insert(u);
    }
    Some(adjacency.into_iter().map(|s| s.into_iter().collect()).collect())
}

/// Row-stochastic walk matrix with cached per-row supports for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    p: Vec<f64>,
    support: Vec<Vec<(usize, f64)>>,
}

impl TransitionMatrix {
    /// Wraps a dense row-major matrix. Rows must be stochastic within 1e-12.
    pub fn from_dense(n: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != n * n {
            return Err(Error::Topology(format!(
                "transition matrix has {} entries, expected {}",
                p.len(),
                n * n
            )));
        }
        for i in 0..n {
            let row = &p[i * n..(i + 1) * n];
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Topology(format!("row {i} has entries outside [0,1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Topology(format!("row {i} sums to {sum}")));
            }
        }
        let support = (0..n)
            .map(|i| {
                (0..n)
                    .filter_map(|j| {
                        let x = p[i * n + j];
                        (x > 0.0).then_some((j, x))
                    })
                    .collect()
            })
            .collect();
        Ok(TransitionMatrix { n, p, support })
    }

    /// The all-self-loop chain.
    pub fn identity(n: usize) -> Self {
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            p[i * n + i] = 1.0;
        }
        TransitionMatrix::from_dense(n, p).expect("identity is stochastic")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    /// Draws the next device from row `i`.
    pub fn sample_next<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.sample_next_with(i, u)
    }

    /// Inverse-CDF lookup for a fixed uniform draw `u` in `[0,1)`, scanning
    /// the support in ascending device id.
    pub fn sample_next_with(&self, i: usize, u: f64) -> usize {
        let support = &self.support[i];
        let mut cum = 0.0;
        for &(j, pj) in support {
            cum += pj;
            if u < cum {
                return j;
            }
        }
        support.last().map(|&(j, _)| j).unwrap_or(i)
    }
}

/// Metropolis-Hastings chain with a uniform stationary distribution:
/// `p[i][j] = min{1/deg(i), 1/deg(j)}` off the diagonal.
pub fn mh_transition(g: &Graph) -> TransitionMatrix {
    let n = g.n();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let deg_i = g.degree(i);
        let mut off = 0.0;
        for &j in g.neighbors(i) {
            if j != i {
                let x = 1.0 / deg_i.max(g.degree(j)) as f64;
                p[i * n + j] = x;
                off += x;
            }
        }
        p[i * n + i] = 1.0 - off;
    }
    TransitionMatrix::from_dense(n, p).expect("MH rows are stochastic")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_p: f64,
}

impl SpectralSummary {
    pub fn second(&self) -> f64 {
        self.eigenvalues.get(1).copied().unwrap_or(0.0)
    }

    pub fn smallest(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// Full spectrum of a symmetric walk matrix and
/// `lambda_p = (max{|λ2|, |λn|} + 1) / 2`.
pub fn spectral_summary(p: &TransitionMatrix) -> Result<SpectralSummary> {
    let n = p.n();
    for i in 0..n {
        for j in (i + 1)..n {
            if (p.get(i, j) - p.get(j, i)).abs() > 1e-12 {
                return Err(Error::Numeric(format!(
                    "transition matrix not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let m = DMatrix::from_row_slice(n, n, p.as_slice());
    let eig = m.try_symmetric_eigen(f64::EPSILON, 100_000).ok_or_else(|| {
        Error::Numeric(format!("symmetric eigensolver did not converge on {n}x{n} matrix"))
    })?;
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let tail = if n >= 2 {
        eigenvalues[1].abs().max(eigenvalues[n - 1].abs())
    } else {
        0.0
    };
    Ok(SpectralSummary {
        eigenvalues,
        lambda_p: (tail + 1.0) / 2.0,
    })
}

/// `τ^k = min{k, max{⌈ln(2ζk) / ln(1/λ_P)⌉, K_P}}`.
pub fn mixing_time_tau(lambda_p: f64, zeta: f64, k: u64, k_p: u64) -> Result<u64> {
    if !(lambda_p > 0.0 && lambda_p < 1.0) {
        return Err(Error::Analysis(format!(
            "chain not mixing (λ_P ≥ 1): lambda_p = {lambda_p}"
        )));
    }
    if !(zeta > 0.0) || k == 0 || k_p == 0 {
        return Err(Error::Analysis(format!(
            "mixing time needs zeta > 0, k >= 1, K_P >= 1 (zeta = {zeta}, k = {k}, K_P = {k_p})"
        )));
    }
    let ratio = (2.0 * zeta * k as f64).ln() / (1.0 / lambda_p).ln();
    let steps = ceil_tolerant(ratio).max(0.0) as u64;
    Ok(k.min(steps.max(k_p)))
}

/// Ceiling that treats values within 1e-9 of an integer as that integer, so
/// `ln 16 / ln 2` is 4 and not 5.
pub(crate) fn ceil_tolerant(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x.ceil()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn complete_graph_is_fully_adjacent() {
        let g = build_topology(TopologyKind::Complete, 4, 0).unwrap();
        for i in 0..4 {
            assert_eq!(g.neighbors(i), &[0, 1, 2, 3]);
            assert_eq!(g.degree(i), 4);
        }
    }

    #[test]
    fn ring_neighbors_include_self() {
        let g = build_topology(TopologyKind::Ring, 5, 0).unwrap();
        assert_eq!(g.neighbors(2), &[1, 2, 3]);
        assert_eq!(g.neighbors(0), &[0, 1, 4]);
        assert!((0..5).all(|i| g.degree(i) == 3));
    }

    #[test]
    fn expander_is_connected_and_regular() {
        let g = build_topology(TopologyKind::Expander { c: 3 }, 20, 7).unwrap();
        // independent oracle: degree count and DFS over the raw lists
        let mut stack = vec![0];
        let mut seen = [false; 20];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            let others: Vec<_> = g.neighbors(v).iter().filter(|&&w| w != v).collect();
            assert_eq!(others.len(), 3, "device {v}");
            for &&w in &others {
                assert!(g.neighbors(w).contains(&v));
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(g, build_topology(TopologyKind::Expander { c: 3 }, 20, 7).unwrap());
    }

    #[test]
    fn invalid_constructions_name_the_constraint() {
        let msg = |r: Result<Graph>| r.unwrap_err().to_string();
        assert!(msg(build_topology(TopologyKind::Complete, 1, 0)).contains("n >= 2"));
        assert!(msg(build_topology(TopologyKind::Ring, 2, 0)).contains("ring needs n >= 3"));
        assert!(msg(build_topology(TopologyKind::Expander { c: 3 }, 5, 0)).contains("c*n even"));
        assert!(msg(build_topology(TopologyKind::Expander { c: 6 }, 6, 0)).contains("c < n"));
        assert!(msg(build_topology(TopologyKind::Complete, MAX_DEVICES + 1, 0)).contains("dense limit"));
    }

    #[test]
    fn mh_ring_of_four() {
        let p = mh_transition(&build_topology(TopologyKind::Ring, 4, 0).unwrap());
        for i in 0..4 {
            assert!(close(p.get(i, (i + 1) % 4), 1.0 / 3.0, 1e-15));
            assert!(close(p.get(i, (i + 3) % 4), 1.0 / 3.0, 1e-15));
            assert!(close(p.get(i, i), 1.0 / 3.0, 1e-15));
            assert_eq!(p.get(i, (i + 2) % 4), 0.0);
        }
    }

    #[test]
    fn mh_complete_of_five() {
        let p = mh_transition(&build_topology(TopologyKind::Complete, 5, 0).unwrap());
        assert!(p.as_slice().iter().all(|&x| close(x, 0.2, 1e-15)));
    }

    #[test]
    fn mh_star_uses_smaller_acceptance() {
        // hub 0 with leaves 1..=3: deg(hub) = 4, deg(leaf) = 2
        let g = Graph::parse_adjacency("0: 1 2 3\n1: 0\n2: 0\n3: 0\n").unwrap();
        let p = mh_transition(&g);
        assert_eq!(p.get(1, 0), 0.25);
        assert_eq!(p.get(1, 1), 0.75);
        assert_eq!(p.get(0, 1), 0.25);
        assert_eq!(p.get(0, 0), 0.25);
        for i in 0..4 {
            assert!(close(p.row(i).iter().sum::<f64>(), 1.0, 1e-12));
        }
    }

    #[test]
    fn spectrum_of_complete_five() {
        let s = spectral_summary(&mh_transition(&build_topology(TopologyKind::Complete, 5, 0).unwrap()))
            .unwrap();
        assert!(close(s.eigenvalues[0], 1.0, 1e-9));
        assert!(s.eigenvalues[1..].iter().all(|&x| close(x, 0.0, 1e-9)));
        assert!(close(s.lambda_p, 0.5, 1e-9));
    }

    #[test]
    fn spectrum_of_ring_four_matches_circulant() {
        let s = spectral_summary(&mh_transition(&build_topology(TopologyKind::Ring, 4, 0).unwrap()))
            .unwrap();
        // (1 + 2cos(2πk/4))/3 for k = 0..4
        let mut expected: Vec<f64> = (0..4)
            .map(|k| (1.0 + 2.0 * (2.0 * std::f64::consts::PI * k as f64 / 4.0).cos()) / 3.0)
            .collect();
        expected.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in s.eigenvalues.iter().zip(&expected) {
            assert!(close(*a, *b, 1e-9), "{a} vs {b}");
        }
        assert!(close(s.lambda_p, 2.0 / 3.0, 1e-9));
    }

    #[test]
    fn sample_next_golden_trace() {
        // ring(4) row 0: support {0,1,3} ascending, each 1/3
        let p = mh_transition(&build_topology(TopologyKind::Ring, 4, 0).unwrap());
        assert_eq!(p.sample_next_with(0, 0.0), 0);
        assert_eq!(p.sample_next_with(0, 0.5), 1);
        assert_eq!(p.sample_next_with(0, 0.9), 3);
    }

    #[test]
    fn sample_next_degenerate_row() {
        let p = TransitionMatrix::identity(3);
        let mut rng = Stream::seed_from_u64(1);
        assert!((0..100).all(|_| p.sample_next(1, &mut rng) == 1));
    }

    #[test]
    fn sample_next_frequencies_within_three_sigma() {
        let g = Graph::parse_adjacency("0: 1 2 3\n1: 0\n2: 0\n3: 0\n").unwrap();
        let p = mh_transition(&g);
        let mut rng = Stream::seed_from_u64(11);
        let draws = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[p.sample_next(1, &mut rng)] += 1;
        }
        for j in 0..4 {
            let pj = p.get(1, j);
            let sd = (draws as f64 * pj * (1.0 - pj)).sqrt();
            assert!((counts[j] as f64 - draws as f64 * pj).abs() <= 3.0 * sd + 1e-9, "{j}: {counts:?}");
        }
    }

    #[test]
    fn mixing_time_examples() {
        assert_eq!(mixing_time_tau(0.5, 1.0, 8, 1).unwrap(), 4);
        assert_eq!(mixing_time_tau(0.5, 1.0, 1, 1).unwrap(), 1);
        assert_eq!(mixing_time_tau(0.9, 1.0, 100, 3).unwrap(), 51);
        assert!(mixing_time_tau(1.0, 1.0, 5, 1)
            .unwrap_err()
            .to_string()
            .contains("chain not mixing"));
    }

    #[test]
    fn adjacency_file_rejects_bad_graphs() {
        assert!(Graph::parse_adjacency("0: 1\n1:\n").unwrap_err().to_string().contains("asymmetric"));
        assert!(Graph::parse_adjacency("0: 1\n1: 0\n2: 3\n3: 2\n")
            .unwrap_err()
            .to_string()
            .contains("disconnected"));
        let g = Graph::parse_adjacency("# tiny\n0: 1 0\n1: 0\n").unwrap();
        assert_eq!(g.neighbors(1), &[0, 1]);
    }
}
