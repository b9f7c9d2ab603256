//! Communication graphs and left-stochastic combination matrices.
//!
//! Agents are indexed `0..K` in the API; the edge-list file format is
//! 1-based. Every node carries a self-loop, which keeps each generated
//! combination matrix aperiodic regardless of the rule used.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::linalg::{max_abs, Matrix};
use crate::rng;
use crate::{Error, Result};

/// Retries for [`generate_random_graph`] before giving up.
pub const MAX_GRAPH_RETRIES: usize = 1000;
/// Iteration cap for [`perron_vector`].
pub const MAX_PERRON_ITERATIONS: usize = 1_000_000;
/// Residual `‖Aπ − π‖∞` that power iteration must reach.
pub const PERRON_TOLERANCE: f64 = 1e-10;

/// Undirected graph with optional self-loops.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    num_agents: usize,
    /// Stored as `(u, v)` with `u < v`.
    edges: BTreeSet<(usize, usize)>,
    self_loops: Vec<bool>,
}

impl Graph {
    /// Graph with no edges; every node gets a self-loop.
    pub fn empty(num_agents: usize) -> Result<Self> {
        if num_agents == 0 {
            return Err(Error::invalid("num_agents", "must be at least 1"));
        }
        Ok(Self {
            num_agents,
            edges: BTreeSet::new(),
            self_loops: vec![true; num_agents],
        })
    }

    /// Builds a graph from 0-based undirected edges. Self-loops are implied
    /// on every node; `(u, u)` entries are accepted and ignored.
    pub fn from_edges(num_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut g = Self::empty(num_agents)?;
        for (u, v) in edges {
            g.add_edge(u, v)?;
        }
        Ok(g)
    }

    pub fn complete(num_agents: usize) -> Result<Self> {
        Self::from_edges(
            num_agents,
            (0..num_agents).flat_map(|u| (u + 1..num_agents).map(move |v| (u, v))),
        )
    }

    pub fn path(num_agents: usize) -> Result<Self> {
        Self::from_edges(num_agents, (1..num_agents).map(|v| (v - 1, v)))
    }

    pub fn add_edge(&mut self, u: usize, v: usize) -> Result<()> {
        let k = self.num_agents;
        if u >= k || v >= k {
            return Err(Error::invalid("edge", format!("({u}, {v}) out of range for K = {k}")));
        }
        if u != v {
            self.edges.insert((u.min(v), u.max(v)));
        }
        Ok(())
    }

    pub fn set_self_loop(&mut self, node: usize, present: bool) {
        self.self_loops[node] = present;
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_self_loop(&self, node: usize) -> bool {
        self.self_loops[node]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        if u == v {
            return self.self_loops[u];
        }
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    /// Neighbours of `k`, excluding `k` itself, in increasing order.
    pub fn neighbors(&self, k: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(u, v)| match () {
                _ if u == k => Some(v),
                _ if v == k => Some(u),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn degree(&self, k: usize) -> usize {
        self.edges.iter().filter(|&&(u, v)| u == k || v == k).count()
    }

    fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_agents];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Parses the edge-list format: first non-empty line `K`, then one
    /// `u v` pair per line (1-based). Lines starting with `#` are ignored.
    pub fn parse_edge_list(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (ln, first) = lines.next().ok_or("missing node count")?;
        let k: usize = first
            .parse()
            .map_err(|_| format!("line {ln}: expected node count, found `{first}`"))?;
        let mut g = Graph::empty(k).map_err(|e| format!("line {ln}: {e}"))?;
        for (ln, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [u, v] = parts.as_slice() else {
                return Err(format!("line {ln}: expected `u v`, found `{line}`"));
            };
            let parse = |s: &str| -> std::result::Result<usize, String> {
                match s.parse::<usize>() {
                    Ok(x) if (1..=k).contains(&x) => Ok(x - 1),
                    _ => Err(format!("line {ln}: node `{s}` not in 1..={k}")),
                }
            };
            g.add_edge(parse(u)?, parse(v)?).map_err(|e| format!("line {ln}: {e}"))?;
        }
        Ok(g)
    }

    pub fn to_edge_list(&self) -> String {
        let mut s = format!("{}\n", self.num_agents);
        for &(u, v) in &self.edges {
            let _ = writeln!(s, "{} {}", u + 1, v + 1);
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text).map_err(|reason| Error::parse(path, reason))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_edge_list()).map_err(|e| Error::io(path, e))
    }
}

/// Erdős–Rényi graph with self-loops on every node, regenerated with
/// `seed + attempt` until connected.
pub fn generate_random_graph(num_agents: usize, edge_probability: f64, seed: u64) -> Result<Graph> {
    if num_agents == 0 {
        return Err(Error::invalid("num_agents", "must be at least 1"));
    }
    if !(edge_probability > 0.0 && edge_probability <= 1.0) {
        return Err(Error::invalid(
            "edge_probability",
            format!("{edge_probability} not in (0, 1]"),
        ));
    }
    for attempt in 0..MAX_GRAPH_RETRIES {
        let mut rng = rng::seeded(seed.wrapping_add(attempt as u64));
        let mut g = Graph::empty(num_agents)?;
        for u in 0..num_agents {
            for v in u + 1..num_agents {
                if rng.random::<f64>() < edge_probability {
                    g.add_edge(u, v)?;
                }
            }
        }
        if check_strong_connectivity(&g) {
            return Ok(g);
        }
    }
    Err(Error::GraphRetriesExhausted {
        retries: MAX_GRAPH_RETRIES,
    })
}

/// True iff every ordered pair of nodes is joined by a path (BFS from every
/// node).
pub fn check_strong_connectivity(g: &Graph) -> bool {
    let adj = g.adjacency_lists();
    let k = g.num_agents();
    (0..k).all(|start| {
        let mut seen = vec![false; k];
        seen[start] = true;
        let mut reached = 1;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        reached == k
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationRule {
    /// `a_lk = 1 / max(n_l, n_k)` off the diagonal with `n_k = deg(k) + 1`;
    /// symmetric and doubly stochastic.
    #[default]
    Metropolis,
    /// `a_lk = 1 / n_k` for every `l ∈ N_k ∪ {k}`.
    UniformAveraging,
}

impl std::str::FromStr for CombinationRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "metropolis" => Ok(Self::Metropolis),
            "uniform" | "uniform_averaging" => Ok(Self::UniformAveraging),
            other => Err(format!("unknown combination rule `{other}` (metropolis|uniform)")),
        }
    }
}

/// Left-stochastic combination matrix `A = [a_lk]` with its Perron vector.
///
/// Column `k` holds the weights agent `k` assigns to its neighbours' states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationMatrix {
    entries: Matrix,
    perron: Vec<f64>,
    /// Per column `k`: `(l, a_lk)` for every nonzero entry, increasing `l`.
    #[serde(skip)]
    columns: Vec<Vec<(usize, f64)>>,
}

impl CombinationMatrix {
    /// Validates `entries` (square, nonnegative, unit column sums, at least
    /// one positive diagonal entry) and computes the Perron vector.
    pub fn from_entries(entries: Matrix) -> Result<Self> {
        let k = entries.rows();
        if k == 0 || entries.cols() != k {
            return Err(Error::InvalidMatrix(format!(
                "expected a nonempty square matrix, got {}x{}",
                entries.rows(),
                entries.cols()
            )));
        }
        for j in 0..k {
            let mut sum = 0.0;
            for i in 0..k {
                let a = entries[(i, j)];
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::InvalidMatrix(format!("entry ({i}, {j}) = {a} is not a nonnegative finite value")));
                }
                sum += a;
            }
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidMatrix(format!("column {j} sums to {sum}")));
            }
        }
        if (0..k).all(|i| entries[(i, i)] <= 0.0) {
            return Err(Error::InvalidMatrix("no positive diagonal entry".into()));
        }
        let perron = perron_vector(&entries)?;
        let columns = (0..k)
            .map(|j| (0..k).filter(|&i| entries[(i, j)] > 0.0).map(|i| (i, entries[(i, j)])).collect())
            .collect();
        Ok(Self {
            entries,
            perron,
            columns,
        })
    }

    pub fn identity(num_agents: usize) -> Result<Self> {
        Self::from_entries(Matrix::identity(num_agents))
    }

    pub fn num_agents(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn get(&self, l: usize, k: usize) -> f64 {
        self.entries[(l, k)]
    }

    pub fn perron(&self) -> &[f64] {
        &self.perron
    }

    /// Nonzero `(l, a_lk)` pairs of column `k`.
    pub fn column(&self, k: usize) -> &[(usize, f64)] {
        &self.columns[k]
    }

    /// Relabels agents: new agent `perm[i]` is old agent `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let k = self.num_agents();
        let mut m = Matrix::zeros(k, k);
        for l in 0..k {
            for j in 0..k {
                m[(perm[l], perm[j])] = self.entries[(l, j)];
            }
        }
        Self::from_entries(m)
    }

    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        let k = self.num_agents();
        (0..k).all(|i| (self.entries.row(i).iter().sum::<f64>() - 1.0).abs() <= tol)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let k = self.num_agents();
        (0..k).all(|i| (0..i).all(|j| (self.entries[(i, j)] - self.entries[(j, i)]).abs() <= tol))
    }

    /// True iff `a_lk > 0` only where `l ∈ N_k ∪ {k}` in `g`.
    pub fn respects_graph(&self, g: &Graph) -> bool {
        let k = self.num_agents();
        k == g.num_agents()
            && (0..k).all(|j| (0..k).all(|i| self.entries[(i, j)] == 0.0 || i == j || g.has_edge(i, j)))
    }
}

pub fn build_combination_matrix(g: &Graph, rule: CombinationRule) -> Result<CombinationMatrix> {
    if !check_strong_connectivity(g) {
        return Err(Error::Disconnected);
    }
    let k = g.num_agents();
    if let Some(node) = (0..k).find(|&i| !g.has_self_loop(i)) {
        return Err(Error::MissingSelfLoop { node });
    }
    let size: Vec<f64> = (0..k).map(|i| (g.degree(i) + 1) as f64).collect();
    let mut a = Matrix::zeros(k, k);
    match rule {
        CombinationRule::Metropolis => {
            for (u, v) in g.edges() {
                let w = 1.0 / size[u].max(size[v]);
                a[(u, v)] = w;
                a[(v, u)] = w;
            }
            for j in 0..k {
                let off: f64 = (0..k).filter(|&i| i != j).map(|i| a[(i, j)]).sum();
                a[(j, j)] = 1.0 - off;
            }
        }
        CombinationRule::UniformAveraging => {
            for j in 0..k {
                let w = 1.0 / size[j];
                a[(j, j)] = w;
                for i in g.neighbors(j) {
                    a[(i, j)] = w;
                }
            }
        }
    }
    CombinationMatrix::from_entries(a)
}

/// Perron vector of a left-stochastic matrix by power iteration: the
/// positive `π` with `Aπ = π` and `Σπ = 1`.
pub fn perron_vector(a: &Matrix) -> Result<Vec<f64>> {
    let k = a.rows();
    let mut pi = vec![1.0 / k as f64; k];
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_PERRON_ITERATIONS {
        let mut next = a.mul_vec(&pi);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        let diff: Vec<f64> = next.iter().zip(&pi).map(|(x, y)| x - y).collect();
        pi = next;
        let new_residual = max_abs(&diff);
        // Stop at the round-off floor; the tolerance check happens below.
        if new_residual <= 1e-15 || (new_residual < PERRON_TOLERANCE * 1e-3 && new_residual >= residual) {
            residual = new_residual;
            break;
        }
        residual = new_residual;
    }
    let check = a.mul_vec(&pi);
    let true_residual = check.iter().zip(&pi).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if !(true_residual < PERRON_TOLERANCE) {
        return Err(Error::PerronNotConverged {
            iterations: MAX_PERRON_ITERATIONS,
            residual: true_residual.max(residual),
        });
    }
    if let Some((index, &value)) = pi.iter().enumerate().find(|(_, &v)| v <= 1e-12) {
        return Err(Error::PerronNotPositive { index, value });
    }
    Ok(pi)
}

/// Second-largest eigenvalue modulus, from a dense Schur decomposition.
/// Strictly below one for every matrix satisfying the connectivity and
/// self-loop conditions.
pub fn second_largest_eigenvalue_modulus(a: &Matrix) -> f64 {
    let k = a.rows();
    if k < 2 {
        return 0.0;
    }
    let m = DMatrix::from_row_slice(k, k, a.as_slice());
    let mut moduli: Vec<f64> = m.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|x, y| y.total_cmp(x));
    moduli[1]
}
