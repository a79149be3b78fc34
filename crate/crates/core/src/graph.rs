//! Weighted directed communication topologies and their Laplacians.
//!
//! Node ids are 1-based in the public construction API and the on-disk edge
//! format; storage is a dense 0-based weight matrix. Entry `(i, j)` of the
//! weight matrix is a_ij > 0 exactly when the directed edge (j → i) exists,
//! read as "node i hears node j".
//!
//! The on-disk format is a plain-text edge list: first data line `n <count>`,
//! then one `from to [weight]` line per edge. Blank lines and `#` comments are
//! allowed. When every edge line omits the weight, Metropolis weights
//! 1/(1 + in-degree) are applied on load.

use crate::rng::{RandomStream, StreamPurpose};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Parsers refuse node counts beyond this; dense n×n storage is the target
/// scale and untrusted input must not drive allocation.
pub const MAX_NODES: usize = 4096;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("node count must be between 2 and {MAX_NODES}, got {0}")]
    InvalidNodeCount(usize),
    #[error("node id {id} out of range 1..={n}")]
    NodeOutOfRange { id: usize, n: usize },
    #[error("self-loop on node {id}")]
    SelfLoop { id: usize },
    #[error("edge ({from} -> {to}) has non-positive weight {weight}")]
    NonPositiveWeight { from: usize, to: usize, weight: f64 },
    #[error("duplicate edge ({from} -> {to})")]
    DuplicateEdge { from: usize, to: usize },
    #[error("graph is not strongly connected: every node must be able to reach every other node over directed paths")]
    NotStronglyConnected,
    #[error("left eigenvector has non-positive component at node {node}; numerical failure on this input")]
    NonPositiveComponent { node: usize },
    #[error("graph file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Weighted digraph; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Digraph {
    n: usize,
    weights: DMatrix<f64>,
}

impl Digraph {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Dense weight matrix; entry (i, j) is a_ij, the weight node i applies
    /// to what it hears from node j.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn edge_count(&self) -> usize {
        self.weights.iter().filter(|w| **w > 0.0).count()
    }

    /// True when every present edge has weight exactly 1.
    pub fn is_unit_weighted(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0 || w == 1.0)
    }

    /// Edges as 1-based (from, to, weight) triples, sorted by (from, to).
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for from in 0..self.n {
            for to in 0..self.n {
                let w = self.weights[(to, from)];
                if w > 0.0 {
                    out.push((from + 1, to + 1, w));
                }
            }
        }
        out
    }
}

fn check_edge_endpoints(n: usize, from: usize, to: usize) -> Result<(usize, usize), GraphError> {
    for id in [from, to] {
        if id == 0 || id > n {
            return Err(GraphError::NodeOutOfRange { id, n });
        }
    }
    if from == to {
        return Err(GraphError::SelfLoop { id: from });
    }
    Ok((from - 1, to - 1))
}

/// Builds a digraph from 1-based (from, to, weight) triples.
pub fn build_digraph(n: usize, edges: &[(usize, usize, f64)]) -> Result<Digraph, GraphError> {
    if !(2..=MAX_NODES).contains(&n) {
        return Err(GraphError::InvalidNodeCount(n));
    }
    let mut weights = DMatrix::zeros(n, n);
    for &(from, to, w) in edges {
        let (f, t) = check_edge_endpoints(n, from, to)?;
        if !(w > 0.0) || !w.is_finite() {
            return Err(GraphError::NonPositiveWeight { from, to, weight: w });
        }
        if weights[(t, f)] != 0.0 {
            return Err(GraphError::DuplicateEdge { from, to });
        }
        weights[(t, f)] = w;
    }
    Ok(Digraph { n, weights })
}

/// True iff every ordered node pair is joined by a directed path.
///
/// Two reachability sweeps from node 0: one along edge direction, one on the
/// transpose.
pub fn is_strongly_connected(g: &Digraph) -> bool {
    let n = g.n;
    let sweep = |transpose: bool| -> bool {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                // Forward: u -> v exists when v hears u, i.e. weights[(v, u)] > 0.
                let w = if transpose { g.weights[(u, v)] } else { g.weights[(v, u)] };
                if w > 0.0 && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    };
    sweep(false) && sweep(true)
}

/// Graph Laplacian L = D − A with in-degree diagonal D.
#[derive(Debug, Clone)]
pub struct Laplacian {
    pub matrix: DMatrix<f64>,
    /// Weighted in-degrees d_i = Σ_j a_ij.
    pub degrees: DVector<f64>,
    pub max_degree: f64,
}

pub fn laplacian(g: &Digraph) -> Laplacian {
    let n = g.n;
    let degrees = DVector::from_fn(n, |i, _| g.weights.row(i).sum());
    let mut matrix = -g.weights.clone();
    for i in 0..n {
        matrix[(i, i)] = degrees[i];
    }
    let max_degree = degrees.max();
    Laplacian { matrix, degrees, max_degree }
}

/// Weights an unweighted edge set with 1/(1 + in-degree) per receiving node.
///
/// The in-degree here is the in-neighbor count, so every weighted in-degree
/// ends up strictly below 1 and unit step size is always admissible.
pub fn metropolis_weights(n: usize, edges: &[(usize, usize)]) -> Result<Digraph, GraphError> {
    if !(2..=MAX_NODES).contains(&n) {
        return Err(GraphError::InvalidNodeCount(n));
    }
    let mut present = DMatrix::from_element(n, n, false);
    for &(from, to) in edges {
        let (f, t) = check_edge_endpoints(n, from, to)?;
        if present[(t, f)] {
            return Err(GraphError::DuplicateEdge { from, to });
        }
        present[(t, f)] = true;
    }
    let mut weights = DMatrix::zeros(n, n);
    for i in 0..n {
        let indeg = (0..n).filter(|&j| present[(i, j)]).count();
        let w = 1.0 / (1.0 + indeg as f64);
        for j in 0..n {
            if present[(i, j)] {
                weights[(i, j)] = w;
            }
        }
    }
    let g = Digraph { n, weights };
    if !is_strongly_connected(&g) {
        return Err(GraphError::NotStronglyConnected);
    }
    Ok(g)
}

/// Positive left null vector of the Laplacian, normalized to sum 1.
#[derive(Debug, Clone)]
pub struct LeftEigenvector {
    pub omega: DVector<f64>,
    /// max_j |(ωᵀL)_j| after normalization.
    pub residual: f64,
}

/// Eigenvalues with magnitude below this fraction of ‖L‖₂ count as zero.
const ZERO_EIG_REL_TOL: f64 = 1e-9;

/// Solves ωᵀL = 0 with 1ᵀω = 1 and ω > 0.
///
/// The null direction comes from the SVD of Lᵀ; simplicity of the zero
/// eigenvalue is checked on the eigenvalue spectrum, not assumed.
pub fn left_eigenvector(lap: &Laplacian) -> Result<LeftEigenvector, GraphError> {
    let l = &lap.matrix;
    let n = l.nrows();
    let norm_l = l.clone().svd(false, false).singular_values.max();
    let zero_tol = ZERO_EIG_REL_TOL * norm_l.max(f64::MIN_POSITIVE);

    let eigs = l.clone().complex_eigenvalues();
    let zero_count = eigs.iter().filter(|ev| ev.norm() < zero_tol).count();
    if zero_count != 1 {
        return Err(GraphError::NotStronglyConnected);
    }

    let svd = l.transpose().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut min_idx = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[min_idx] {
            min_idx = i;
        }
    }
    let raw = v_t.row(min_idx).transpose();
    let sum: f64 = raw.sum();
    if sum.abs() < 1e-300 {
        return Err(GraphError::NonPositiveComponent { node: 1 });
    }
    let omega = raw / sum;
    for i in 0..n {
        if !(omega[i] > 0.0) {
            return Err(GraphError::NonPositiveComponent { node: i + 1 });
        }
    }
    let residual = (omega.transpose() * l).abs().max();
    Ok(LeftEigenvector { omega, residual })
}

/// Random strongly connected digraph with unit weights: a Hamiltonian cycle
/// over a random permutation plus extra edges drawn independently per ordered
/// pair. Deterministic under `seed`.
pub fn random_strongly_connected(n: usize, extra_edge_prob: f64, seed: u64) -> Digraph {
    assert!((2..=MAX_NODES).contains(&n), "node count {n} out of range");
    assert!((0.0..=1.0).contains(&extra_edge_prob));
    let mut rng = RandomStream::new(seed, 0, 0, StreamPurpose::GraphGen);

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        perm.swap(i, j);
    }

    let mut weights = DMatrix::zeros(n, n);
    for k in 0..n {
        let from = perm[k];
        let to = perm[(k + 1) % n];
        weights[(to, from)] = 1.0;
    }
    for from in 0..n {
        for to in 0..n {
            if from != to && weights[(to, from)] == 0.0 && rng.next_f64() < extra_edge_prob {
                weights[(to, from)] = 1.0;
            }
        }
    }
    Digraph { n, weights }
}

/// Parses the plain-text edge-list format.
///
/// All-unweighted edge lines get Metropolis weights (which requires strong
/// connectivity); all-weighted lines are taken literally. Mixing the two is
/// an error.
pub fn parse_graph_file(text: &str) -> Result<Digraph, GraphError> {
    let mut n: Option<usize> = None;
    let mut weighted: Vec<(usize, usize, f64)> = Vec::new();
    let mut unweighted: Vec<(usize, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        match n {
            None => {
                if tokens.len() != 2 || tokens[0] != "n" {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: "expected header line `n <count>`".into(),
                    });
                }
                let count: usize = tokens[1].parse().map_err(|_| GraphError::Parse {
                    line: line_no,
                    msg: format!("invalid node count `{}`", tokens[1]),
                })?;
                if !(2..=MAX_NODES).contains(&count) {
                    return Err(GraphError::InvalidNodeCount(count));
                }
                n = Some(count);
            }
            Some(count) => {
                if tokens.len() != 2 && tokens.len() != 3 {
                    return Err(GraphError::Parse {
                        line: line_no,
                        msg: "expected `from to` or `from to weight`".into(),
                    });
                }
                let parse_id = |tok: &str| -> Result<usize, GraphError> {
                    tok.parse().map_err(|_| GraphError::Parse {
                        line: line_no,
                        msg: format!("invalid node id `{tok}`"),
                    })
                };
                let from = parse_id(tokens[0])?;
                let to = parse_id(tokens[1])?;
                check_edge_endpoints(count, from, to)?;
                if tokens.len() == 3 {
                    let w: f64 = tokens[2].parse().map_err(|_| GraphError::Parse {
                        line: line_no,
                        msg: format!("invalid weight `{}`", tokens[2]),
                    })?;
                    weighted.push((from, to, w));
                } else {
                    unweighted.push((from, to));
                }
            }
        }
    }

    let n = n.ok_or(GraphError::Parse { line: 0, msg: "missing header line `n <count>`".into() })?;
    match (weighted.is_empty(), unweighted.is_empty()) {
        (true, true) => Err(GraphError::Parse {
            line: 0,
            msg: "graph has no edges".into(),
        }),
        (false, false) => Err(GraphError::Parse {
            line: 0,
            msg: "cannot mix weighted and unweighted edge lines".into(),
        }),
        (false, true) => build_digraph(n, &weighted),
        (true, false) => metropolis_weights(n, &unweighted),
    }
}

/// Renders a digraph in the edge-list format; `unweighted` drops the weight
/// column so Metropolis weighting is re-applied on load.
pub fn format_graph_file(g: &Digraph, unweighted: bool) -> String {
    let mut out = format!("n {}\n", g.n());
    for (from, to, w) in g.edges() {
        if unweighted {
            out.push_str(&format!("{from} {to}\n"));
        } else {
            out.push_str(&format!("{from} {to} {w}\n"));
        }
    }
    out
}
