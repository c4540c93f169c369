//! Max-marginal pruning and lattice quality metrics.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{DecodingGraph, EdgeId, Fst, GraphError, NEG_INF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no edge has a finite max-marginal")]
    AllPruned,
    #[error("lambda {0} is outside [0, 1]")]
    InvalidLambda(f64),
}

/// γ(e) = α(tail) + w(e) + β(head): the best score of any path through `e`.
/// Edges on no accepting path get [`NEG_INF`].
pub fn max_marginals(g: &DecodingGraph, weights: &[f64]) -> Result<Vec<f64>, PruneError> {
    if weights.len() != g.num_edges() {
        return Err(GraphError::WeightCount {
            expected: g.num_edges(),
            got: weights.len(),
        }
        .into());
    }
    let alpha = g.forward(weights);
    let beta = g.backward(weights);
    if !g.finals().any(|f| alpha[f] > NEG_INF) {
        return Err(GraphError::NoPath.into());
    }
    Ok(g.edges()
        .iter()
        .zip(weights)
        .map(|(e, &w)| {
            let s = alpha[e.tail] + w + beta[e.head];
            if s.is_nan() {
                NEG_INF
            } else {
                s
            }
        })
        .collect())
}

/// τ = (1 − λ)·mean(γ) + λ·best, the mean taken over finite γ only.
pub fn threshold(gammas: &[f64], best_score: f64, lambda: f64) -> Result<f64, PruneError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PruneError::InvalidLambda(lambda));
    }
    let (sum, n) = gammas
        .iter()
        .filter(|g| g.is_finite())
        .fold((0.0, 0usize), |(s, n), &g| (s + g, n + 1));
    if n == 0 {
        return Err(PruneError::AllPruned);
    }
    Ok((1.0 - lambda) * (sum / n as f64) + lambda * best_score)
}

/// Smallest γ kept at threshold `tau`. A relative slack of 1e-9 absorbs
/// rounding between γ sums and path sums; each branch is monotone in `tau`
/// so kept sets stay nested across λ.
fn cutoff(tau: f64) -> f64 {
    const SLACK: f64 = 1e-9;
    if tau >= 1.0 {
        tau * (1.0 - SLACK)
    } else if tau <= -1.0 {
        tau * (1.0 + SLACK)
    } else {
        tau - SLACK
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneReport {
    pub lambda: f64,
    pub threshold: f64,
    pub kept_edges: usize,
    pub total_edges: usize,
    /// Kept edges per gold segment; needs the gold segmentation.
    pub density: Option<f64>,
    /// Lowest label error rate over lattice paths; needs the gold segmentation.
    pub oracle_error: Option<f64>,
}

/// A pruned, trimmed graph. Edge weights are carried over from the input.
#[derive(Clone, Debug)]
pub struct Lattice {
    pub graph: DecodingGraph,
    /// Input-graph id of every lattice edge.
    pub edge_map: Vec<EdgeId>,
    pub report: PruneReport,
}

/// Keeps edges with γ(e) ≥ τ_λ (ties kept), drops the rest and trims.
pub fn prune_to_lattice(
    g: &DecodingGraph,
    weights: &[f64],
    lambda: f64,
) -> Result<Lattice, PruneError> {
    let gammas = max_marginals(g, weights)?;
    let best = gammas.iter().copied().fold(NEG_INF, f64::max);
    let tau = threshold(&gammas, best, lambda)?;
    let cut = cutoff(tau);

    let mut fst = Fst::new();
    for v in 0..g.num_vertices() {
        fst.add_vertex(g.time(v));
        if g.is_initial(v) {
            fst.set_initial(v)?;
        }
        if g.is_final(v) {
            fst.set_final(v)?;
        }
    }
    let mut kept = Vec::new();
    for (id, e) in g.edges().iter().enumerate() {
        if gammas[id] > NEG_INF && gammas[id] >= cut {
            fst.add_weighted_edge(e.tail, e.head, e.input, e.output, weights[id])?;
            kept.push(id);
        }
    }
    let trimmed = fst.trim();
    let edge_map: Vec<EdgeId> = trimmed.edge_map.iter().map(|&i| kept[i]).collect();
    let graph = trimmed.fst.seal()?;
    let report = PruneReport {
        lambda,
        threshold: tau,
        kept_edges: graph.num_edges(),
        total_edges: g.num_edges(),
        density: None,
        oracle_error: None,
    };
    Ok(Lattice {
        graph,
        edge_map,
        report,
    })
}

/// Minimum edit distance between the label sequence of any path and
/// `gold`. `class(e)` is the scored token of edge `e`, or `None` for edges
/// that emit nothing.
pub fn oracle_edit_distance<F>(g: &DecodingGraph, gold: &[usize], class: F) -> Option<usize>
where
    F: Fn(EdgeId) -> Option<usize>,
{
    const INF: usize = usize::MAX / 2;
    let m = gold.len();
    let mut cost = vec![vec![INF; m + 1]; g.num_vertices()];
    for v in g.initials() {
        cost[v][0] = 0;
    }
    let mut best = INF;
    for &v in g.topological_order() {
        // Deletions of reference tokens are free to take at any vertex.
        let row = &mut cost[v];
        for j in 1..=m {
            row[j] = row[j].min(row[j - 1] + 1);
        }
        if row.iter().all(|&c| c >= INF) {
            continue;
        }
        if g.is_final(v) {
            best = best.min(row[m]);
        }
        let row = row.clone();
        for &e in g.out_edges(v) {
            let h = g.edge(e).head;
            match class(e) {
                None => {
                    for j in 0..=m {
                        cost[h][j] = cost[h][j].min(row[j]);
                    }
                }
                Some(c) => {
                    for j in 0..=m {
                        // Insertion of the hypothesis token.
                        cost[h][j] = cost[h][j].min(row[j] + 1);
                        if j < m {
                            let sub = row[j] + usize::from(c != gold[j]);
                            cost[h][j + 1] = cost[h][j + 1].min(sub);
                        }
                    }
                }
            }
        }
    }
    (best < INF).then_some(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatticeMetrics {
    pub density: f64,
    pub oracle_error: f64,
}

/// Density and oracle error of a lattice against a gold label sequence.
/// Labels are mapped through `classes` (label index → class) when given.
pub fn lattice_metrics(
    lattice: &DecodingGraph,
    gold: &[crate::graph::Label],
    classes: Option<&[usize]>,
) -> Option<LatticeMetrics> {
    if gold.is_empty() {
        return None;
    }
    let map = |l: crate::graph::Label| classes.map_or(l.index(), |c| c[l.index()]);
    let gold: Vec<usize> = gold.iter().map(|&l| map(l)).collect();
    let errors = oracle_edit_distance(lattice, &gold, |e| lattice.edge(e).input.current().map(map))?;
    Some(LatticeMetrics {
        density: lattice.num_edges() as f64 / gold.len() as f64,
        oracle_error: errors as f64 / gold.len() as f64,
    })
}

impl PruneReport {
    pub fn with_metrics(mut self, m: Option<LatticeMetrics>) -> Self {
        if let Some(m) = m {
            self.density = Some(m.density);
            self.oracle_error = Some(m.oracle_error);
        }
        self
    }
}
