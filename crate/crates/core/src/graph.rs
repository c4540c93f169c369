//! Time-stamped weighted FSTs and max-plus passes over them.
//!
//! An [`Fst`] is the append-only construction form; it may be cyclic (label
//! models are). Decoding requires an acyclic graph, so passes run on a
//! [`DecodingGraph`], which is an [`Fst`] sealed with a topological order and
//! adjacency indexed both by tail and by head.
//!
//! Scores use `f64::NEG_INFINITY` as the "no path" sentinel. Adding a finite
//! score to it stays at the sentinel, so max-plus recursions never see NaN.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::Deref;

use thiserror::Error;

pub type VertexId = usize;
pub type EdgeId = usize;

/// Sentinel for "no path".
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Index of a label in a [`crate::hypothesis::LabelSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(pub u32);

impl Label {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for Label {
    fn from(i: usize) -> Self {
        Label(i as u32)
    }
}

/// An edge label: ε, a single label, or the history-bearing pair emitted by
/// label models (history may be ε).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sym {
    Eps,
    One(Label),
    Pair(Option<Label>, Label),
}

impl Sym {
    pub fn is_eps(self) -> bool {
        matches!(self, Sym::Eps)
    }

    /// The label being emitted, ignoring any history.
    pub fn current(self) -> Option<Label> {
        match self {
            Sym::Eps => None,
            Sym::One(s) | Sym::Pair(_, s) => Some(s),
        }
    }

    pub fn history(self) -> Option<Label> {
        match self {
            Sym::Pair(h, _) => h,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub tail: VertexId,
    pub head: VertexId,
    pub input: Sym,
    pub output: Sym,
    /// `None` until the edge has been scored.
    pub weight: Option<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("edge {0} has not been scored")]
    UnscoredEdge(EdgeId),
    #[error("no path from an initial to a final vertex")]
    NoPath,
    #[error("more than {0} paths")]
    TooManyPaths(usize),
    #[error("vertex {0} does not exist")]
    UnknownVertex(VertexId),
    #[error("vertex {0} is both initial and final")]
    InitialIsFinal(VertexId),
    #[error("expected {expected} weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("edge {0} has a non-finite weight")]
    NonFiniteWeight(EdgeId),
}

/// Append-only weighted FST with vertex time stamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Fst {
    times: Vec<u32>,
    edges: Vec<Edge>,
    initial: Vec<bool>,
    fin: Vec<bool>,
}

impl Fst {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, time: u32) -> VertexId {
        self.times.push(time);
        self.initial.push(false);
        self.fin.push(false);
        self.times.len() - 1
    }

    pub fn add_edge(
        &mut self,
        tail: VertexId,
        head: VertexId,
        input: Sym,
        output: Sym,
    ) -> Result<EdgeId, GraphError> {
        self.push_edge(tail, head, input, output, None)
    }

    pub fn add_weighted_edge(
        &mut self,
        tail: VertexId,
        head: VertexId,
        input: Sym,
        output: Sym,
        weight: f64,
    ) -> Result<EdgeId, GraphError> {
        self.push_edge(tail, head, input, output, Some(weight))
    }

    fn push_edge(
        &mut self,
        tail: VertexId,
        head: VertexId,
        input: Sym,
        output: Sym,
        weight: Option<f64>,
    ) -> Result<EdgeId, GraphError> {
        for v in [tail, head] {
            if v >= self.times.len() {
                return Err(GraphError::UnknownVertex(v));
            }
        }
        self.edges.push(Edge {
            tail,
            head,
            input,
            output,
            weight,
        });
        Ok(self.edges.len() - 1)
    }

    pub fn set_initial(&mut self, v: VertexId) -> Result<(), GraphError> {
        *self.initial.get_mut(v).ok_or(GraphError::UnknownVertex(v))? = true;
        Ok(())
    }

    pub fn set_final(&mut self, v: VertexId) -> Result<(), GraphError> {
        *self.fin.get_mut(v).ok_or(GraphError::UnknownVertex(v))? = true;
        Ok(())
    }

    pub fn num_vertices(&self) -> usize {
        self.times.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn time(&self, v: VertexId) -> u32 {
        self.times[v]
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_initial(&self, v: VertexId) -> bool {
        self.initial[v]
    }

    pub fn is_final(&self, v: VertexId) -> bool {
        self.fin[v]
    }

    pub fn initials(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.num_vertices()).filter(|&v| self.initial[v])
    }

    pub fn finals(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.num_vertices()).filter(|&v| self.fin[v])
    }

    /// Time span `(t(tail), t(head))` of an edge.
    pub fn span(&self, e: EdgeId) -> (u32, u32) {
        let edge = &self.edges[e];
        (self.times[edge.tail], self.times[edge.head])
    }

    pub fn out_adjacency(&self) -> Vec<Vec<EdgeId>> {
        let mut out = vec![Vec::new(); self.num_vertices()];
        for (id, e) in self.edges.iter().enumerate() {
            out[e.tail].push(id);
        }
        out
    }

    pub fn in_adjacency(&self) -> Vec<Vec<EdgeId>> {
        let mut inc = vec![Vec::new(); self.num_vertices()];
        for (id, e) in self.edges.iter().enumerate() {
            inc[e.head].push(id);
        }
        inc
    }

    /// Replaces every edge weight. `weights[e]` scores edge `e`.
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<(), GraphError> {
        if weights.len() != self.edges.len() {
            return Err(GraphError::WeightCount {
                expected: self.edges.len(),
                got: weights.len(),
            });
        }
        for (id, (edge, &w)) in self.edges.iter_mut().zip(weights).enumerate() {
            if !w.is_finite() {
                return Err(GraphError::NonFiniteWeight(id));
            }
            edge.weight = Some(w);
        }
        Ok(())
    }

    /// All edge weights, or the first unscored edge.
    pub fn weights(&self) -> Result<Vec<f64>, GraphError> {
        self.edges
            .iter()
            .enumerate()
            .map(|(id, e)| e.weight.ok_or(GraphError::UnscoredEdge(id)))
            .collect()
    }

    /// Keeps only vertices and edges that lie on some initial-to-final path.
    /// Surviving ids are re-densified in their original relative order.
    pub fn trim(&self) -> Trimmed {
        let n = self.num_vertices();
        let out = self.out_adjacency();
        let inc = self.in_adjacency();

        let mut fwd = vec![false; n];
        let mut stack: Vec<VertexId> = self.initials().collect();
        for &v in &stack {
            fwd[v] = true;
        }
        while let Some(v) = stack.pop() {
            for &e in &out[v] {
                let h = self.edges[e].head;
                if !fwd[h] {
                    fwd[h] = true;
                    stack.push(h);
                }
            }
        }

        let mut bwd = vec![false; n];
        let mut stack: Vec<VertexId> = self.finals().collect();
        for &v in &stack {
            bwd[v] = true;
        }
        while let Some(v) = stack.pop() {
            for &e in &inc[v] {
                let t = self.edges[e].tail;
                if !bwd[t] {
                    bwd[t] = true;
                    stack.push(t);
                }
            }
        }

        let mut fst = Fst::new();
        let mut new_id = vec![usize::MAX; n];
        let mut vertex_map = Vec::new();
        for v in 0..n {
            if fwd[v] && bwd[v] {
                new_id[v] = fst.add_vertex(self.times[v]);
                fst.initial[new_id[v]] = self.initial[v];
                fst.fin[new_id[v]] = self.fin[v];
                vertex_map.push(v);
            }
        }
        let mut edge_map = Vec::new();
        for (id, e) in self.edges.iter().enumerate() {
            let (t, h) = (new_id[e.tail], new_id[e.head]);
            if t != usize::MAX && h != usize::MAX {
                fst.edges.push(Edge {
                    tail: t,
                    head: h,
                    ..e.clone()
                });
                edge_map.push(id);
            }
        }
        Trimmed {
            fst,
            vertex_map,
            edge_map,
        }
    }

    /// Orders the vertices topologically, breaking ties by ascending id.
    pub fn topological_order(&self) -> Result<Vec<VertexId>, GraphError> {
        let n = self.num_vertices();
        let mut indegree = vec![0usize; n];
        for e in &self.edges {
            indegree[e.head] += 1;
        }
        let out = self.out_adjacency();
        let mut ready: BinaryHeap<Reverse<VertexId>> = (0..n)
            .filter(|&v| indegree[v] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(v)) = ready.pop() {
            order.push(v);
            for &e in &out[v] {
                let h = self.edges[e].head;
                indegree[h] -= 1;
                if indegree[h] == 0 {
                    ready.push(Reverse(h));
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::CycleDetected);
        }
        Ok(order)
    }

    /// Seals the graph for decoding: checks acyclicity and builds both
    /// adjacency indices.
    pub fn seal(self) -> Result<DecodingGraph, GraphError> {
        if let Some(v) = (0..self.num_vertices()).find(|&v| self.initial[v] && self.fin[v]) {
            return Err(GraphError::InitialIsFinal(v));
        }
        let order = self.topological_order()?;
        let mut position = vec![0; order.len()];
        for (i, &v) in order.iter().enumerate() {
            position[v] = i;
        }
        let out = self.out_adjacency();
        let inc = self.in_adjacency();
        Ok(DecodingGraph {
            fst: self,
            order,
            position,
            out,
            inc,
        })
    }
}

/// Result of [`Fst::trim`]: the trimmed graph and, for each surviving vertex
/// and edge, its id in the original graph.
#[derive(Clone, Debug)]
pub struct Trimmed {
    pub fst: Fst,
    pub vertex_map: Vec<VertexId>,
    pub edge_map: Vec<EdgeId>,
}

/// An initial-to-final path, as an ordered list of edge ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Path {
    pub edges: Vec<EdgeId>,
}

impl Path {
    pub fn new(edges: Vec<EdgeId>) -> Self {
        Path { edges }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Sum of `weights` along the path, accumulated front to back.
    pub fn score(&self, weights: &[f64]) -> f64 {
        self.edges.iter().map(|&e| weights[e]).sum()
    }

    /// Checks connectivity, edge uniqueness and the initial/final endpoints.
    pub fn is_valid_in(&self, g: &Fst) -> bool {
        let Some((&first, &last)) = self.edges.first().zip(self.edges.last()) else {
            return false;
        };
        if first >= g.num_edges() || last >= g.num_edges() {
            return false;
        }
        if !g.is_initial(g.edge(first).tail) || !g.is_final(g.edge(last).head) {
            return false;
        }
        let mut seen = std::collections::HashSet::new();
        self.edges.iter().all(|&e| e < g.num_edges() && seen.insert(e))
            && self
                .edges
                .windows(2)
                .all(|w| g.edge(w[0]).head == g.edge(w[1]).tail)
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.edges.iter().map(|e| e.to_string()).collect();
        write!(f, "[{}]", ids.join(" "))
    }
}

/// A sealed, acyclic decoding graph.
///
/// The structure is immutable once sealed; edge weights may be replaced so a
/// graph can be rescored as model parameters change.
#[derive(Clone, Debug)]
pub struct DecodingGraph {
    fst: Fst,
    order: Vec<VertexId>,
    position: Vec<usize>,
    out: Vec<Vec<EdgeId>>,
    inc: Vec<Vec<EdgeId>>,
}

impl Deref for DecodingGraph {
    type Target = Fst;

    fn deref(&self) -> &Fst {
        &self.fst
    }
}

impl DecodingGraph {
    pub fn fst(&self) -> &Fst {
        &self.fst
    }

    pub fn into_fst(self) -> Fst {
        self.fst
    }

    pub fn topological_order(&self) -> &[VertexId] {
        &self.order
    }

    /// Position of `v` in the topological order.
    pub fn topo_position(&self, v: VertexId) -> usize {
        self.position[v]
    }

    pub fn out_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.out[v]
    }

    pub fn in_edges(&self, v: VertexId) -> &[EdgeId] {
        &self.inc[v]
    }

    pub fn set_weights(&mut self, weights: &[f64]) -> Result<(), GraphError> {
        self.fst.set_weights(weights)
    }

    fn check_len(&self, weights: &[f64]) -> Result<(), GraphError> {
        if weights.len() != self.num_edges() {
            return Err(GraphError::WeightCount {
                expected: self.num_edges(),
                got: weights.len(),
            });
        }
        Ok(())
    }

    /// α: best partial-path score from any initial vertex to each vertex.
    pub fn forward_scores(&self) -> Result<Vec<f64>, GraphError> {
        Ok(self.forward(&self.weights()?))
    }

    /// β: best suffix score from each vertex to any final vertex.
    pub fn backward_scores(&self) -> Result<Vec<f64>, GraphError> {
        Ok(self.backward(&self.weights()?))
    }

    /// α under explicit weights; `weights[e]` may be [`NEG_INF`] to disable an edge.
    pub fn forward(&self, weights: &[f64]) -> Vec<f64> {
        assert_eq!(weights.len(), self.num_edges());
        #[cfg(test)]
        count_pass();
        let mut alpha = vec![NEG_INF; self.num_vertices()];
        for &v in &self.order {
            let mut best = if self.is_initial(v) { 0.0 } else { NEG_INF };
            for &e in &self.inc[v] {
                let cand = alpha[self.edge(e).tail] + weights[e];
                if cand > best {
                    best = cand;
                }
            }
            alpha[v] = best;
        }
        alpha
    }

    /// β under explicit weights.
    pub fn backward(&self, weights: &[f64]) -> Vec<f64> {
        assert_eq!(weights.len(), self.num_edges());
        #[cfg(test)]
        count_pass();
        let mut beta = vec![NEG_INF; self.num_vertices()];
        for &v in self.order.iter().rev() {
            let mut best = if self.is_final(v) { 0.0 } else { NEG_INF };
            for &e in &self.out[v] {
                let cand = weights[e] + beta[self.edge(e).head];
                if cand > best {
                    best = cand;
                }
            }
            beta[v] = best;
        }
        beta
    }

    /// Best path under the stored weights.
    pub fn best_path(&self) -> Result<(Path, f64), GraphError> {
        self.best_path_with(&self.weights()?)
    }

    /// Best path under explicit weights.
    ///
    /// Ties are broken during the backtrace: at each step the lowest-id edge
    /// achieving the optimum is taken, starting from the final vertices.
    pub fn best_path_with(&self, weights: &[f64]) -> Result<(Path, f64), GraphError> {
        self.check_len(weights)?;
        let alpha = self.forward(weights);
        let best = self
            .finals()
            .map(|f| alpha[f])
            .fold(NEG_INF, f64::max);
        if best == NEG_INF {
            return Err(GraphError::NoPath);
        }

        let mut last = None;
        for f in self.finals().filter(|&f| alpha[f] == best) {
            for &e in &self.inc[f] {
                let tail = self.edge(e).tail;
                if alpha[tail] + weights[e] == best && last.is_none_or(|l| e < l) {
                    last = Some(e);
                }
            }
        }
        let mut edges = vec![last.ok_or(GraphError::NoPath)?];
        let mut v = self.edge(edges[0]).tail;
        loop {
            // An initial vertex whose α is achieved by starting there ends the path.
            if self.is_initial(v) && alpha[v] == 0.0 {
                break;
            }
            let prev = self.inc[v]
                .iter()
                .copied()
                .find(|&e| alpha[self.edge(e).tail] + weights[e] == alpha[v])
                .ok_or(GraphError::NoPath)?;
            edges.push(prev);
            v = self.edge(prev).tail;
        }
        edges.reverse();
        Ok((Path { edges }, best))
    }

    /// Every initial-to-final path with its score, in depth-first order
    /// (initial vertices and out-edges ascending). Test oracle; exponential.
    pub fn enumerate_paths(&self, cap: usize) -> Result<Vec<(Path, f64)>, GraphError> {
        self.enumerate_paths_with(&self.weights()?, cap)
    }

    pub fn enumerate_paths_with(
        &self,
        weights: &[f64],
        cap: usize,
    ) -> Result<Vec<(Path, f64)>, GraphError> {
        self.check_len(weights)?;
        let mut found = Vec::new();
        let mut stack = Vec::new();
        for v in self.initials() {
            self.enumerate_from(v, 0.0, weights, cap, &mut stack, &mut found)?;
        }
        Ok(found)
    }

    fn enumerate_from(
        &self,
        v: VertexId,
        score: f64,
        weights: &[f64],
        cap: usize,
        stack: &mut Vec<EdgeId>,
        found: &mut Vec<(Path, f64)>,
    ) -> Result<(), GraphError> {
        for &e in &self.out[v] {
            stack.push(e);
            let s = score + weights[e];
            let head = self.edge(e).head;
            if self.is_final(head) {
                if found.len() == cap {
                    return Err(GraphError::TooManyPaths(cap));
                }
                found.push((Path::new(stack.clone()), s));
            }
            self.enumerate_from(head, s, weights, cap, stack, found)?;
            stack.pop();
        }
        Ok(())
    }

    /// Trims and reseals. Trimming preserves acyclicity, so this cannot fail
    /// on a sealed graph.
    pub fn trim(&self) -> (DecodingGraph, Trimmed) {
        let trimmed = self.fst.trim();
        let sealed = trimmed
            .fst
            .clone()
            .seal()
            .expect("trimmed subgraph of a sealed graph is sealable");
        (sealed, trimmed)
    }
}

#[cfg(test)]
thread_local! {
    static PASSES: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// Forward and backward passes run on this thread since the last reset.
#[cfg(test)]
pub(crate) fn pass_count() -> usize {
    PASSES.with(|p| p.get())
}

#[cfg(test)]
pub(crate) fn reset_pass_count() {
    PASSES.with(|p| p.set(0));
}

#[cfg(test)]
fn count_pass() {
    PASSES.with(|p| p.set(p.get() + 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(s: u32) -> Sym {
        Sym::One(Label(s))
    }

    /// a(v0→v1, 1), b(v0→v1, 2), c(v1→v2, 3)
    pub(crate) fn three_edge() -> DecodingGraph {
        let mut g = Fst::new();
        for t in 0..3 {
            g.add_vertex(t);
        }
        g.add_weighted_edge(0, 1, one(0), one(0), 1.0).unwrap();
        g.add_weighted_edge(0, 1, one(1), one(1), 2.0).unwrap();
        g.add_weighted_edge(1, 2, one(2), one(2), 3.0).unwrap();
        g.set_initial(0).unwrap();
        g.set_final(2).unwrap();
        g.seal().unwrap()
    }

    fn diamond() -> Fst {
        let mut g = Fst::new();
        for t in [0, 1, 1, 2] {
            g.add_vertex(t);
        }
        g.add_weighted_edge(0, 1, one(0), one(0), 1.0).unwrap();
        g.add_weighted_edge(0, 2, one(0), one(0), 1.0).unwrap();
        g.add_weighted_edge(1, 3, one(0), one(0), 1.0).unwrap();
        g.add_weighted_edge(2, 3, one(0), one(0), 1.0).unwrap();
        g.set_initial(0).unwrap();
        g.set_final(3).unwrap();
        g
    }

    #[test]
    fn topological_order_examples() {
        let mut single = Fst::new();
        single.add_vertex(0);
        assert_eq!(single.topological_order().unwrap(), vec![0]);

        let chain = three_edge();
        assert_eq!(chain.topological_order(), &[0, 1, 2]);

        let d = diamond();
        let order = d.topological_order().unwrap();
        assert_eq!(order, vec![0, 1, 2, 3]);
        let pos: Vec<usize> = (0..4).map(|v| order.iter().position(|&x| x == v).unwrap()).collect();
        for e in d.edges() {
            assert!(pos[e.tail] < pos[e.head]);
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let mut g = Fst::new();
        g.add_vertex(0);
        g.add_vertex(1);
        g.add_edge(0, 1, Sym::Eps, Sym::Eps).unwrap();
        g.add_edge(1, 0, Sym::Eps, Sym::Eps).unwrap();
        assert_eq!(g.seal().unwrap_err(), GraphError::CycleDetected);
    }

    #[test]
    fn forward_backward_three_edge() {
        let g = three_edge();
        assert_eq!(g.forward_scores().unwrap(), vec![0.0, 2.0, 5.0]);
        assert_eq!(g.backward_scores().unwrap(), vec![5.0, 3.0, 0.0]);
    }

    #[test]
    fn forward_base_cases() {
        let mut g = Fst::new();
        g.add_vertex(0);
        g.set_initial(0).unwrap();
        let g = g.seal().unwrap();
        assert_eq!(g.forward_scores().unwrap(), vec![0.0]);

        let mut z = diamond();
        z.set_weights(&[0.0; 4]).unwrap();
        let z = z.seal().unwrap();
        assert!(z.forward_scores().unwrap().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn backward_unreachable_is_sentinel() {
        let mut g = Fst::new();
        for t in 0..3 {
            g.add_vertex(t);
        }
        g.add_weighted_edge(0, 1, one(0), one(0), 1.0).unwrap();
        g.add_weighted_edge(0, 2, one(0), one(0), 1.0).unwrap();
        g.set_initial(0).unwrap();
        g.set_final(1).unwrap();
        let g = g.seal().unwrap();
        let beta = g.backward_scores().unwrap();
        assert_eq!(beta[1], 0.0);
        assert_eq!(beta[2], NEG_INF);
    }

    #[test]
    fn unscored_edge_is_an_error() {
        let mut g = Fst::new();
        g.add_vertex(0);
        g.add_vertex(1);
        g.add_edge(0, 1, one(0), one(0)).unwrap();
        g.set_initial(0).unwrap();
        g.set_final(1).unwrap();
        let g = g.seal().unwrap();
        assert_eq!(g.forward_scores().unwrap_err(), GraphError::UnscoredEdge(0));
        assert_eq!(g.best_path().unwrap_err(), GraphError::UnscoredEdge(0));
    }

    #[test]
    fn best_path_examples() {
        let g = three_edge();
        let (p, s) = g.best_path().unwrap();
        assert_eq!(p.edges, vec![1, 2]);
        assert_eq!(s, 5.0);
        assert!(p.is_valid_in(&g));

        let mut single = Fst::new();
        single.add_vertex(0);
        single.add_vertex(1);
        single.add_weighted_edge(0, 1, one(0), one(0), -2.0).unwrap();
        single.set_initial(0).unwrap();
        single.set_final(1).unwrap();
        let (p, s) = single.seal().unwrap().best_path().unwrap();
        assert_eq!(p.edges, vec![0]);
        assert_eq!(s, -2.0);
    }

    #[test]
    fn tied_paths_prefer_lower_edge_ids() {
        let d = diamond().seal().unwrap();
        let (p, s) = d.best_path().unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(p.edges, vec![0, 2]);
    }

    #[test]
    fn no_path() {
        let mut g = Fst::new();
        g.add_vertex(0);
        g.add_vertex(1);
        g.set_initial(0).unwrap();
        g.set_final(1).unwrap();
        assert_eq!(g.seal().unwrap().best_path().unwrap_err(), GraphError::NoPath);
    }

    #[test]
    fn enumerate_examples() {
        let g = three_edge();
        let paths = g.enumerate_paths(100).unwrap();
        assert_eq!(
            paths,
            vec![(Path::new(vec![0, 2]), 4.0), (Path::new(vec![1, 2]), 5.0)]
        );
        assert_eq!(diamond().seal().unwrap().enumerate_paths(100).unwrap().len(), 2);
        assert_eq!(
            g.enumerate_paths(1).unwrap_err(),
            GraphError::TooManyPaths(1)
        );

        let mut empty = Fst::new();
        empty.add_vertex(0);
        empty.add_vertex(1);
        empty.set_initial(0).unwrap();
        empty.set_final(1).unwrap();
        assert!(empty.seal().unwrap().enumerate_paths(10).unwrap().is_empty());
    }

    #[test]
    fn trim_examples() {
        // Dangling edge 0→3 leaves the accepting region.
        let mut g = diamond();
        let dead = g.add_vertex(1);
        g.add_weighted_edge(0, dead, one(1), one(1), 5.0).unwrap();
        let t = g.trim();
        assert_eq!(t.fst.num_edges(), 4);
        assert_eq!(t.fst.num_vertices(), 4);
        assert_eq!(t.edge_map, vec![0, 1, 2, 3]);

        let again = t.fst.trim();
        assert_eq!(again.fst, t.fst);

        let mut unreachable = Fst::new();
        unreachable.add_vertex(0);
        unreachable.add_vertex(1);
        unreachable.add_vertex(2);
        unreachable.add_edge(0, 1, one(0), one(0)).unwrap();
        unreachable.set_initial(0).unwrap();
        unreachable.set_final(2).unwrap();
        let t = unreachable.trim();
        assert_eq!(t.fst.num_vertices(), 0);
        assert_eq!(t.fst.num_edges(), 0);
    }

    #[test]
    fn initial_final_overlap_rejected() {
        let mut g = Fst::new();
        g.add_vertex(0);
        g.set_initial(0).unwrap();
        g.set_final(0).unwrap();
        assert_eq!(g.seal().unwrap_err(), GraphError::InitialIsFinal(0));
    }
}
