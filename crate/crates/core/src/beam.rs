//! Time-synchronous beam search over eager graphs or lazy compositions.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use thiserror::Error;

use crate::compose::{ComposedEdge, LazyComposition, PairState};
use crate::graph::{DecodingGraph, EdgeId, GraphError, VertexId, NEG_INF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamError {
    #[error("beam width must be at least 1")]
    InvalidWidth,
    #[error("no complete path survived the beam")]
    NoCompletePath,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub width: usize,
}

impl BeamConfig {
    pub fn new(width: usize) -> Result<Self, BeamError> {
        if width == 0 {
            return Err(BeamError::InvalidWidth);
        }
        Ok(BeamConfig { width })
    }

    pub fn unbounded() -> Self {
        BeamConfig { width: usize::MAX }
    }
}

/// A graph the beam can walk. States are grouped by time; arcs either
/// advance time or stay within it, and same-time arcs must lead to a state
/// of higher rank.
pub trait SearchSpace {
    type State: Copy + Ord + Hash;
    type Arc: Copy + Ord;

    fn initial_states(&self) -> Vec<Self::State>;
    fn is_final(&self, s: Self::State) -> bool;
    /// (time, order within the time slice).
    fn rank(&self, s: Self::State) -> (u32, usize);
    /// Out-arcs with their scores.
    fn arcs(&self, s: Self::State) -> Vec<(Self::Arc, Self::State, f64)>;
}

/// A sealed graph under explicit weights.
pub struct WeightedGraph<'a> {
    pub graph: &'a DecodingGraph,
    pub weights: &'a [f64],
}

impl SearchSpace for WeightedGraph<'_> {
    type State = VertexId;
    type Arc = EdgeId;

    fn initial_states(&self) -> Vec<VertexId> {
        self.graph.initials().collect()
    }

    fn is_final(&self, s: VertexId) -> bool {
        self.graph.is_final(s)
    }

    fn rank(&self, s: VertexId) -> (u32, usize) {
        (self.graph.time(s), self.graph.topo_position(s))
    }

    fn arcs(&self, s: VertexId) -> Vec<(EdgeId, VertexId, f64)> {
        self.graph
            .out_edges(s)
            .iter()
            .map(|&e| (e, self.graph.edge(e).head, self.weights[e]))
            .collect()
    }
}

/// A lazy composition scored edge by edge.
pub struct ScoredComposition<'a, F> {
    pub composition: &'a LazyComposition<'a>,
    pub scorer: F,
}

impl<F> SearchSpace for ScoredComposition<'_, F>
where
    F: Fn(PairState, &ComposedEdge) -> f64,
{
    type State = PairState;
    type Arc = ComposedEdge;

    fn initial_states(&self) -> Vec<PairState> {
        self.composition.initial_states()
    }

    fn is_final(&self, s: PairState) -> bool {
        self.composition.is_final(s)
    }

    fn rank(&self, s: PairState) -> (u32, usize) {
        let pos = self.composition.left().topo_position(s.left);
        (self.composition.time(s), 2 * pos + usize::from(s.after_eps))
    }

    fn arcs(&self, s: PairState) -> Vec<(ComposedEdge, PairState, f64)> {
        self.composition
            .neighbors(s)
            .into_iter()
            .map(|(arc, to)| {
                let w = (self.scorer)(s, &arc);
                (arc, to, w)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult<A> {
    pub arcs: Vec<A>,
    pub score: f64,
    /// Largest number of states competing in one time slice.
    pub max_frontier: usize,
}

struct Node<S, A> {
    state: S,
    score: f64,
    back: Option<(usize, A)>,
}

/// Keeps the `width` best states per time slice (ties to the lower state)
/// after closing the slice under same-time arcs. Recombination keeps the
/// lower arc on score ties, so an unpruned search returns the same path as
/// exact decoding.
pub fn beam_search<G: SearchSpace>(
    space: &G,
    cfg: &BeamConfig,
) -> Result<BeamResult<G::Arc>, BeamError> {
    if cfg.width == 0 {
        return Err(BeamError::InvalidWidth);
    }
    let mut nodes: Vec<Node<G::State, G::Arc>> = Vec::new();
    let mut index: HashMap<G::State, usize> = HashMap::new();
    let mut pending: BTreeMap<(u32, usize, G::State), usize> = BTreeMap::new();

    for s in space.initial_states() {
        if index.contains_key(&s) {
            continue;
        }
        let (t, r) = space.rank(s);
        nodes.push(Node {
            state: s,
            score: 0.0,
            back: None,
        });
        index.insert(s, nodes.len() - 1);
        pending.insert((t, r, s), nodes.len() - 1);
    }

    let relax = |nodes: &mut Vec<Node<G::State, G::Arc>>,
                 index: &mut HashMap<G::State, usize>,
                 pending: &mut BTreeMap<(u32, usize, G::State), usize>,
                 from: usize,
                 arc: G::Arc,
                 to: G::State,
                 w: f64| {
        let cand = nodes[from].score + w;
        if cand == NEG_INF || cand.is_nan() {
            return;
        }
        match index.get(&to) {
            Some(&n) => {
                let node = &mut nodes[n];
                let better = cand > node.score
                    || (cand == node.score && matches!(node.back, Some((_, a)) if arc < a));
                if better {
                    node.score = cand;
                    node.back = Some((from, arc));
                }
            }
            None => {
                let (t, r) = space.rank(to);
                nodes.push(Node {
                    state: to,
                    score: cand,
                    back: Some((from, arc)),
                });
                index.insert(to, nodes.len() - 1);
                pending.insert((t, r, to), nodes.len() - 1);
            }
        }
    };

    let mut max_frontier = 0;
    let mut best: Option<usize> = None;
    while let Some((&(time, _, _), _)) = pending.first_key_value() {
        let mut slice = Vec::new();
        while let Some(entry) = pending.first_entry() {
            if entry.key().0 != time {
                break;
            }
            let n = entry.remove();
            slice.push(n);
            for (arc, to, w) in space.arcs(nodes[n].state) {
                if space.rank(to).0 == time {
                    relax(&mut nodes, &mut index, &mut pending, n, arc, to, w);
                }
            }
        }
        max_frontier = max_frontier.max(slice.len());
        slice.sort_by(|&a, &b| {
            nodes[b]
                .score
                .total_cmp(&nodes[a].score)
                .then(nodes[a].state.cmp(&nodes[b].state))
        });
        slice.truncate(cfg.width);
        for &n in &slice {
            if space.is_final(nodes[n].state) {
                let better = match best {
                    None => true,
                    Some(b) => {
                        nodes[n].score > nodes[b].score
                            || (nodes[n].score == nodes[b].score
                                && nodes[n].back.map(|(_, a)| a) < nodes[b].back.map(|(_, a)| a))
                    }
                };
                if better {
                    best = Some(n);
                }
            }
            for (arc, to, w) in space.arcs(nodes[n].state) {
                if space.rank(to).0 > time {
                    relax(&mut nodes, &mut index, &mut pending, n, arc, to, w);
                }
            }
        }
    }

    let end = best.ok_or(BeamError::NoCompletePath)?;
    let mut arcs = Vec::new();
    let mut n = end;
    while let Some((prev, arc)) = nodes[n].back {
        arcs.push(arc);
        n = prev;
    }
    arcs.reverse();
    Ok(BeamResult {
        arcs,
        score: nodes[end].score,
        max_frontier,
    })
}

/// Beam decoding of a sealed graph under `weights`.
pub fn beam_decode(
    g: &DecodingGraph,
    weights: &[f64],
    cfg: &BeamConfig,
) -> Result<BeamResult<EdgeId>, BeamError> {
    if weights.len() != g.num_edges() {
        return Err(GraphError::WeightCount {
            expected: g.num_edges(),
            got: weights.len(),
        }
        .into());
    }
    beam_search(&WeightedGraph { graph: g, weights }, cfg)
}

/// Fraction of instances where the beam returned the exact path.
pub fn hit_rate<I>(hits: I) -> f64
where
    I: IntoIterator<Item = bool>,
{
    let (n, h) = hits
        .into_iter()
        .fold((0usize, 0usize), |(n, h), hit| (n + 1, h + usize::from(hit)));
    if n == 0 {
        return 1.0;
    }
    h as f64 / n as f64
}

/// Whether beam decoding of `g` finds the exact best path.
pub fn beam_hits_exact(
    g: &DecodingGraph,
    weights: &[f64],
    cfg: &BeamConfig,
) -> Result<bool, BeamError> {
    let (exact, _) = g.best_path_with(weights)?;
    Ok(match beam_decode(g, weights, cfg) {
        Ok(r) => r.arcs == exact.edges,
        Err(BeamError::NoCompletePath) => false,
        Err(e) => return Err(e),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::compose::sigma_compose;
    use crate::graph::{Fst, Label, Sym};
    use crate::hypothesis::{build_bigram_lm_graph, build_full_space, BigramLM, SegmentationConfig};

    fn one(s: u32) -> Sym {
        Sym::One(Label(s))
    }

    fn three_edge() -> DecodingGraph {
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

    /// a(v0→v1)=3, b(v0→v2)=1, c(v1→v3)=0, d(v2→v3)=10.
    fn greedy_trap() -> DecodingGraph {
        let mut g = Fst::new();
        for t in [0, 1, 1, 2] {
            g.add_vertex(t);
        }
        g.add_weighted_edge(0, 1, one(0), one(0), 3.0).unwrap();
        g.add_weighted_edge(0, 2, one(1), one(1), 1.0).unwrap();
        g.add_weighted_edge(1, 3, one(0), one(0), 0.0).unwrap();
        g.add_weighted_edge(2, 3, one(1), one(1), 10.0).unwrap();
        g.set_initial(0).unwrap();
        g.set_final(3).unwrap();
        g.seal().unwrap()
    }

    #[test]
    fn unbounded_matches_exact() {
        let g = three_edge();
        let w = g.weights().unwrap();
        let r = beam_decode(&g, &w, &BeamConfig::unbounded()).unwrap();
        assert_eq!((r.arcs, r.score), (vec![1, 2], 5.0));
        assert!(beam_hits_exact(&g, &w, &BeamConfig::unbounded()).unwrap());
    }

    #[test]
    fn width_one_falls_into_greedy_trap() {
        let g = greedy_trap();
        let w = g.weights().unwrap();
        let r = beam_decode(&g, &w, &BeamConfig::new(1).unwrap()).unwrap();
        assert_eq!((r.arcs.clone(), r.score), (vec![0, 2], 3.0));
        assert_eq!(g.best_path().unwrap().1, 11.0);
        assert!(!beam_hits_exact(&g, &w, &BeamConfig::new(1).unwrap()).unwrap());
        assert!(beam_hits_exact(&g, &w, &BeamConfig::new(2).unwrap()).unwrap());
        assert_eq!(hit_rate([false]), 0.0);
        assert_eq!(hit_rate([true, false, true, true]), 0.75);
    }

    #[test]
    fn zero_width_rejected() {
        assert_eq!(BeamConfig::new(0).unwrap_err(), BeamError::InvalidWidth);
    }

    #[test]
    fn lazy_beam_matches_eager_composition() {
        let cfg = SegmentationConfig::new(1, 2).unwrap();
        let a = build_full_space(4, 2, &cfg).unwrap();
        let mut lm = BigramLM::default();
        lm.bigram.insert((Label(0), Label(1)), -0.5);
        lm.bigram.insert((Label(1), Label(0)), -0.25);
        lm.unigram.insert(Label(0), -1.0);
        lm.unigram.insert(Label(1), -1.5);
        lm.backoff.insert(Label(0), -0.1);
        lm.backoff.insert(Label(1), -0.2);
        let (b, _) = build_bigram_lm_graph(&lm, 2).unwrap();
        let lazy = LazyComposition::new(&a, &b).unwrap();
        let score = |_: PairState, e: &ComposedEdge| {
            let lm_w = b.edge(e.right).weight.unwrap_or(0.0);
            let seg = e.left_edge().map_or(0.0, |x| {
                let (s, t) = a.span(x);
                let lab = a.edge(x).input.current().unwrap().0 as f64;
                0.3 * (t - s) as f64 - 0.2 * lab * s as f64
            });
            lm_w + seg
        };
        let space = ScoredComposition {
            composition: &lazy,
            scorer: score,
        };
        let lazy_best = beam_search(&space, &BeamConfig::unbounded()).unwrap();

        let eager = sigma_compose(&a, &b).unwrap();
        let w: Vec<f64> = eager
            .provenance
            .iter()
            .zip(eager.graph.edges())
            .map(|(p, e)| score(eager.states[e.tail], p))
            .collect();
        let (exact, s) = eager.graph.best_path_with(&w).unwrap();
        let exact_arcs: Vec<ComposedEdge> = exact.edges.iter().map(|&e| eager.provenance[e]).collect();
        assert_eq!(lazy_best.arcs, exact_arcs);
        assert!((lazy_best.score - s).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn wide_beam_is_exact(
            weights in prop::collection::vec(-4i32..4, 40),
            frames in 1u32..6,
        ) {
            // Integer weights make ties common, exercising tie-breaking.
            let cfg = SegmentationConfig::new(1, 3).unwrap();
            let g = build_full_space(frames as usize, 2, &cfg).unwrap();
            let w: Vec<f64> = weights.iter().cycle().take(g.num_edges()).map(|&x| x as f64).collect();
            let r = beam_decode(&g, &w, &BeamConfig::new(g.num_vertices()).unwrap()).unwrap();
            let (exact, s) = g.best_path_with(&w).unwrap();
            prop_assert_eq!(r.arcs, exact.edges);
            prop_assert_eq!(r.score, s);
        }

        #[test]
        fn beam_never_beats_exact(
            weights in prop::collection::vec(-4.0f64..4.0, 40),
            width in 1usize..4,
        ) {
            let cfg = SegmentationConfig::new(1, 3).unwrap();
            let g = build_full_space(5, 2, &cfg).unwrap();
            let w: Vec<f64> = weights.iter().cycle().take(g.num_edges()).copied().collect();
            let r = beam_decode(&g, &w, &BeamConfig::new(width).unwrap()).unwrap();
            let (_, s) = g.best_path_with(&w).unwrap();
            prop_assert!(r.score <= s);
        }
    }
}
