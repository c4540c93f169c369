//! Structured (σ-) composition of a decoding graph with a label model.
//!
//! Composition pairs an edge of `A` with an edge of `B` whenever the output
//! label of the first equals the input label of the second. The composed edge
//! takes its input label from `A` and its output label from `B`; its weight is
//! not derived from either side and is assigned later by a feature scorer.
//!
//! ε-input arcs of `B` (backoff) are taken without consuming an `A` edge. A
//! pair state carries a flag recording that the last move was such an ε move,
//! and no second ε move may follow it. `A` edges whose output is ε are not
//! composed.

use std::collections::HashMap;

use thiserror::Error;

use crate::graph::{DecodingGraph, EdgeId, Fst, Sym, VertexId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComposeError {
    #[error("composition has no accepting path")]
    EmptyResult,
    #[error("left edge {0} does not advance time")]
    NonAdvancingEdge(EdgeId),
}

/// A vertex of `A ∘σ B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairState {
    pub left: VertexId,
    pub right: VertexId,
    /// The state was entered by an ε move of `B`.
    pub after_eps: bool,
}

/// What the `A` side contributes to a composed edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeftMove {
    /// Consumes this `A` edge.
    Edge(EdgeId),
    /// `A` stays at this vertex while `B` takes an ε arc.
    Stay(VertexId),
}

/// Provenance of a composed edge. The derived order matches the edge-id
/// order of eager composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComposedEdge {
    pub left: LeftMove,
    pub right: EdgeId,
    /// Flag of the tail state.
    pub from_eps: bool,
}

impl ComposedEdge {
    pub fn left_edge(&self) -> Option<EdgeId> {
        match self.left {
            LeftMove::Edge(e) => Some(e),
            LeftMove::Stay(_) => None,
        }
    }
}

/// Materialized, trimmed `A ∘σ B`.
#[derive(Clone, Debug)]
pub struct ComposedGraph {
    pub graph: DecodingGraph,
    /// Indexed by composed edge id.
    pub provenance: Vec<ComposedEdge>,
    /// Indexed by composed vertex id.
    pub states: Vec<PairState>,
}

fn matches(a_out: Sym, b_in: Sym) -> bool {
    !a_out.is_eps() && a_out == b_in
}

/// Eager composition. Builds the product over `V_A × V_B × {flag}`, keeps
/// edge pairs with matching labels plus `B`-only ε moves, then trims.
///
/// Edge ids follow: matched edges ordered by (`A` edge, `B` edge, tail flag),
/// then ε moves ordered by (`A` vertex, `B` arc). The result is unscored.
pub fn sigma_compose(a: &DecodingGraph, b: &Fst) -> Result<ComposedGraph, ComposeError> {
    check_advancing(a)?;
    let nb = b.num_vertices();
    let index = |s: PairState| (s.left * nb + s.right) * 2 + usize::from(s.after_eps);

    let mut product = Fst::new();
    let mut states = Vec::with_capacity(a.num_vertices() * nb * 2);
    for left in 0..a.num_vertices() {
        for right in 0..nb {
            for after_eps in [false, true] {
                product.add_vertex(a.time(left));
                states.push(PairState {
                    left,
                    right,
                    after_eps,
                });
            }
        }
    }
    for ia in a.initials() {
        for ib in b.initials() {
            product
                .set_initial(index(PairState {
                    left: ia,
                    right: ib,
                    after_eps: false,
                }))
                .expect("vertex exists");
        }
    }
    for fa in a.finals() {
        for fb in b.finals() {
            for after_eps in [false, true] {
                product
                    .set_final(index(PairState {
                        left: fa,
                        right: fb,
                        after_eps,
                    }))
                    .expect("vertex exists");
            }
        }
    }

    let mut by_input: HashMap<Sym, Vec<EdgeId>> = HashMap::new();
    for (id, e) in b.edges().iter().enumerate() {
        by_input.entry(e.input).or_default().push(id);
    }

    let mut provenance = Vec::new();
    for (e1, ea) in a.edges().iter().enumerate() {
        if ea.output.is_eps() {
            continue;
        }
        let Some(candidates) = by_input.get(&ea.output) else {
            continue;
        };
        for &e2 in candidates {
            let eb = b.edge(e2);
            for from_eps in [false, true] {
                let tail = index(PairState {
                    left: ea.tail,
                    right: eb.tail,
                    after_eps: from_eps,
                });
                let head = index(PairState {
                    left: ea.head,
                    right: eb.head,
                    after_eps: false,
                });
                product
                    .add_edge(tail, head, ea.input, eb.output)
                    .expect("vertices exist");
                provenance.push(ComposedEdge {
                    left: LeftMove::Edge(e1),
                    right: e2,
                    from_eps,
                });
            }
        }
    }
    let eps_arcs = by_input.get(&Sym::Eps).cloned().unwrap_or_default();
    for va in 0..a.num_vertices() {
        for &e2 in &eps_arcs {
            let eb = b.edge(e2);
            let tail = index(PairState {
                left: va,
                right: eb.tail,
                after_eps: false,
            });
            let head = index(PairState {
                left: va,
                right: eb.head,
                after_eps: true,
            });
            product
                .add_edge(tail, head, Sym::Eps, eb.output)
                .expect("vertices exist");
            provenance.push(ComposedEdge {
                left: LeftMove::Stay(va),
                right: e2,
                from_eps: false,
            });
        }
    }

    let trimmed = product.trim();
    if trimmed.fst.num_edges() == 0 {
        return Err(ComposeError::EmptyResult);
    }
    let provenance = trimmed.edge_map.iter().map(|&e| provenance[e]).collect();
    let states = trimmed.vertex_map.iter().map(|&v| states[v]).collect();
    let graph = trimmed
        .fst
        .seal()
        .expect("time advances on every A-consuming edge and ε moves cannot repeat");
    Ok(ComposedGraph {
        graph,
        provenance,
        states,
    })
}

fn check_advancing(a: &DecodingGraph) -> Result<(), ComposeError> {
    for e in 0..a.num_edges() {
        let (start, end) = a.span(e);
        if end <= start {
            return Err(ComposeError::NonAdvancingEdge(e));
        }
    }
    Ok(())
}

/// On-the-fly composition: expands pair states without materializing the
/// product. Dead ends cannot be trimmed in this mode.
#[derive(Clone, Debug)]
pub struct LazyComposition<'a> {
    a: &'a DecodingGraph,
    b: &'a Fst,
    b_out: Vec<Vec<EdgeId>>,
}

impl<'a> LazyComposition<'a> {
    pub fn new(a: &'a DecodingGraph, b: &'a Fst) -> Result<Self, ComposeError> {
        check_advancing(a)?;
        Ok(LazyComposition {
            a,
            b,
            b_out: b.out_adjacency(),
        })
    }

    pub fn left(&self) -> &'a DecodingGraph {
        self.a
    }

    pub fn right(&self) -> &'a Fst {
        self.b
    }

    pub fn initial_states(&self) -> Vec<PairState> {
        let mut out = Vec::new();
        for left in self.a.initials() {
            for right in self.b.initials() {
                out.push(PairState {
                    left,
                    right,
                    after_eps: false,
                });
            }
        }
        out
    }

    pub fn is_final(&self, s: PairState) -> bool {
        self.a.is_final(s.left) && self.b.is_final(s.right)
    }

    pub fn time(&self, s: PairState) -> u32 {
        self.a.time(s.left)
    }

    /// Out-edges of `state`: matched pairs ordered by `A` edge then `B` edge,
    /// followed by the ε moves of [`Self::epsilon_step`].
    pub fn neighbors(&self, state: PairState) -> Vec<(ComposedEdge, PairState)> {
        let mut out = Vec::new();
        for &e1 in self.a.out_edges(state.left) {
            let ea = self.a.edge(e1);
            for &e2 in &self.b_out[state.right] {
                let eb = self.b.edge(e2);
                if matches(ea.output, eb.input) {
                    out.push((
                        ComposedEdge {
                            left: LeftMove::Edge(e1),
                            right: e2,
                            from_eps: state.after_eps,
                        },
                        PairState {
                            left: ea.head,
                            right: eb.head,
                            after_eps: false,
                        },
                    ));
                }
            }
        }
        out.extend(self.epsilon_step(state));
        out
    }

    /// `B`-only ε moves from `state`; empty right after another ε move.
    pub fn epsilon_step(&self, state: PairState) -> Vec<(ComposedEdge, PairState)> {
        if state.after_eps {
            return Vec::new();
        }
        self.b_out[state.right]
            .iter()
            .filter(|&&e2| self.b.edge(e2).input.is_eps())
            .map(|&e2| {
                (
                    ComposedEdge {
                        left: LeftMove::Stay(state.left),
                        right: e2,
                        from_eps: false,
                    },
                    PairState {
                        left: state.left,
                        right: self.b.edge(e2).head,
                        after_eps: true,
                    },
                )
            })
            .collect()
    }

    /// Input and output labels of a composed edge.
    pub fn labels(&self, edge: &ComposedEdge) -> (Sym, Sym) {
        let out = self.b.edge(edge.right).output;
        match edge.left {
            LeftMove::Edge(e1) => (self.a.edge(e1).input, out),
            LeftMove::Stay(_) => (Sym::Eps, out),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::{BTreeSet, HashSet};

    use super::*;
    use crate::graph::Label;
    use crate::hypothesis::{build_bigram_lm_graph, build_full_space, BigramLM, SegmentationConfig};

    fn one(s: u32) -> Sym {
        Sym::One(Label(s))
    }

    fn single_edge(label: u32) -> DecodingGraph {
        let mut a = Fst::new();
        a.add_vertex(0);
        a.add_vertex(1);
        a.add_edge(0, 1, one(label), one(label)).unwrap();
        a.set_initial(0).unwrap();
        a.set_final(1).unwrap();
        a.seal().unwrap()
    }

    #[test]
    fn single_match() {
        let a = single_edge(0);
        let mut b = Fst::new();
        b.add_vertex(0);
        b.add_vertex(0);
        b.add_weighted_edge(0, 1, one(0), Sym::Pair(None, Label(0)), -1.0)
            .unwrap();
        b.set_initial(0).unwrap();
        b.set_final(1).unwrap();
        let g = sigma_compose(&a, &b).unwrap();
        assert_eq!(g.graph.num_edges(), 1);
        assert_eq!(g.graph.edge(0).output, Sym::Pair(None, Label(0)));
        assert_eq!(g.graph.edge(0).input, one(0));
        assert_eq!(g.provenance[0].left_edge(), Some(0));
    }

    #[test]
    fn non_matching_label_dropped() {
        let mut a = Fst::new();
        a.add_vertex(0);
        a.add_vertex(1);
        a.add_edge(0, 1, one(0), one(0)).unwrap();
        a.add_edge(0, 1, one(1), one(1)).unwrap();
        a.set_initial(0).unwrap();
        a.set_final(1).unwrap();
        let a = a.seal().unwrap();
        let mut b = Fst::new();
        b.add_vertex(0);
        b.add_vertex(0);
        b.add_weighted_edge(0, 1, one(0), Sym::Pair(None, Label(0)), 0.0)
            .unwrap();
        b.set_initial(0).unwrap();
        b.set_final(1).unwrap();
        let g = sigma_compose(&a, &b).unwrap();
        assert_eq!(g.graph.num_edges(), 1);
        assert_eq!(g.provenance[0].left, LeftMove::Edge(0));

        let a2 = single_edge(1);
        assert_eq!(sigma_compose(&a2, &b).unwrap_err(), ComposeError::EmptyResult);
    }

    /// The H2 lattice drawn alongside its composition with a bigram model:
    /// a|b over [0,1], a over [1,2], b over [1,3], a over [2,3], c over [3,4].
    fn figure_lattice() -> DecodingGraph {
        let mut h = Fst::new();
        for t in 0..5 {
            h.add_vertex(t);
        }
        for (t, hd, s) in [(0, 1, 0), (0, 1, 1), (1, 3, 1), (1, 2, 0), (2, 3, 0), (3, 4, 2)] {
            h.add_edge(t, hd, one(s), one(s)).unwrap();
        }
        h.set_initial(0).unwrap();
        h.set_final(4).unwrap();
        h.seal().unwrap()
    }

    fn full_bigram(n: usize) -> Fst {
        let mut lm = BigramLM::default();
        for s in 0..n {
            lm.unigram.insert(Label::from(s), -1.0);
            for t in 0..n {
                lm.bigram.insert((Label::from(s), Label::from(t)), -1.0);
            }
        }
        build_bigram_lm_graph(&lm, n).unwrap().0
    }

    #[test]
    fn figure_composition_shape() {
        let g = sigma_compose(&figure_lattice(), &full_bigram(3)).unwrap();
        assert_eq!(g.graph.num_vertices(), 7);
        assert_eq!(g.graph.num_edges(), 9);
        let outs: BTreeSet<(Option<u32>, u32)> = g
            .graph
            .edges()
            .iter()
            .map(|e| match e.output {
                Sym::Pair(h, s) => (h.map(|l| l.0), s.0),
                _ => panic!("unexpected output label"),
            })
            .collect();
        let expected: BTreeSet<_> = [
            (None, 0),
            (None, 1),
            (Some(0), 0),
            (Some(0), 1),
            (Some(1), 0),
            (Some(1), 1),
            (Some(0), 2),
            (Some(1), 2),
        ]
        .into_iter()
        .collect();
        assert_eq!(outs, expected);
        // "b_c" leaves the upper length-2 branch.
        let b_c = g
            .graph
            .edges()
            .iter()
            .position(|e| e.output == Sym::Pair(Some(Label(1)), Label(2)))
            .unwrap();
        let tail = g.states[g.graph.edge(b_c).tail];
        assert_eq!(tail.left, 3);
        assert_eq!(g.graph.time(g.graph.edge(b_c).tail), 3);
    }

    #[test]
    fn composed_labels_follow_sides() {
        let a = build_full_space(3, 2, &SegmentationConfig::new(1, 2).unwrap()).unwrap();
        let b = full_bigram(2);
        let g = sigma_compose(&a, &b).unwrap();
        for (id, p) in g.provenance.iter().enumerate() {
            let e = g.graph.edge(id);
            let e1 = p.left_edge().unwrap();
            assert_eq!(e.input, a.edge(e1).input);
            assert_eq!(e.output, b.edge(p.right).output);
            assert_eq!(a.edge(e1).output, b.edge(p.right).input);
            let (tail, head) = (g.states[e.tail], g.states[e.head]);
            assert_eq!((tail.left, tail.right), (a.edge(e1).tail, b.edge(p.right).tail));
            assert_eq!((head.left, head.right), (a.edge(e1).head, b.edge(p.right).head));
            assert_eq!(g.graph.time(e.tail), a.time(tail.left));
        }
    }

    fn backoff_lm() -> Fst {
        let mut lm = BigramLM::default();
        lm.unigram.insert(Label(0), -0.7);
        lm.unigram.insert(Label(1), -0.7);
        lm.bigram.insert((Label(0), Label(1)), -0.1);
        lm.backoff.insert(Label(0), -2.0);
        lm.backoff.insert(Label(1), 0.0);
        build_bigram_lm_graph(&lm, 2).unwrap().0
    }

    #[test]
    fn epsilon_sequencing() {
        let b = backoff_lm();
        let a = figure_lattice();
        let lazy = LazyComposition::new(&a, &b).unwrap();
        let h0 = PairState {
            left: 1,
            right: 1,
            after_eps: false,
        };
        let moves = lazy.epsilon_step(h0);
        assert_eq!(moves.len(), 1);
        let next = moves[0].1;
        assert!(next.after_eps);
        assert!(lazy.epsilon_step(next).is_empty());

        let full = full_bigram(2);
        let lazy = LazyComposition::new(&a, &full).unwrap();
        assert!(lazy.epsilon_step(h0).is_empty());
    }

    fn lazy_reachable(lazy: &LazyComposition) -> HashSet<(PairState, ComposedEdge, PairState)> {
        let mut seen = HashSet::new();
        let mut visited = HashSet::new();
        let mut stack = lazy.initial_states();
        while let Some(s) = stack.pop() {
            if !visited.insert(s) {
                continue;
            }
            for (e, n) in lazy.neighbors(s) {
                seen.insert((s, e, n));
                stack.push(n);
            }
        }
        seen
    }

    #[test]
    fn lazy_matches_eager_after_trim() {
        let a = build_full_space(4, 2, &SegmentationConfig::new(1, 2).unwrap()).unwrap();
        for b in [backoff_lm(), full_bigram(2)] {
            let eager = sigma_compose(&a, &b).unwrap();
            let eager_set: HashSet<_> = (0..eager.graph.num_edges())
                .map(|id| {
                    let e = eager.graph.edge(id);
                    (eager.states[e.tail], eager.provenance[id], eager.states[e.head])
                })
                .collect();
            let lazy = LazyComposition::new(&a, &b).unwrap();
            let reach = lazy_reachable(&lazy);
            // Trim the lazy expansion: keep edges whose head reaches a final state.
            let mut live: HashSet<PairState> =
                reach.iter().map(|t| t.2).chain(lazy.initial_states()).filter(|&s| lazy.is_final(s)).collect();
            loop {
                let before = live.len();
                for (t, _, h) in &reach {
                    if live.contains(h) {
                        live.insert(*t);
                    }
                }
                if live.len() == before {
                    break;
                }
            }
            let trimmed: HashSet<_> = reach.into_iter().filter(|(_, _, h)| live.contains(h)).collect();
            assert_eq!(trimmed, eager_set);

            // Per-state order matches eager edge ids.
            for v in 0..eager.graph.num_vertices() {
                let eager_out: Vec<ComposedEdge> = eager
                    .graph
                    .out_edges(v)
                    .iter()
                    .map(|&e| eager.provenance[e])
                    .collect();
                let lazy_out: Vec<ComposedEdge> = lazy
                    .neighbors(eager.states[v])
                    .into_iter()
                    .map(|(e, _)| e)
                    .filter(|e| eager_out.contains(e))
                    .collect();
                assert_eq!(lazy_out, eager_out);
                let mut sorted = eager_out.clone();
                sorted.sort();
                assert_eq!(sorted, eager_out);
            }
        }
    }

    #[test]
    fn final_state_has_no_neighbors() {
        let a = figure_lattice();
        let b = full_bigram(3);
        let lazy = LazyComposition::new(&a, &b).unwrap();
        let end = PairState {
            left: 4,
            right: 3,
            after_eps: false,
        };
        assert!(lazy.is_final(end));
        assert!(lazy.neighbors(end).is_empty());
    }
}
