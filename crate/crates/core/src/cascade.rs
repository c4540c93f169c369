//! Level-by-level cascade: train, prune with max-marginals, compose with the
//! next level's label model, repeat.

use rayon::prelude::*;
use thiserror::Error;

use crate::compose::{sigma_compose, ComposeError, LeftMove};
use crate::corpus::{Split, Utterance};
use crate::features::{EdgeContext, EdgeFeatures, FeatureError, FeatureLayout, FeatureTemplate, FrameScores, Model};
use crate::graph::{DecodingGraph, GraphError, Label, Sym};
use crate::hypothesis::{build_full_space, HypothesisError, SegmentationConfig};
use crate::learn::{path_labels, train_level, CostKind, EpochLog, Instance, LearnError, TrainConfig};
use crate::prune::{lattice_metrics, prune_to_lattice, PruneError, PruneReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("cascade has no levels")]
    NoLevels,
    #[error("graph already carries label-model outputs and cannot be composed again")]
    AlreadyComposed,
    #[error("utterance {id}: {source}")]
    Utterance { id: String, source: Box<CascadeError> },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
}

impl CascadeError {
    fn at(self, id: &str) -> Self {
        CascadeError::Utterance {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

/// A decoding graph plus the per-edge attributes its features read.
#[derive(Clone, Debug)]
pub struct LevelGraph {
    pub graph: DecodingGraph,
    pub contexts: Vec<EdgeContext>,
}

impl LevelGraph {
    /// The full segmentation space over `frames` frames.
    pub fn full_space(frames: usize, labels: usize, seg: &SegmentationConfig) -> Result<Self, CascadeError> {
        let graph = build_full_space(frames, labels, seg)?;
        Ok(Self::from_graph(graph))
    }

    /// Contexts read off edge labels and times. Stored weights become the
    /// lattice score.
    pub fn contexts_of(g: &DecodingGraph) -> Vec<EdgeContext> {
        g.edges()
            .iter()
            .map(|e| {
                let span = (!e.input.is_eps()).then(|| (g.time(e.tail), g.time(e.head)));
                EdgeContext {
                    span,
                    current: e.input.current(),
                    history: e.output.history(),
                    lm_score: None,
                    lattice_score: e.weight.filter(|_| span.is_some()),
                }
            })
            .collect()
    }

    pub fn from_graph(graph: DecodingGraph) -> Self {
        let contexts = Self::contexts_of(&graph);
        LevelGraph { graph, contexts }
    }

    pub fn features(&self, layout: &FeatureLayout, fs: &FrameScores) -> Result<EdgeFeatures, CascadeError> {
        Ok(EdgeFeatures::new(layout, fs, self.contexts.clone())?)
    }

    pub fn scores(&self, model: &Model, fs: &FrameScores) -> Result<Vec<f64>, CascadeError> {
        Ok(self.features(&model.layout, fs)?.scores(&model.theta))
    }

    /// Exact decode under `model`; returns the segment labels and score.
    pub fn decode(&self, model: &Model, fs: &FrameScores) -> Result<(Vec<Label>, f64), CascadeError> {
        let w = self.scores(model, fs)?;
        let (path, score) = self.graph.best_path_with(&w)?;
        Ok((path_labels(&self.graph, &path), score))
    }

    /// Prunes under `weights`; kept edges remember their score as the
    /// lattice score.
    pub fn prune(&self, weights: &[f64], lambda: f64) -> Result<(LevelGraph, PruneReport), CascadeError> {
        let lat = prune_to_lattice(&self.graph, weights, lambda)?;
        let contexts = lat
            .edge_map
            .iter()
            .map(|&old| {
                let mut c = self.contexts[old];
                if c.span.is_some() {
                    c.lattice_score = Some(weights[old]);
                }
                c
            })
            .collect();
        Ok((
            LevelGraph {
                graph: lat.graph,
                contexts,
            },
            lat.report,
        ))
    }

    /// σ-composition with a label model whose arc weights are LM scores.
    pub fn compose(&self, lm: &crate::graph::Fst) -> Result<LevelGraph, CascadeError> {
        if self
            .graph
            .edges()
            .iter()
            .any(|e| matches!(e.output, Sym::Pair(..)) || e.input.is_eps())
        {
            return Err(CascadeError::AlreadyComposed);
        }
        let composed = sigma_compose(&self.graph, lm)?;
        let contexts = composed
            .provenance
            .iter()
            .map(|p| {
                let arc = lm.edge(p.right);
                let lm_score = arc.weight;
                match p.left {
                    LeftMove::Edge(e1) => EdgeContext {
                        history: arc.output.history(),
                        lm_score,
                        ..self.contexts[e1]
                    },
                    LeftMove::Stay(_) => EdgeContext {
                        lm_score,
                        ..EdgeContext::default()
                    },
                }
            })
            .collect();
        Ok(LevelGraph {
            graph: composed.graph,
            contexts,
        })
    }
}

/// One cascade level: its templates, the label model composed into its
/// graphs (if any), the pruning weight applied to its output and its
/// training budget.
#[derive(Clone, Debug)]
pub struct CascadeLevel {
    pub templates: Vec<FeatureTemplate>,
    pub lm: Option<crate::graph::Fst>,
    pub lambda: f64,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct CascadeConfig {
    pub segmentation: SegmentationConfig,
    pub cost: CostKind,
    pub levels: Vec<CascadeLevel>,
}

#[derive(Clone, Debug)]
pub struct LevelOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub initial_dev_per: f64,
    pub dev_per: f64,
    /// Pruning of this level's graphs for the next level, per utterance.
    pub prune_reports: Vec<(String, PruneReport)>,
}

/// Graph of every utterance at the first level.
pub fn first_level_graphs(
    utterances: &[&Utterance],
    labels: usize,
    seg: &SegmentationConfig,
) -> Result<Vec<LevelGraph>, CascadeError> {
    utterances
        .par_iter()
        .map(|u| {
            u.gold
                .check_max_len(seg.max_segment_frames)
                .map_err(|e| CascadeError::from(LearnError::from(e)).at(&u.id))?;
            LevelGraph::full_space(u.scores.frames(), labels, seg).map_err(|e| e.at(&u.id))
        })
        .collect()
}

/// Prunes each graph under its level model and composes with the next
/// level's label model.
pub fn advance_graphs(
    utterances: &[&Utterance],
    graphs: &[LevelGraph],
    model: &Model,
    lambda: f64,
    lm: Option<&crate::graph::Fst>,
    classes: Option<&[usize]>,
) -> Result<Vec<(LevelGraph, PruneReport)>, CascadeError> {
    utterances
        .par_iter()
        .zip(graphs)
        .map(|(u, g)| {
            let step = || -> Result<(LevelGraph, PruneReport), CascadeError> {
                let w = g.scores(model, &u.scores)?;
                let (lattice, report) = g.prune(&w, lambda)?;
                let report = report.with_metrics(lattice_metrics(&lattice.graph, &u.gold.labels(), classes));
                let next = match lm {
                    Some(lm) => lattice.compose(lm)?,
                    None => lattice,
                };
                Ok((next, report))
            };
            step().map_err(|e| e.at(&u.id))
        })
        .collect()
}

fn instances(
    utterances: &[&Utterance],
    graphs: &[LevelGraph],
    layout: &FeatureLayout,
    cost: CostKind,
) -> Result<Vec<Instance>, CascadeError> {
    utterances
        .par_iter()
        .zip(graphs)
        .map(|(u, g)| {
            Instance::new(&u.id, g.graph.clone(), g.contexts.clone(), layout, &u.scores, &u.gold, cost)
                .map_err(|e| CascadeError::from(e).at(&u.id))
        })
        .collect()
}

/// Trains every level in turn on the train split, selecting on dev.
pub fn run_cascade(
    utterances: &[Utterance],
    labels: usize,
    cfg: &CascadeConfig,
) -> Result<Vec<LevelOutcome>, CascadeError> {
    if cfg.levels.is_empty() {
        return Err(CascadeError::NoLevels);
    }
    let used: Vec<&Utterance> = utterances
        .iter()
        .filter(|u| matches!(u.split, Split::Train | Split::Dev))
        .collect();
    let is_train: Vec<bool> = used.iter().map(|u| u.split == Split::Train).collect();

    let mut graphs = first_level_graphs(&used, labels, &cfg.segmentation)?;
    let mut outcomes: Vec<LevelOutcome> = Vec::new();
    for (k, level) in cfg.levels.iter().enumerate() {
        if k > 0 {
            let prev = &cfg.levels[k - 1];
            let advanced = advance_graphs(
                &used,
                &graphs,
                &outcomes[k - 1].model,
                prev.lambda,
                level.lm.as_ref(),
                prev.train.classes.as_deref(),
            )?;
            let (next, reports): (Vec<_>, Vec<_>) = advanced.into_iter().unzip();
            outcomes[k - 1].prune_reports = used.iter().map(|u| u.id.clone()).zip(reports).collect();
            graphs = next;
        } else if let Some(lm) = &level.lm {
            graphs = graphs
                .iter()
                .zip(&used)
                .map(|(g, u)| g.compose(lm).map_err(|e| e.at(&u.id)))
                .collect::<Result<_, _>>()?;
        }

        let layout = FeatureLayout::new(level.templates.clone(), labels, cfg.segmentation.max_segment_frames);
        let all = instances(&used, &graphs, &layout, cfg.cost)?;
        let (mut train, mut dev) = (Vec::new(), Vec::new());
        for (inst, &t) in all.into_iter().zip(&is_train) {
            if t {
                train.push(inst);
            } else {
                dev.push(inst);
            }
        }
        let out = train_level(k + 1, &layout, &train, &dev, &level.train)?;
        outcomes.push(LevelOutcome {
            model: out.model,
            log: out.log,
            initial_dev_per: out.initial_dev_per,
            dev_per: out.dev_per,
            prune_reports: Vec::new(),
        });
    }
    Ok(outcomes)
}
