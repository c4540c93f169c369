//! Structured hinge-loss training with AdaGrad.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{CorpusError, GoldSegmentation};
use crate::eval::{edit_counts, EditCounts};
use crate::features::{EdgeContext, EdgeFeatures, FeatureError, FeatureLayout, FrameScores, Model, SparseFeatureVector};
use crate::graph::{DecodingGraph, GraphError, Label, Path, NEG_INF};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("gold segmentation of {0:?} is not a path of its graph")]
    GoldUnreachable(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no development utterances")]
    EmptyDev,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// Edge-decomposable cost of a hypothesized segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CostKind {
    /// Duration minus the largest overlap with a same-label gold segment.
    #[default]
    Overlap,
    /// Frames whose gold label differs from the segment label.
    FrameError,
}

impl std::str::FromStr for CostKind {
    type Err = LearnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overlap" => Ok(CostKind::Overlap),
            "frame" => Ok(CostKind::FrameError),
            _ => Err(LearnError::InvalidConfig(format!("unknown cost {s:?}"))),
        }
    }
}

/// Gold segments intersecting `[start, end)`.
fn overlapping(gold: &GoldSegmentation, start: u32, end: u32) -> impl Iterator<Item = (Label, u32)> + '_ {
    let segs = gold.segments();
    let first = segs.partition_point(|g| g.end <= start);
    segs[first..]
        .iter()
        .take_while(move |g| g.start < end)
        .map(move |g| (g.label, g.end.min(end) - g.start.max(start)))
}

pub fn overlap_cost_edge(start: u32, end: u32, label: Label, gold: &GoldSegmentation) -> f64 {
    let best = overlapping(gold, start, end)
        .filter(|&(l, _)| l == label)
        .map(|(_, n)| n)
        .max()
        .unwrap_or(0);
    (end - start - best) as f64
}

pub fn frame_error_cost_edge(start: u32, end: u32, label: Label, gold: &GoldSegmentation) -> f64 {
    overlapping(gold, start, end)
        .filter(|&(l, _)| l != label)
        .map(|(_, n)| n)
        .sum::<u32>() as f64
}

/// Per-edge costs; ε moves cost nothing.
pub fn edge_costs(contexts: &[EdgeContext], gold: &GoldSegmentation, kind: CostKind) -> Vec<f64> {
    contexts
        .iter()
        .map(|c| match (c.span, c.current) {
            (Some((s, e)), Some(l)) => match kind {
                CostKind::Overlap => overlap_cost_edge(s, e, l, gold),
                CostKind::FrameError => frame_error_cost_edge(s, e, l, gold),
            },
            _ => 0.0,
        })
        .collect()
}

/// Segment labels along a path, ε moves skipped.
pub fn path_labels(g: &DecodingGraph, path: &Path) -> Vec<Label> {
    path.edges
        .iter()
        .filter_map(|&e| g.edge(e).input.current())
        .collect()
}

/// One utterance prepared for training or evaluation at one level.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub graph: DecodingGraph,
    pub features: EdgeFeatures,
    pub costs: Vec<f64>,
    /// Edges a gold realization may use: gold segments and ε moves.
    pub gold_mask: Vec<bool>,
    pub gold_labels: Vec<Label>,
}

impl Instance {
    pub fn new(
        id: &str,
        graph: DecodingGraph,
        contexts: Vec<EdgeContext>,
        layout: &FeatureLayout,
        scores: &FrameScores,
        gold: &GoldSegmentation,
        cost: CostKind,
    ) -> Result<Self, LearnError> {
        let costs = edge_costs(&contexts, gold, cost);
        let gold_mask = contexts
            .iter()
            .map(|c| match (c.span, c.current) {
                (Some((s, e)), Some(l)) => gold.contains(s, e, l),
                (None, _) => true,
                _ => false,
            })
            .collect();
        let features = EdgeFeatures::new(layout, scores, contexts)?;
        Ok(Instance {
            id: id.to_string(),
            graph,
            features,
            costs,
            gold_mask,
            gold_labels: gold.labels(),
        })
    }

    pub fn scores(&self, theta: &[f64]) -> Vec<f64> {
        self.features.scores(theta)
    }

    /// Best path under `θ`.
    pub fn decode(&self, theta: &[f64]) -> Result<(Path, f64), LearnError> {
        Ok(self.graph.best_path_with(&self.scores(theta))?)
    }

    /// Best-scoring path through gold-consistent edges.
    pub fn gold_path(&self, scores: &[f64]) -> Result<(Path, f64), LearnError> {
        let w: Vec<f64> = scores
            .iter()
            .zip(&self.gold_mask)
            .map(|(&s, &ok)| if ok { s } else { NEG_INF })
            .collect();
        match self.graph.best_path_with(&w) {
            Err(GraphError::NoPath) => Err(LearnError::GoldUnreachable(self.id.clone())),
            r => Ok(r?),
        }
    }

    /// argmax over paths of cost + score; returns the path and that total.
    pub fn cost_augmented_path(&self, scores: &[f64]) -> Result<(Path, f64), LearnError> {
        let w: Vec<f64> = scores.iter().zip(&self.costs).map(|(s, c)| s + c).collect();
        Ok(self.graph.best_path_with(&w)?)
    }

    pub fn path_cost(&self, path: &Path) -> f64 {
        path.edges.iter().map(|&e| self.costs[e]).sum()
    }

    fn path_features(&self, path: &Path, scale: f64, acc: &mut BTreeMap<usize, f64>) {
        for &e in &path.edges {
            self.features.accumulate(e, scale, acc);
        }
    }
}

/// Loss, gold realization and cost-augmented path at one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct HingeTerms {
    pub loss: f64,
    pub gold: Path,
    pub augmented: Path,
}

pub fn hinge_terms(inst: &Instance, theta: &[f64]) -> Result<HingeTerms, LearnError> {
    let scores = inst.scores(theta);
    let (gold, gold_score) = inst.gold_path(&scores)?;
    let (augmented, aug_score) = inst.cost_augmented_path(&scores)?;
    Ok(HingeTerms {
        loss: (aug_score - gold_score).max(0.0),
        gold,
        augmented,
    })
}

/// max over y′ of cost(y, y′) + θ·φ(y′) − θ·φ(y).
pub fn hinge_loss(inst: &Instance, theta: &[f64]) -> Result<f64, LearnError> {
    Ok(hinge_terms(inst, theta)?.loss)
}

/// φ(ỹ) − φ(y) as a sparse map; empty when ỹ = y.
fn subgradient_map(inst: &Instance, terms: &HingeTerms) -> BTreeMap<usize, f64> {
    let mut acc = BTreeMap::new();
    if terms.augmented == terms.gold {
        return acc;
    }
    inst.path_features(&terms.augmented, 1.0, &mut acc);
    inst.path_features(&terms.gold, -1.0, &mut acc);
    acc.retain(|_, v| *v != 0.0);
    acc
}

pub fn hinge_subgradient(inst: &Instance, theta: &[f64]) -> Result<SparseFeatureVector, LearnError> {
    let terms = hinge_terms(inst, theta)?;
    Ok(SparseFeatureVector::from_entries(
        inst.features.layout().dim(),
        subgradient_map(inst, &terms),
    )?)
}

/// Diagonal AdaGrad.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaGrad {
    pub step_size: f64,
    pub delta: f64,
    accumulators: Vec<f64>,
}

pub const ADAGRAD_DELTA: f64 = 1e-8;

impl AdaGrad {
    pub fn new(dim: usize, step_size: f64, delta: f64) -> Self {
        AdaGrad {
            step_size,
            delta,
            accumulators: vec![0.0; dim],
        }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accumulators
    }

    /// Touches only the coordinates present in `grad`.
    pub fn step<'a, I>(&mut self, theta: &mut [f64], grad: I)
    where
        I: IntoIterator<Item = (&'a usize, &'a f64)>,
    {
        for (&i, &g) in grad {
            self.accumulators[i] += g * g;
            theta[i] -= self.step_size * g / (self.delta + self.accumulators[i].sqrt());
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub step_sizes: Vec<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub delta: f64,
    /// Label index → scoring class; identity when `None`.
    pub classes: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_sizes: vec![0.01, 0.1, 1.0],
            epochs: 70,
            seed: 0,
            delta: ADAGRAD_DELTA,
            classes: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.step_sizes.is_empty() || self.step_sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(LearnError::InvalidConfig("step sizes must be positive".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(LearnError::InvalidConfig("delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub level: usize,
    pub step_size: f64,
    pub epoch: usize,
    pub train_loss_mean: f64,
    pub dev_per: f64,
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// `None` when the zero model was never beaten.
    pub best_step_size: Option<f64>,
    pub best_epoch: usize,
    pub initial_dev_per: f64,
    pub dev_per: f64,
}

fn map_labels(labels: &[Label], classes: Option<&[usize]>) -> Vec<usize> {
    labels
        .iter()
        .map(|l| classes.map_or(l.index(), |c| c[l.index()]))
        .collect()
}

/// Edit counts of exact decodes, in instance order.
pub fn decode_counts(
    instances: &[Instance],
    theta: &[f64],
    classes: Option<&[usize]>,
) -> Result<Vec<EditCounts>, LearnError> {
    instances
        .par_iter()
        .map(|inst| {
            let (path, _) = inst.decode(theta)?;
            let hyp = map_labels(&path_labels(&inst.graph, &path), classes);
            Ok(edit_counts(&hyp, &map_labels(&inst.gold_labels, classes)))
        })
        .collect()
}

/// Pooled error rate of exact decodes.
pub fn decode_per(instances: &[Instance], theta: &[f64], classes: Option<&[usize]>) -> Result<f64, LearnError> {
    let mut total = EditCounts::default();
    for c in decode_counts(instances, theta, classes)? {
        total.add(&c);
    }
    Ok(total.rate())
}

/// Sequential subgradient training over every step size, keeping the
/// (step size, epoch) with the lowest dev error. Ties keep the earlier one;
/// the zero model is the first candidate.
pub fn train_level(
    level: usize,
    layout: &FeatureLayout,
    train: &[Instance],
    dev: &[Instance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, LearnError> {
    cfg.validate()?;
    if dev.is_empty() {
        return Err(LearnError::EmptyDev);
    }
    let classes = cfg.classes.as_deref();
    let dim = layout.dim();
    let initial_dev_per = decode_per(dev, &vec![0.0; dim], classes)?;
    let mut best = (initial_dev_per, vec![0.0; dim], None, 0);
    let mut log = Vec::new();

    for (k, &eta) in cfg.step_sizes.iter().enumerate() {
        let mut theta = vec![0.0; dim];
        let mut opt = AdaGrad::new(dim, eta, cfg.delta);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut counted, mut skipped) = (0.0, 0usize, 0usize);
            for &i in &order {
                let inst = &train[i];
                let terms = match hinge_terms(inst, &theta) {
                    Ok(t) => t,
                    Err(LearnError::GoldUnreachable(_)) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += terms.loss;
                counted += 1;
                let grad = subgradient_map(inst, &terms);
                opt.step(&mut theta, &grad);
            }
            let dev_per = decode_per(dev, &theta, classes)?;
            log.push(EpochLog {
                level,
                step_size: eta,
                epoch,
                train_loss_mean: if counted == 0 { 0.0 } else { loss_sum / counted as f64 },
                dev_per,
                skipped,
            });
            if dev_per < best.0 {
                best = (dev_per, theta.clone(), Some(eta), epoch);
            }
        }
    }

    let (dev_per, theta, best_step_size, best_epoch) = best;
    Ok(TrainOutcome {
        model: Model {
            layout: layout.clone(),
            theta,
        },
        log,
        best_step_size,
        best_epoch,
        initial_dev_per,
        dev_per,
    })
}
