//! Level-one hypothesis spaces and bigram label models.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::graph::{DecodingGraph, Fst, Label, Sym};

/// Name used for ε in text formats. Not a valid label name.
pub const EPS_NAME: &str = "<eps>";
/// Conventional sentence-boundary label names. They are ordinary labels.
pub const SENTENCE_START: &str = "<s>";
pub const SENTENCE_END: &str = "</s>";

/// Smallest backoff mass given to a history whose bigram table does not
/// cover every label.
pub const MIN_BACKOFF_MASS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("{0:?} is reserved and cannot be a label")]
    ReservedLabel(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("label set is empty")]
    EmptyLabelSet,
    #[error("invalid segmentation config: min {min}, max {max}")]
    InvalidSegmentation { min: usize, max: usize },
    #[error("utterance must have at least one frame")]
    NoFrames,
    #[error("no unigram entry for label {0}")]
    MissingUnigram(usize),
    #[error("corpus has no label tokens")]
    EmptyCorpus,
    #[error("label {0} is outside the label set")]
    LabelOutOfRange(usize),
    #[error("invalid smoothing: add_k {add_k}, discount {discount}")]
    InvalidSmoothing { add_k: f64, discount: f64 },
}

/// Ordered set of label names; indices are dense from zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
    index: HashMap<String, Label>,
}

impl LabelSet {
    pub fn new<I, S>(names: I) -> Result<Self, HypothesisError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = LabelSet {
            names: Vec::new(),
            index: HashMap::new(),
        };
        for name in names {
            let name = name.into();
            if name == EPS_NAME || name.contains('|') || name.split_whitespace().count() != 1 {
                return Err(HypothesisError::ReservedLabel(name));
            }
            if set.index.contains_key(&name) {
                return Err(HypothesisError::DuplicateLabel(name));
            }
            set.index.insert(name.clone(), Label::from(set.names.len()));
            set.names.push(name);
        }
        if set.names.is_empty() {
            return Err(HypothesisError::EmptyLabelSet);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<Label, HypothesisError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| HypothesisError::UnknownLabel(name.to_string()))
    }

    pub fn name(&self, label: Label) -> &str {
        &self.names[label.index()]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> {
        (0..self.names.len()).map(Label::from)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentationConfig {
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            min_segment_frames: 1,
            max_segment_frames: 30,
        }
    }
}

impl SegmentationConfig {
    pub fn new(min: usize, max: usize) -> Result<Self, HypothesisError> {
        let cfg = SegmentationConfig {
            min_segment_frames: min,
            max_segment_frames: max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HypothesisError> {
        let (min, max) = (self.min_segment_frames, self.max_segment_frames);
        if min == 0 || min > max {
            return Err(HypothesisError::InvalidSegmentation { min, max });
        }
        Ok(())
    }

    /// Number of edges in the full space over `frames` frames and `labels` labels.
    pub fn full_space_edges(&self, frames: usize, labels: usize) -> usize {
        (self.min_segment_frames..=self.max_segment_frames)
            .map(|len| (frames + 1).saturating_sub(len))
            .sum::<usize>()
            * labels
    }
}

/// Builds the full hypothesis space: vertex `k` at time `k` for `k = 0..=T`,
/// and one edge per start, length and label. Edges are ordered by start
/// frame, then length, then label, and are left unscored.
pub fn build_full_space(
    num_frames: usize,
    num_labels: usize,
    cfg: &SegmentationConfig,
) -> Result<DecodingGraph, HypothesisError> {
    cfg.validate()?;
    if num_frames == 0 {
        return Err(HypothesisError::NoFrames);
    }
    if num_labels == 0 {
        return Err(HypothesisError::EmptyLabelSet);
    }
    let mut g = Fst::new();
    for t in 0..=num_frames {
        g.add_vertex(t as u32);
    }
    for start in 0..num_frames {
        for len in cfg.min_segment_frames..=cfg.max_segment_frames {
            let end = start + len;
            if end > num_frames {
                break;
            }
            for s in 0..num_labels {
                let sym = Sym::One(Label::from(s));
                g.add_edge(start, end, sym, sym).expect("vertices exist");
            }
        }
    }
    g.set_initial(0).expect("vertex exists");
    g.set_final(num_frames).expect("vertex exists");
    Ok(g.seal().expect("time-indexed graph is acyclic"))
}

/// Bigram label model with a single backoff weight per history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BigramLM {
    pub unigram: BTreeMap<Label, f64>,
    pub bigram: BTreeMap<(Label, Label), f64>,
    pub backoff: BTreeMap<Label, f64>,
}

impl BigramLM {
    /// Best log score of emitting `next` after `history` in the LM graph:
    /// the direct bigram arc or the backoff route, whichever scores higher.
    /// `None` history means sentence start.
    pub fn best_transition(&self, history: Option<Label>, next: Label) -> Option<f64> {
        let uni = *self.unigram.get(&next)?;
        let Some(h) = history else {
            return Some(uni);
        };
        let direct = self.bigram.get(&(h, next)).copied();
        let backed = self.backoff.get(&h).map(|b| b + uni);
        match (direct, backed) {
            (Some(d), Some(b)) => Some(d.max(b)),
            (d, b) => d.or(b),
        }
    }

    /// Best log score of a whole label sequence.
    pub fn sequence_score(&self, labels: &[Label]) -> Option<f64> {
        let mut prev = None;
        let mut total = 0.0;
        for &s in labels {
            total += self.best_transition(prev, s)?;
            prev = Some(s);
        }
        Some(total)
    }
}

/// Add-k / absolute-discount estimation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Smoothing {
    pub add_k: f64,
    pub discount: f64,
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing {
            add_k: 0.0,
            discount: 0.5,
        }
    }
}

/// Estimates a bigram LM from label sequences.
///
/// Bigrams: `p(s | h) = (max(c(h,s) - D, 0) + k) / (c(h) + k|Σ|)`, stored
/// when positive. The leftover mass of a history becomes its backoff weight,
/// floored at [`MIN_BACKOFF_MASS`] when the history does not cover every
/// label. Histories never seen back off with weight `log 1`. Unigrams are
/// add-one smoothed so every label has a finite entry.
pub fn estimate_bigram_lm(
    transcripts: &[Vec<Label>],
    num_labels: usize,
    smoothing: &Smoothing,
) -> Result<BigramLM, HypothesisError> {
    let Smoothing { add_k, discount } = *smoothing;
    if !(add_k >= 0.0 && discount >= 0.0 && add_k.is_finite() && discount.is_finite()) {
        return Err(HypothesisError::InvalidSmoothing { add_k, discount });
    }
    if num_labels == 0 {
        return Err(HypothesisError::EmptyLabelSet);
    }
    let mut uni = vec![0.0f64; num_labels];
    let mut bi = vec![vec![0.0f64; num_labels]; num_labels];
    let mut tokens = 0.0;
    for seq in transcripts {
        for (i, &s) in seq.iter().enumerate() {
            if s.index() >= num_labels {
                return Err(HypothesisError::LabelOutOfRange(s.index()));
            }
            uni[s.index()] += 1.0;
            tokens += 1.0;
            if i > 0 {
                bi[seq[i - 1].index()][s.index()] += 1.0;
            }
        }
    }
    if tokens == 0.0 {
        return Err(HypothesisError::EmptyCorpus);
    }

    let mut lm = BigramLM::default();
    let k_total = num_labels as f64;
    for (s, &c) in uni.iter().enumerate() {
        lm.unigram
            .insert(Label::from(s), ((c + 1.0) / (tokens + k_total)).ln());
    }
    for (h, row) in bi.iter().enumerate() {
        let history = Label::from(h);
        let n: f64 = row.iter().sum();
        if n == 0.0 {
            lm.backoff.insert(history, 0.0);
            continue;
        }
        let denom = n + add_k * k_total;
        let mut kept = 0.0;
        let mut covered = 0;
        for (s, &c) in row.iter().enumerate() {
            let numer = (c - discount).max(0.0) + add_k;
            if numer > 0.0 {
                let p = numer / denom;
                kept += p;
                covered += 1;
                lm.bigram.insert((history, Label::from(s)), p.ln());
            }
        }
        let mass = 1.0 - kept;
        if covered < num_labels || mass > 1e-12 {
            lm.backoff.insert(history, mass.max(MIN_BACKOFF_MASS).ln());
        }
    }
    Ok(lm)
}

/// State layout of a bigram LM graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmStates {
    pub start: usize,
    pub backoff: Option<usize>,
}

impl LmStates {
    pub fn history(&self, s: Label) -> usize {
        1 + s.index()
    }
}

/// Builds the bigram LM graph.
///
/// State 0 is the no-history start, state `1 + s` remembers history `s`, and
/// a single backoff state follows when any history backs off. Arcs, in id
/// order: start arcs (input `s`, output `ε s`, unigram weight); per history,
/// its bigram arcs (output `h s`) then its ε arc to the backoff state; then
/// backoff arcs to every history (output `ε s`, unigram weight). Every state
/// except the backoff state is final. All vertices have time 0.
pub fn build_bigram_lm_graph(
    lm: &BigramLM,
    num_labels: usize,
) -> Result<(Fst, LmStates), HypothesisError> {
    if num_labels == 0 {
        return Err(HypothesisError::EmptyLabelSet);
    }
    let mut unigram = Vec::with_capacity(num_labels);
    for s in 0..num_labels {
        unigram.push(
            *lm.unigram
                .get(&Label::from(s))
                .ok_or(HypothesisError::MissingUnigram(s))?,
        );
    }
    for &(h, s) in lm.bigram.keys() {
        for l in [h, s] {
            if l.index() >= num_labels {
                return Err(HypothesisError::LabelOutOfRange(l.index()));
            }
        }
    }

    let mut g = Fst::new();
    let start = g.add_vertex(0);
    for _ in 0..num_labels {
        g.add_vertex(0);
    }
    let backoff = (!lm.backoff.is_empty()).then(|| g.add_vertex(0));
    let states = LmStates { start, backoff };

    for (s, &w) in unigram.iter().enumerate() {
        let s = Label::from(s);
        g.add_weighted_edge(start, states.history(s), Sym::One(s), Sym::Pair(None, s), w)
            .expect("vertices exist");
    }
    for h in (0..num_labels).map(Label::from) {
        for s in (0..num_labels).map(Label::from) {
            if let Some(&w) = lm.bigram.get(&(h, s)) {
                g.add_weighted_edge(
                    states.history(h),
                    states.history(s),
                    Sym::One(s),
                    Sym::Pair(Some(h), s),
                    w,
                )
                .expect("vertices exist");
            }
        }
        if let (Some(b), Some(&w)) = (backoff, lm.backoff.get(&h)) {
            g.add_weighted_edge(states.history(h), b, Sym::Eps, Sym::Eps, w)
                .expect("vertices exist");
        }
    }
    if let Some(b) = backoff {
        for (s, &w) in unigram.iter().enumerate() {
            let s = Label::from(s);
            g.add_weighted_edge(b, states.history(s), Sym::One(s), Sym::Pair(None, s), w)
                .expect("vertices exist");
        }
    }

    g.set_initial(start).expect("vertex exists");
    for v in 0..=num_labels {
        g.set_final(v).expect("vertex exists");
    }
    Ok((g, states))
}
