//! Sparse edge features, lexicalization and linear scoring.
//!
//! A template produces a base vector from the segment span (or an edge
//! attribute) and is lexicalized to its order by placing that vector in the
//! block selected by the edge's label(s). The global index layout is
//! template-major, lexicalization-block-minor.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::Label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("label {label} is outside a label set of size {size}")]
    LabelOutOfRange { label: usize, size: usize },
    #[error("empty span [{0}, {1})")]
    EmptySpan(usize, usize),
    #[error("span [{start}, {end}) exceeds {frames} frames")]
    SpanOutOfRange { start: usize, end: usize, frames: usize },
    #[error("edge is missing the {0} attribute")]
    MissingAttribute(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} outside dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("frame scores contain a non-finite value at frame {0}")]
    NonFiniteScore(usize),
    #[error("frame score matrix has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("unknown feature template {0:?}")]
    UnknownTemplate(String),
    #[error("template {name} cannot have order {order}")]
    InvalidOrder { name: &'static str, order: u8 },
}

/// Real-valued features keyed by index, with a declared dimension.
/// Entries are sorted by index and never store an explicit zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseFeatureVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl SparseFeatureVector {
    pub fn zeros(dim: usize) -> Self {
        SparseFeatureVector {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        SparseFeatureVector {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| (i, v))
                .collect(),
        }
    }

    /// Builds from unordered entries, summing duplicates and dropping zeros.
    pub fn from_entries<I>(dim: usize, entries: I) -> Result<Self, FeatureError>
    where
        I: IntoIterator<Item = (usize, f64)>,
    {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, v) in entries {
            if i >= dim {
                return Err(FeatureError::IndexOutOfRange { index: i, dim });
            }
            *acc.entry(i).or_insert(0.0) += v;
        }
        Ok(SparseFeatureVector {
            dim,
            entries: acc.into_iter().filter(|&(_, v)| v != 0.0).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn get(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |&(i, _)| i)
            .map_or(0.0, |pos| self.entries[pos].1)
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i] = v;
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, dense: &[f64]) -> Result<f64, FeatureError> {
        if dense.len() != self.dim {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim,
                got: dense.len(),
            });
        }
        Ok(self.entries.iter().map(|&(i, v)| v * dense[i]).sum())
    }

    /// `self + scale * other`.
    pub fn add_scaled(&self, other: &Self, scale: f64) -> Result<Self, FeatureError> {
        if other.dim != self.dim {
            return Err(FeatureError::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Self::from_entries(
            self.dim,
            self.entries
                .iter()
                .copied()
                .chain(other.entries.iter().map(|&(i, v)| (i, scale * v))),
        )
    }

    /// Moves every entry up by `offset` into a space of dimension `dim`.
    pub fn shifted(&self, offset: usize, dim: usize) -> Result<Self, FeatureError> {
        if offset + self.dim > dim {
            return Err(FeatureError::DimensionMismatch {
                expected: dim,
                got: offset + self.dim,
            });
        }
        Ok(SparseFeatureVector {
            dim,
            entries: self.entries.iter().map(|&(i, v)| (i + offset, v)).collect(),
        })
    }

    /// Concatenation of `parts` in order.
    pub fn concat(parts: &[SparseFeatureVector]) -> Self {
        let mut out = SparseFeatureVector::default();
        for p in parts {
            out.entries
                .extend(p.entries.iter().map(|&(i, v)| (i + out.dim, v)));
            out.dim += p.dim;
        }
        out
    }
}

/// Mixed-radix index of a label tuple, most significant first.
pub fn lex_index(labels: &[Label], label_count: usize) -> Result<usize, FeatureError> {
    labels.iter().try_fold(0usize, |acc, &s| {
        if s.index() >= label_count {
            Err(FeatureError::LabelOutOfRange {
                label: s.index(),
                size: label_count,
            })
        } else {
            Ok(acc * label_count + s.index())
        }
    })
}

/// Tensors `phi` with one-hot indicators of `labels`: the result has
/// dimension `d·|Σ|^n` and entry `i` lands at `lex·d + i`.
pub fn lexicalize(
    phi: &SparseFeatureVector,
    labels: &[Label],
    label_count: usize,
) -> Result<SparseFeatureVector, FeatureError> {
    let block = lex_index(labels, label_count)?;
    let dim = phi.dim * label_count.pow(labels.len() as u32);
    phi.shifted(block * phi.dim, dim)
}

/// A `T × K` matrix of per-frame label scores (log-probability convention).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    frames: usize,
    labels: usize,
    data: Vec<f64>,
}

impl FrameScores {
    pub fn new(frames: usize, labels: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if data.len() != frames * labels {
            return Err(FeatureError::ShapeMismatch {
                expected: frames * labels,
                got: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFiniteScore(pos / labels.max(1)));
        }
        Ok(FrameScores {
            frames,
            labels,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.labels..(t + 1) * self.labels]
    }

    /// Largest `|log Σ_k exp(row_k)|` over rows. Log-probability rows give ~0;
    /// bottleneck-style scores need not.
    pub fn max_log_normalization_error(&self) -> f64 {
        (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Index of the highest-scoring label in each frame (lowest index on ties).
    pub fn argmax_labels(&self) -> Vec<Label> {
        (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                Label::from(best)
            })
            .collect()
    }

    fn check_span(&self, start: usize, end: usize) -> Result<usize, FeatureError> {
        if end <= start {
            return Err(FeatureError::EmptySpan(start, end));
        }
        if end > self.frames {
            return Err(FeatureError::SpanOutOfRange {
                start,
                end,
                frames: self.frames,
            });
        }
        Ok(end - start)
    }
}

/// Frame offsets of the three sub-segment midpoints of a span of length `len`.
pub fn sample_offsets(len: usize) -> [usize; 3] {
    [0, 1, 2].map(|k| (2 * k + 1) * len / 6)
}

/// Mean of the frame rows over `[start, end)`.
pub fn avg_frame_scores(
    fs: &FrameScores,
    start: usize,
    end: usize,
) -> Result<SparseFeatureVector, FeatureError> {
    let mut out = vec![0.0; fs.labels()];
    write_average(fs, start, end, &mut out)?;
    Ok(SparseFeatureVector::from_dense(&out))
}

fn write_average(fs: &FrameScores, start: usize, end: usize, out: &mut [f64]) -> Result<(), FeatureError> {
    let len = fs.check_span(start, end)?;
    out.iter_mut().for_each(|v| *v = 0.0);
    for t in start..end {
        for (o, v) in out.iter_mut().zip(fs.row(t)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= len as f64);
    Ok(())
}

/// Rows at the midpoints of three equal sub-segments, concatenated.
pub fn sample_frame_scores(
    fs: &FrameScores,
    start: usize,
    end: usize,
) -> Result<SparseFeatureVector, FeatureError> {
    let mut out = vec![0.0; 3 * fs.labels()];
    write_samples(fs, start, end, &mut out)?;
    Ok(SparseFeatureVector::from_dense(&out))
}

fn write_samples(fs: &FrameScores, start: usize, end: usize, out: &mut [f64]) -> Result<(), FeatureError> {
    let len = fs.check_span(start, end)?;
    let k = fs.labels();
    for (j, off) in sample_offsets(len).into_iter().enumerate() {
        out[j * k..(j + 1) * k].copy_from_slice(fs.row(start + off));
    }
    Ok(())
}

/// Default boundary offsets.
pub const BOUNDARY_OFFSETS: [usize; 3] = [1, 2, 3];

/// Rows `start - i` for each offset, then rows `end + i`, clamped to the
/// utterance.
pub fn boundary_scores(
    fs: &FrameScores,
    start: usize,
    end: usize,
    offsets: &[usize],
) -> SparseFeatureVector {
    let mut out = vec![0.0; 2 * offsets.len() * fs.labels()];
    write_boundary(fs, start, end, offsets, &mut out);
    SparseFeatureVector::from_dense(&out)
}

fn write_boundary(fs: &FrameScores, start: usize, end: usize, offsets: &[usize], out: &mut [f64]) {
    let k = fs.labels();
    let last = fs.frames().saturating_sub(1);
    let left = offsets.iter().map(|&i| start.saturating_sub(i).min(last));
    let right = offsets.iter().map(|&i| (end + i).min(last));
    for (j, t) in left.chain(right).enumerate() {
        out[j * k..(j + 1) * k].copy_from_slice(fs.row(t));
    }
}

/// One-hot of the segment length, lengths above `max_len` in the top bucket.
pub fn length_indicator(start: usize, end: usize, max_len: usize) -> SparseFeatureVector {
    let len = end.saturating_sub(start).min(max_len);
    SparseFeatureVector {
        dim: max_len + 1,
        entries: vec![(len, 1.0)],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Average,
    Samples,
    Boundary,
    Length,
    Bias,
    /// Bigram LM log-probability of the composed edge. Never lexicalized.
    LmScore,
    /// Previous-level score of the underlying lattice edge. Never lexicalized.
    LatticeScore,
}

impl TemplateKind {
    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::Average => "avg",
            TemplateKind::Samples => "samples",
            TemplateKind::Boundary => "boundary",
            TemplateKind::Length => "length",
            TemplateKind::Bias => "bias",
            TemplateKind::LmScore => "lm",
            TemplateKind::LatticeScore => "lattice",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "avg" => TemplateKind::Average,
            "samples" => TemplateKind::Samples,
            "boundary" => TemplateKind::Boundary,
            "length" => TemplateKind::Length,
            "bias" => TemplateKind::Bias,
            "lm" => TemplateKind::LmScore,
            "lattice" => TemplateKind::LatticeScore,
            _ => return None,
        })
    }

    /// Whether the base vector depends only on the segment span.
    pub fn is_span_based(self) -> bool {
        !matches!(self, TemplateKind::LmScore | TemplateKind::LatticeScore)
    }

    pub fn base_dim(self, label_count: usize, max_len: usize) -> usize {
        match self {
            TemplateKind::Average => label_count,
            TemplateKind::Samples => 3 * label_count,
            TemplateKind::Boundary => 2 * BOUNDARY_OFFSETS.len() * label_count,
            TemplateKind::Length => max_len + 1,
            TemplateKind::Bias | TemplateKind::LmScore | TemplateKind::LatticeScore => 1,
        }
    }
}

/// A base extractor plus its lexicalization order. Written `name:order`
/// (`lm` and `lattice` take no order).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureTemplate {
    pub kind: TemplateKind,
    pub order: u8,
}

impl FeatureTemplate {
    pub fn new(kind: TemplateKind, order: u8) -> Result<Self, FeatureError> {
        let ok = if kind.is_span_based() { order <= 2 } else { order == 0 };
        if !ok {
            return Err(FeatureError::InvalidOrder {
                name: kind.name(),
                order,
            });
        }
        Ok(FeatureTemplate { kind, order })
    }

    /// The first-level template set: averages, samples, boundaries, length
    /// and bias lexicalized to first order, plus a zeroth-order bias.
    pub fn first_level() -> Vec<FeatureTemplate> {
        use TemplateKind::*;
        vec![
            FeatureTemplate { kind: Average, order: 1 },
            FeatureTemplate { kind: Samples, order: 1 },
            FeatureTemplate { kind: Boundary, order: 1 },
            FeatureTemplate { kind: Length, order: 1 },
            FeatureTemplate { kind: Bias, order: 1 },
            FeatureTemplate { kind: Bias, order: 0 },
        ]
    }

    /// The second-level template set: lattice score, LM score, second-order
    /// boundaries, first-order length indicators and first-order bias.
    pub fn second_level() -> Vec<FeatureTemplate> {
        use TemplateKind::*;
        vec![
            FeatureTemplate { kind: LatticeScore, order: 0 },
            FeatureTemplate { kind: LmScore, order: 0 },
            FeatureTemplate { kind: Boundary, order: 2 },
            FeatureTemplate { kind: Length, order: 1 },
            FeatureTemplate { kind: Bias, order: 1 },
        ]
    }

    pub fn parse_list(s: &str) -> Result<Vec<FeatureTemplate>, FeatureError> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for FeatureTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind.is_span_based() {
            write!(f, "{}:{}", self.kind.name(), self.order)
        } else {
            f.write_str(self.kind.name())
        }
    }
}

impl FromStr for FeatureTemplate {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, order) = match s.split_once(':') {
            Some((n, o)) => (
                n,
                o.parse::<u8>()
                    .map_err(|_| FeatureError::UnknownTemplate(s.to_string()))?,
            ),
            None => (s, 0),
        };
        let kind =
            TemplateKind::from_name(name).ok_or_else(|| FeatureError::UnknownTemplate(s.to_string()))?;
        if kind.is_span_based() && !s.contains(':') {
            return Err(FeatureError::UnknownTemplate(s.to_string()));
        }
        FeatureTemplate::new(kind, order)
    }
}

/// Everything a template may read about one edge.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EdgeContext {
    /// Frame span `[start, end)`; `None` for ε moves, which cover no frames.
    pub span: Option<(u32, u32)>,
    /// Label of the segment.
    pub current: Option<Label>,
    /// History label of a label-model pair output.
    pub history: Option<Label>,
    pub lm_score: Option<f64>,
    pub lattice_score: Option<f64>,
}

impl EdgeContext {
    /// Labels selecting the lexicalization block, or `None` if the template
    /// does not fire on this edge.
    fn lex_labels(&self, order: u8) -> Option<Vec<Label>> {
        match order {
            0 => Some(Vec::new()),
            1 => Some(vec![self.current?]),
            _ => Some(vec![self.history?, self.current?]),
        }
    }
}

/// Template list with fixed index offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayout {
    templates: Vec<FeatureTemplate>,
    base_dims: Vec<usize>,
    offsets: Vec<usize>,
    label_count: usize,
    max_len: usize,
    dim: usize,
}

impl FeatureLayout {
    pub fn new(templates: Vec<FeatureTemplate>, label_count: usize, max_len: usize) -> Self {
        let mut offsets = Vec::with_capacity(templates.len());
        let mut base_dims = Vec::with_capacity(templates.len());
        let mut dim = 0;
        for t in &templates {
            let base = t.kind.base_dim(label_count, max_len);
            offsets.push(dim);
            base_dims.push(base);
            dim += base * label_count.pow(t.order as u32);
        }
        FeatureLayout {
            templates,
            base_dims,
            offsets,
            label_count,
            max_len,
            dim,
        }
    }

    pub fn templates(&self) -> &[FeatureTemplate] {
        &self.templates
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn base_dims(&self) -> &[usize] {
        &self.base_dims
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn uses(&self, kind: TemplateKind) -> bool {
        self.templates.iter().any(|t| t.kind == kind)
    }

    /// Whether any template reads the history label of a composed edge.
    pub fn needs_label_model(&self) -> bool {
        self.templates
            .iter()
            .any(|t| t.kind == TemplateKind::LmScore || t.order == 2)
    }

    fn span_template_dims(&self) -> usize {
        self.templates
            .iter()
            .zip(&self.base_dims)
            .filter(|(t, _)| t.kind.is_span_based())
            .map(|(_, &d)| d)
            .sum()
    }

    /// Concatenated base vectors of the span-based templates, in template order.
    fn write_span_bases(&self, fs: &FrameScores, start: usize, end: usize, out: &mut Vec<f64>) -> Result<(), FeatureError> {
        for (t, &d) in self.templates.iter().zip(&self.base_dims) {
            let at = out.len();
            out.resize(at + d, 0.0);
            let slot = &mut out[at..];
            match t.kind {
                TemplateKind::Average => write_average(fs, start, end, slot)?,
                TemplateKind::Samples => write_samples(fs, start, end, slot)?,
                TemplateKind::Boundary => write_boundary(fs, start, end, &BOUNDARY_OFFSETS, slot),
                TemplateKind::Length => slot[(end - start).min(self.max_len)] = 1.0,
                TemplateKind::Bias => slot[0] = 1.0,
                TemplateKind::LmScore | TemplateKind::LatticeScore => out.truncate(at),
            }
        }
        Ok(())
    }
}

/// Materializes the full feature vector of one edge.
pub fn extract(
    layout: &FeatureLayout,
    fs: &FrameScores,
    ctx: &EdgeContext,
) -> Result<SparseFeatureVector, FeatureError> {
    let mut parts = Vec::with_capacity(layout.templates.len());
    for (t, &base_dim) in layout.templates.iter().zip(&layout.base_dims) {
        let width = base_dim * layout.label_count.pow(t.order as u32);
        let base = match (t.kind, ctx.span) {
            (TemplateKind::LmScore, _) => Some(SparseFeatureVector::from_dense(&[ctx
                .lm_score
                .ok_or(FeatureError::MissingAttribute("lm score"))?])),
            (TemplateKind::LatticeScore, None) => None,
            (TemplateKind::LatticeScore, Some(_)) => Some(SparseFeatureVector::from_dense(&[ctx
                .lattice_score
                .ok_or(FeatureError::MissingAttribute("lattice score"))?])),
            (_, None) => None,
            (kind, Some((a, b))) => {
                let (a, b) = (a as usize, b as usize);
                Some(match kind {
                    TemplateKind::Average => avg_frame_scores(fs, a, b)?,
                    TemplateKind::Samples => sample_frame_scores(fs, a, b)?,
                    TemplateKind::Boundary => boundary_scores(fs, a, b, &BOUNDARY_OFFSETS),
                    TemplateKind::Length => length_indicator(a, b, layout.max_len),
                    _ => SparseFeatureVector::from_dense(&[1.0]),
                })
            }
        };
        let part = match (base, ctx.lex_labels(t.order)) {
            (Some(base), Some(labels)) => lexicalize(&base, &labels, layout.label_count)?,
            _ => SparseFeatureVector::zeros(width),
        };
        parts.push(part);
    }
    Ok(SparseFeatureVector::concat(&parts))
}

/// `θ·φ`.
pub fn score_edge(model: &Model, phi: &SparseFeatureVector) -> Result<f64, FeatureError> {
    phi.dot(&model.theta)
}

/// Parameters for one cascade level.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layout: FeatureLayout,
    pub theta: Vec<f64>,
}

impl Model {
    pub fn zeros(layout: FeatureLayout) -> Self {
        let theta = vec![0.0; layout.dim()];
        Model { layout, theta }
    }
}

/// Cached per-span base vectors plus per-edge contexts for one graph.
///
/// Base vectors depend only on the span, so they are computed once per
/// distinct span and shared by every label and every edge over that span.
#[derive(Clone, Debug)]
pub struct EdgeFeatures {
    layout: FeatureLayout,
    bases: Vec<f64>,
    slots: HashMap<(u32, u32), usize>,
    contexts: Vec<EdgeContext>,
    edge_slots: Vec<Option<usize>>,
}

impl EdgeFeatures {
    pub fn new(
        layout: &FeatureLayout,
        fs: &FrameScores,
        contexts: Vec<EdgeContext>,
    ) -> Result<Self, FeatureError> {
        let mut table = EdgeFeatures {
            layout: layout.clone(),
            bases: Vec::new(),
            slots: HashMap::new(),
            contexts: Vec::new(),
            edge_slots: Vec::with_capacity(contexts.len()),
        };
        for ctx in &contexts {
            table.check_attributes(ctx)?;
            let slot = match ctx.span {
                Some(span) => Some(table.slot(fs, span)?),
                None => None,
            };
            table.edge_slots.push(slot);
        }
        table.contexts = contexts;
        Ok(table)
    }

    fn check_attributes(&self, ctx: &EdgeContext) -> Result<(), FeatureError> {
        if self.layout.uses(TemplateKind::LmScore) && ctx.lm_score.is_none() {
            return Err(FeatureError::MissingAttribute("lm score"));
        }
        if self.layout.uses(TemplateKind::LatticeScore) && ctx.span.is_some() && ctx.lattice_score.is_none() {
            return Err(FeatureError::MissingAttribute("lattice score"));
        }
        for label in [ctx.current, ctx.history].into_iter().flatten() {
            if label.index() >= self.layout.label_count {
                return Err(FeatureError::LabelOutOfRange {
                    label: label.index(),
                    size: self.layout.label_count,
                });
            }
        }
        Ok(())
    }

    fn slot(&mut self, fs: &FrameScores, span: (u32, u32)) -> Result<usize, FeatureError> {
        if let Some(&s) = self.slots.get(&span) {
            return Ok(s);
        }
        let at = self.bases.len();
        self.layout
            .write_span_bases(fs, span.0 as usize, span.1 as usize, &mut self.bases)?;
        debug_assert_eq!(self.bases.len() - at, self.layout.span_template_dims());
        self.slots.insert(span, at);
        Ok(at)
    }

    pub fn layout(&self) -> &FeatureLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    pub fn context(&self, e: usize) -> &EdgeContext {
        &self.contexts[e]
    }

    pub fn contexts(&self) -> &[EdgeContext] {
        &self.contexts
    }

    /// Visits each active template block of edge `e` as
    /// `(global offset, base values)`.
    fn for_each_block(&self, e: usize, mut f: impl FnMut(usize, &[f64])) {
        let ctx = &self.contexts[e];
        let mut span_at = self.edge_slots[e];
        for ((t, &off), &d) in self
            .layout
            .templates
            .iter()
            .zip(&self.layout.offsets)
            .zip(&self.layout.base_dims)
        {
            let scalar;
            let base: &[f64] = match t.kind {
                TemplateKind::LmScore => {
                    scalar = [ctx.lm_score.unwrap_or(0.0)];
                    &scalar
                }
                TemplateKind::LatticeScore => {
                    if ctx.span.is_none() {
                        continue;
                    }
                    scalar = [ctx.lattice_score.unwrap_or(0.0)];
                    &scalar
                }
                _ => match span_at {
                    Some(at) => {
                        span_at = Some(at + d);
                        &self.bases[at..at + d]
                    }
                    None => continue,
                },
            };
            let Some(labels) = ctx.lex_labels(t.order) else {
                continue;
            };
            let block = lex_index(&labels, self.layout.label_count).expect("labels checked at construction");
            f(off + block * d, base);
        }
    }

    /// `θ·φ(e)` without materializing `φ(e)`.
    pub fn score(&self, theta: &[f64], e: usize) -> f64 {
        let mut total = 0.0;
        self.for_each_block(e, |at, base| {
            total += base
                .iter()
                .zip(&theta[at..at + base.len()])
                .map(|(x, w)| x * w)
                .sum::<f64>();
        });
        total
    }

    pub fn scores(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.layout.dim());
        (0..self.len()).map(|e| self.score(theta, e)).collect()
    }

    /// Adds `scale · φ(e)` into a dense accumulator.
    pub fn accumulate(&self, e: usize, scale: f64, acc: &mut BTreeMap<usize, f64>) {
        self.for_each_block(e, |at, base| {
            for (i, &x) in base.iter().enumerate() {
                if x != 0.0 {
                    *acc.entry(at + i).or_insert(0.0) += scale * x;
                }
            }
        });
    }

    /// Materialized `φ(e)`.
    pub fn vector(&self, e: usize) -> SparseFeatureVector {
        let mut acc = BTreeMap::new();
        self.accumulate(e, 1.0, &mut acc);
        SparseFeatureVector::from_entries(self.layout.dim(), acc).expect("indices within layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fs<R: AsRef<[f64]>>(rows: &[R]) -> FrameScores {
        let k = rows[0].as_ref().len();
        FrameScores::new(rows.len(), k, rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect()).unwrap()
    }

    #[test]
    fn lexicalize_examples() {
        let phi = SparseFeatureVector::from_dense(&[0.5, -1.0]);
        let lex = lexicalize(&phi, &[Label(1)], 3).unwrap();
        assert_eq!(lex.dim(), 6);
        assert_eq!(lex.entries(), &[(2, 0.5), (3, -1.0)]);

        assert_eq!(lexicalize(&phi, &[], 3).unwrap(), phi);

        let one = SparseFeatureVector::from_dense(&[1.0]);
        let pair = lexicalize(&one, &[Label(2), Label(0)], 3).unwrap();
        assert_eq!(pair.dim(), 9);
        assert_eq!(pair.entries(), &[(6, 1.0)]);

        assert_eq!(
            lexicalize(&phi, &[Label(3)], 3).unwrap_err(),
            FeatureError::LabelOutOfRange { label: 3, size: 3 }
        );
    }

    #[test]
    fn average_examples() {
        let m = fs(&[[0.0, 1.0], [2.0, 3.0]]);
        assert_eq!(avg_frame_scores(&m, 0, 1).unwrap().to_dense(), vec![0.0, 1.0]);
        assert_eq!(avg_frame_scores(&m, 0, 2).unwrap().to_dense(), vec![1.0, 2.0]);
        let c = fs(&[[-1.0, -2.0]; 4]);
        assert_eq!(avg_frame_scores(&c, 1, 4).unwrap().to_dense(), vec![-1.0, -2.0]);
        assert_eq!(avg_frame_scores(&m, 1, 1).unwrap_err(), FeatureError::EmptySpan(1, 1));
    }

    #[test]
    fn sample_offsets_examples() {
        assert_eq!(sample_offsets(6), [1, 3, 5]);
        assert_eq!(sample_offsets(1), [0, 0, 0]);
        assert_eq!(sample_offsets(3), [0, 1, 2]);

        let rows: Vec<Vec<f64>> = (0..6).map(|t| vec![t as f64 + 1.0]).collect();
        let m = fs(&rows);
        assert_eq!(sample_frame_scores(&m, 0, 6).unwrap().to_dense(), vec![2.0, 4.0, 6.0]);
        assert!(sample_frame_scores(&m, 2, 2).is_err());
    }

    #[test]
    fn boundary_examples() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| vec![t as f64 + 1.0]).collect();
        let m = fs(&rows);
        // Row t holds t + 1.
        assert_eq!(boundary_scores(&m, 4, 6, &BOUNDARY_OFFSETS).to_dense(), vec![4.0, 3.0, 2.0, 8.0, 9.0, 10.0]);
        assert_eq!(boundary_scores(&m, 0, 2, &BOUNDARY_OFFSETS).to_dense()[..3], [1.0, 1.0, 1.0]);
        assert_eq!(boundary_scores(&m, 8, 10, &BOUNDARY_OFFSETS).to_dense()[3..], [10.0, 10.0, 10.0]);
    }

    #[test]
    fn length_examples() {
        assert_eq!(length_indicator(0, 5, 30).entries(), &[(5, 1.0)]);
        assert_eq!(length_indicator(0, 30, 30).entries(), &[(30, 1.0)]);
        let clamped = length_indicator(0, 40, 30);
        assert_eq!((clamped.dim(), clamped.entries()), (31, &[(30, 1.0)][..]));
    }

    #[test]
    fn template_parsing() {
        let ts = FeatureTemplate::parse_list("avg:1, boundary:2,lm,lattice,bias:0").unwrap();
        assert_eq!(ts.len(), 5);
        assert_eq!(ts[1], FeatureTemplate { kind: TemplateKind::Boundary, order: 2 });
        assert_eq!(ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(","), "avg:1,boundary:2,lm,lattice,bias:0");
        assert!("lm:1".parse::<FeatureTemplate>().is_err());
        assert!("avg".parse::<FeatureTemplate>().is_err());
        assert!("avg:3".parse::<FeatureTemplate>().is_err());
        assert!("cnn:1".parse::<FeatureTemplate>().is_err());
    }

    #[test]
    fn layout_dimensions() {
        let layout = FeatureLayout::new(FeatureTemplate::first_level(), 3, 30);
        assert_eq!(layout.dim(), 3 * (3 + 9 + 18 + 31 + 1) + 1);
        let bias0 = FeatureLayout::new(vec![FeatureTemplate::new(TemplateKind::Bias, 0).unwrap()], 3, 30);
        assert_eq!(bias0.dim(), 1);
        let bias1 = FeatureLayout::new(vec![FeatureTemplate::new(TemplateKind::Bias, 1).unwrap()], 3, 30);
        assert_eq!(bias1.dim(), 3);
        // Offsets are a prefix-sum partition.
        let mut expect = 0;
        for (i, t) in layout.templates().iter().enumerate() {
            assert_eq!(layout.offsets()[i], expect);
            expect += layout.base_dims()[i] * 3usize.pow(t.order as u32);
        }
        assert_eq!(expect, layout.dim());
    }

    #[test]
    fn extract_bias_and_attributes() {
        let m = fs(&[[0.0, -1.0, -2.0]; 4]);
        let bias0 = FeatureLayout::new(vec![FeatureTemplate::new(TemplateKind::Bias, 0).unwrap()], 3, 30);
        let ctx = EdgeContext {
            span: Some((0, 2)),
            current: Some(Label(1)),
            ..Default::default()
        };
        assert_eq!(extract(&bias0, &m, &ctx).unwrap().entries(), &[(0, 1.0)]);

        let lm = FeatureLayout::new(vec![FeatureTemplate::new(TemplateKind::LmScore, 0).unwrap()], 3, 30);
        let with_lm = EdgeContext { lm_score: Some(-1.2), ..ctx };
        assert_eq!(extract(&lm, &m, &with_lm).unwrap().entries(), &[(0, -1.2)]);
        assert_eq!(extract(&lm, &m, &ctx).unwrap_err(), FeatureError::MissingAttribute("lm score"));

        let lat = FeatureLayout::new(vec![FeatureTemplate::new(TemplateKind::LatticeScore, 0).unwrap()], 3, 30);
        assert_eq!(extract(&lat, &m, &ctx).unwrap_err(), FeatureError::MissingAttribute("lattice score"));
    }

    #[test]
    fn second_order_only_with_history() {
        let m = fs(&[[0.0, -1.0]; 6]);
        let layout = FeatureLayout::new(vec![FeatureTemplate::new(TemplateKind::Bias, 2).unwrap()], 2, 5);
        let mut ctx = EdgeContext {
            span: Some((1, 3)),
            current: Some(Label(1)),
            history: None,
            ..Default::default()
        };
        assert!(extract(&layout, &m, &ctx).unwrap().is_zero());
        ctx.history = Some(Label(1));
        assert_eq!(extract(&layout, &m, &ctx).unwrap().entries(), &[(3, 1.0)]);
    }

    #[test]
    fn score_edge_examples() {
        let layout = FeatureLayout::new(FeatureTemplate::first_level(), 2, 4);
        let mut model = Model::zeros(layout.clone());
        let phi = SparseFeatureVector::from_entries(layout.dim(), [(3, 2.0), (7, -1.0)]).unwrap();
        assert_eq!(score_edge(&model, &phi).unwrap(), 0.0);
        model.theta[7] = 0.25;
        let onehot = SparseFeatureVector::from_entries(layout.dim(), [(7, 1.0)]).unwrap();
        assert_eq!(score_edge(&model, &onehot).unwrap(), 0.25);
        let short = SparseFeatureVector::zeros(3);
        assert!(matches!(score_edge(&model, &short), Err(FeatureError::DimensionMismatch { .. })));
    }

    #[test]
    fn cached_scoring_matches_extract() {
        let rows: Vec<Vec<f64>> = (0..7).map(|t| vec![-(t as f64) * 0.1, -1.0 + t as f64 * 0.05, -2.0]).collect();
        let m = fs(&rows);
        let mut templates = FeatureTemplate::first_level();
        templates.extend(FeatureTemplate::second_level());
        let layout = FeatureLayout::new(templates, 3, 4);
        let theta: Vec<f64> = (0..layout.dim()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let contexts = vec![
            EdgeContext {
                span: Some((0, 3)),
                current: Some(Label(2)),
                history: Some(Label(1)),
                lm_score: Some(-0.3),
                lattice_score: Some(1.5),
            },
            EdgeContext {
                span: Some((3, 7)),
                current: Some(Label(0)),
                history: None,
                lm_score: Some(-1.1),
                lattice_score: Some(-0.5),
            },
            EdgeContext {
                span: None,
                lm_score: Some(-2.0),
                ..Default::default()
            },
        ];
        let table = EdgeFeatures::new(&layout, &m, contexts.clone()).unwrap();
        for (e, ctx) in contexts.iter().enumerate() {
            let phi = extract(&layout, &m, ctx).unwrap();
            assert_eq!(table.vector(e), phi);
            let model = Model { layout: layout.clone(), theta: theta.clone() };
            assert!((table.score(&theta, e) - score_edge(&model, &phi).unwrap()).abs() < 1e-12);
        }
        // The ε move only carries its LM score.
        assert_eq!(table.vector(2).nnz(), 1);
    }
}
