//! Batch workflow behind the command-line tool: run configuration, per-step
//! artifact layout and the step implementations.
//!
//! Layout under `output_dir`:
//! `level<N>/train/` (model, log), `level<N>/lattices/` (pruned lattices,
//! prune reports), `level<N>/decode-<split>-<mode>/` (hypotheses, report)
//! and `level<N>/hitrate-<split>-beam<W>/`. Each step writes a manifest and
//! stages its directory, so a failed step leaves nothing behind.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use crate::beam::{beam_decode, beam_search, BeamConfig, BeamError, ScoredComposition};
use crate::cascade::{first_level_graphs, CascadeError, LevelGraph};
use crate::compose::{sigma_compose, ComposeError, ComposedEdge, LazyComposition, LeftMove, PairState};
use crate::corpus::{Split, Utterance};
use crate::eval::{edit_counts, CollapseMap, EditCounts, EvalError, ScoreReport};
use crate::features::{extract, EdgeContext, FeatureError, FeatureLayout, FeatureTemplate, Model};
use crate::graph::{Fst, GraphError, Label};
use crate::hypothesis::{
    build_bigram_lm_graph, estimate_bigram_lm, BigramLM, HypothesisError, LabelSet, SegmentationConfig, Smoothing,
};
use crate::io::{self, IoError};
use crate::learn::{path_labels, train_level, CostKind, Instance, LearnError, TrainConfig};
use crate::prune::{lattice_metrics, PruneReport};
use crate::synth::{generate, SynthConfig, SynthError};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, WorkflowError>;

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkflowError + '_ {
    move |source| WorkflowError::Fs {
        path: path.to_path_buf(),
        source,
    }
}

// Run configuration

const PLAIN_KEYS: &[&str] = &[
    "seed",
    "corpus_dir",
    "output_dir",
    "collapse",
    "min_segment",
    "max_segment",
    "cost",
    "step_sizes",
    "lm_add_k",
    "lm_discount",
    "beam",
    "synth.utterances",
    "synth.train",
    "synth.dev",
    "synth.min_frames",
    "synth.max_frames",
    "synth.labels",
    "synth.mean_segment",
    "synth.max_segment",
    "synth.sharpness",
    "synth.transition_strength",
];

const LEVEL_KEYS: &[&str] = &["templates", "lambda", "lm", "epochs"];

/// `key = value` run configuration. `#` starts a comment; unknown keys
/// are errors. Per-level keys carry a level suffix, e.g. `templates.2`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    path: PathBuf,
    base: PathBuf,
    values: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    if PLAIN_KEYS.contains(&key) {
        return true;
    }
    match key.rsplit_once('.') {
        Some((name, level)) => LEVEL_KEYS.contains(&name) && level.parse::<usize>().is_ok_and(|l| l >= 1),
        None => false,
    }
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, m: &str| WorkflowError::Config {
            path: path.to_path_buf(),
            message: format!("line {line}: {m}"),
        };
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err(i + 1, "expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if !is_known(k) {
                return Err(err(i + 1, &format!("unknown key {k:?}")));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(err(i + 1, &format!("duplicate key {k:?}")));
            }
        }
        let cfg = RunConfig {
            path: path.to_path_buf(),
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Referenced input files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(fs_err(path))?;
        Self::parse(path, &text)
    }

    fn validate(&self) -> Result<()> {
        self.segmentation()?;
        self.cost()?;
        self.step_sizes()?;
        self.smoothing()?;
        self.synth_config()?;
        let mentioned: std::collections::BTreeSet<usize> = self
            .values
            .keys()
            .filter_map(|k| k.rsplit_once('.').and_then(|(n, l)| LEVEL_KEYS.contains(&n).then(|| l.parse().ok()).flatten()))
            .collect();
        for level in mentioned {
            if self.get(&format!("templates.{level}")).is_some() || level <= 2 {
                self.templates(level)?;
            }
            self.lambda(level)?;
            self.epochs(level)?;
        }
        let mut inputs: Vec<PathBuf> = self.get("collapse").map(|p| self.resolve(p)).into_iter().collect();
        for (k, v) in &self.values {
            if k.starts_with("lm.") && v != "estimate" {
                inputs.push(self.resolve(v));
            }
        }
        for p in inputs {
            if !p.exists() {
                return Err(self.error(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn error(&self, message: String) -> WorkflowError {
        WorkflowError::Config {
            path: self.path.clone(),
            message,
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| self.error(format!("invalid value {v:?} for {key}"))),
        }
    }

    /// Paths are relative to the config file's directory.
    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(|p| self.resolve(p))
            .ok_or_else(|| self.error(format!("missing required key {key}")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parsed("seed", 1)
    }

    pub fn corpus_dir(&self) -> Result<PathBuf> {
        self.required_path("corpus_dir")
    }

    pub fn output_dir(&self) -> Result<PathBuf> {
        self.required_path("output_dir")
    }

    pub fn segmentation(&self) -> Result<SegmentationConfig> {
        let min = self.parsed("min_segment", 1)?;
        let max = self.parsed("max_segment", 30)?;
        SegmentationConfig::new(min, max).map_err(|e| self.error(e.to_string()))
    }

    pub fn cost(&self) -> Result<CostKind> {
        self.parsed("cost", CostKind::Overlap)
    }

    pub fn step_sizes(&self) -> Result<Vec<f64>> {
        let Some(v) = self.get("step_sizes") else {
            return Ok(TrainConfig::default().step_sizes);
        };
        let steps: Vec<f64> = v
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.error(format!("invalid step sizes {v:?}")))?;
        if steps.is_empty() || steps.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(self.error("step sizes must be positive".into()));
        }
        Ok(steps)
    }

    pub fn smoothing(&self) -> Result<Smoothing> {
        let d = Smoothing::default();
        Ok(Smoothing {
            add_k: self.parsed("lm_add_k", d.add_k)?,
            discount: self.parsed("lm_discount", d.discount)?,
        })
    }

    pub fn beam(&self) -> Result<Option<usize>> {
        self.get("beam")
            .map(|v| v.parse().map_err(|_| self.error(format!("invalid beam width {v:?}"))))
            .transpose()
    }

    /// Levels with a template set, in ascending order.
    pub fn levels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .values
            .keys()
            .filter_map(|k| k.strip_prefix("templates.").and_then(|l| l.parse().ok()))
            .collect();
        out.sort_unstable();
        out
    }

    /// Template list of a level; `first` and `second` name the standard sets.
    pub fn templates(&self, level: usize) -> Result<Vec<FeatureTemplate>> {
        match self.get(&format!("templates.{level}")) {
            None if level == 1 => Ok(FeatureTemplate::first_level()),
            None if level == 2 => Ok(FeatureTemplate::second_level()),
            None => Err(self.error(format!("no templates for level {level}"))),
            Some("first") => Ok(FeatureTemplate::first_level()),
            Some("second") => Ok(FeatureTemplate::second_level()),
            Some(v) => FeatureTemplate::parse_list(v).map_err(|e| self.error(e.to_string())),
        }
    }

    pub fn lambda(&self, level: usize) -> Result<f64> {
        let l: f64 = self.parsed(&format!("lambda.{level}"), 0.7)?;
        if !(0.0..=1.0).contains(&l) {
            return Err(self.error(format!("lambda.{level} must lie in [0, 1]")));
        }
        Ok(l)
    }

    pub fn epochs(&self, level: usize) -> Result<usize> {
        self.parsed(&format!("epochs.{level}"), if level == 1 { 70 } else { 20 })
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let d = SynthConfig::default();
        Ok(SynthConfig {
            seed: self.seed()?,
            utterances: self.parsed("synth.utterances", d.utterances)?,
            train: self.parsed("synth.train", d.train)?,
            dev: self.parsed("synth.dev", d.dev)?,
            min_frames: self.parsed("synth.min_frames", d.min_frames)?,
            max_frames: self.parsed("synth.max_frames", d.max_frames)?,
            labels: self.parsed("synth.labels", d.labels)?,
            mean_segment: self.parsed("synth.mean_segment", d.mean_segment)?,
            max_segment: self.parsed("synth.max_segment", d.max_segment)?,
            sharpness: self.parsed("synth.sharpness", d.sharpness)?,
            transition_strength: self.parsed("synth.transition_strength", d.transition_strength)?,
        })
    }

    fn collapse(&self, labels: &LabelSet) -> Result<(CollapseMap, Option<Vec<usize>>)> {
        match self.get("collapse") {
            None => Ok((CollapseMap::identity(labels.names().iter().cloned()), None)),
            Some(p) => {
                let map = io::read_collapse_map(&self.resolve(p))?;
                let classes = map.class_indices(labels)?;
                Ok((map, Some(classes)))
            }
        }
    }

    fn level_dir(&self, level: usize) -> Result<PathBuf> {
        Ok(self.output_dir()?.join(format!("level{level}")))
    }

    pub fn model_path(&self, level: usize) -> Result<PathBuf> {
        Ok(self.level_dir(level)?.join("train").join("model.txt"))
    }

    pub fn lattice_dir(&self, level: usize) -> Result<PathBuf> {
        Ok(self.level_dir(level)?.join("lattices"))
    }
}

// Staged output directories

/// Writes go to `<dir>.partial`; `commit` swaps it into place. Dropping an
/// uncommitted stage removes it.
struct Stage {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl Stage {
    fn new(dest: &Path) -> Result<Self> {
        let mut name = dest.file_name().unwrap_or_default().to_os_string();
        name.push(".partial");
        let tmp = dest.with_file_name(name);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(fs_err(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(fs_err(&tmp))?;
        Ok(Stage {
            tmp,
            dest: dest.to_path_buf(),
            committed: false,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        Ok(io::write_text(&self.path(name), text)?)
    }

    fn commit(mut self) -> Result<PathBuf> {
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(fs_err(&self.dest))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(fs_err(&self.dest))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn manifest(command: &str, cfg: Option<&RunConfig>, args: serde_json::Value, inputs: &[PathBuf]) -> Result<String> {
    let m = json!({
        "command": command,
        "version": VERSION,
        "seed": cfg.map(RunConfig::seed).transpose()?,
        "config": cfg.map(|c| c.values().clone()),
        "args": args,
        "inputs": inputs
            .iter()
            .map(|p| {
                // Relative to the config directory, so manifests do not depend
                // on where the run lives.
                let rel = cfg.and_then(|c| p.strip_prefix(&c.base).ok()).unwrap_or(p);
                rel.display().to_string()
            })
            .collect::<Vec<_>>(),
    });
    Ok(serde_json::to_string_pretty(&m).expect("serializable") + "\n")
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable") + "\n"
}

// Steps

/// Utterances of a split; `None` selects every split.
fn select(utts: &[Utterance], split: Option<Split>) -> Vec<&Utterance> {
    utts.iter().filter(|u| split.is_none_or(|s| u.split == s)).collect()
}

fn load_corpus(cfg: &RunConfig) -> Result<(LabelSet, Vec<Utterance>)> {
    Ok(io::read_corpus(&cfg.corpus_dir()?)?)
}

pub fn synth(cfg: &RunConfig) -> Result<PathBuf> {
    let sc = cfg.synth_config()?;
    let corpus = generate(&sc)?;
    let dir = cfg.corpus_dir()?;
    let stage = Stage::new(&dir)?;
    io::write_corpus(&stage.tmp, &corpus.labels, &corpus.utterances)?;
    stage.write("manifest.json", &manifest("synth", Some(cfg), json!({}), &[])?)?;
    stage.commit()
}

/// The label model of a level: a file, or `estimate` from the training
/// transcripts.
fn level_lm(cfg: &RunConfig, level: usize, labels: &LabelSet, utts: &[Utterance]) -> Result<Option<(BigramLM, Fst)>> {
    let lm = match cfg.get(&format!("lm.{level}")) {
        None => return Ok(None),
        Some("estimate") => {
            let transcripts: Vec<Vec<Label>> = utts
                .iter()
                .filter(|u| u.split == Split::Train)
                .map(|u| u.gold.labels())
                .collect();
            estimate_bigram_lm(&transcripts, labels.len(), &cfg.smoothing()?)?
        }
        Some(p) => io::read_lm(&cfg.resolve(p), labels)?,
    };
    let (g, _) = build_bigram_lm_graph(&lm, labels.len())?;
    Ok(Some((lm, g)))
}

/// Graphs of a level: the full space at level one, otherwise the previous
/// level's lattices composed with this level's label model. An explicit
/// lattice directory overrides both.
fn level_graphs(
    cfg: &RunConfig,
    level: usize,
    labels: &LabelSet,
    all: &[Utterance],
    utts: &[&Utterance],
    lattice_dir: Option<&Path>,
) -> Result<(Vec<LevelGraph>, Vec<PathBuf>)> {
    let read = |dir: &Path| -> Result<Vec<LevelGraph>> {
        utts.par_iter()
            .map(|u| {
                let g = io::read_lattice(&dir.join(format!("{}.lat", u.id)), labels)?;
                Ok(LevelGraph::from_graph(g))
            })
            .collect()
    };
    if let Some(dir) = lattice_dir {
        return Ok((read(dir)?, vec![dir.to_path_buf()]));
    }
    if level == 1 {
        return Ok((first_level_graphs(utts, labels.len(), &cfg.segmentation()?)?, Vec::new()));
    }
    let dir = cfg.lattice_dir(level - 1)?;
    if !dir.exists() {
        return Err(WorkflowError::Usage(format!(
            "level {level} needs the pruned level {} lattices in {}",
            level - 1,
            dir.display()
        )));
    }
    let graphs = read(&dir)?;
    let graphs = match level_lm(cfg, level, labels, all)? {
        Some((_, lm)) => graphs
            .par_iter()
            .map(|g| g.compose(&lm))
            .collect::<std::result::Result<_, _>>()?,
        None => graphs,
    };
    Ok((graphs, vec![dir]))
}

fn instances(
    utts: &[&Utterance],
    graphs: Vec<LevelGraph>,
    layout: &FeatureLayout,
    cost: CostKind,
) -> Result<Vec<Instance>> {
    utts.par_iter()
        .zip(graphs)
        .map(|(u, g)| Ok(Instance::new(&u.id, g.graph, g.contexts, layout, &u.scores, &u.gold, cost)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub level: usize,
    pub best_step_size: Option<f64>,
    pub best_epoch: usize,
    pub initial_dev_per: f64,
    pub dev_per: f64,
    pub skipped: usize,
}

pub fn train(cfg: &RunConfig, level: usize) -> Result<TrainSummary> {
    let (labels, all) = load_corpus(cfg)?;
    let utts: Vec<&Utterance> = all.iter().filter(|u| u.split != Split::Test).collect();
    let (graphs, mut inputs) = level_graphs(cfg, level, &labels, &all, &utts, None)?;
    inputs.insert(0, cfg.corpus_dir()?);
    let seg = cfg.segmentation()?;
    let layout = FeatureLayout::new(cfg.templates(level)?, labels.len(), seg.max_segment_frames);
    let insts = instances(&utts, graphs, &layout, cfg.cost()?)?;
    let (mut tr, mut dev) = (Vec::new(), Vec::new());
    for (inst, u) in insts.into_iter().zip(&utts) {
        if u.split == Split::Train {
            tr.push(inst);
        } else {
            dev.push(inst);
        }
    }
    let (_, classes) = cfg.collapse(&labels)?;
    let tc = TrainConfig {
        step_sizes: cfg.step_sizes()?,
        epochs: cfg.epochs(level)?,
        seed: cfg.seed()?,
        classes,
        ..Default::default()
    };
    let out = train_level(level, &layout, &tr, &dev, &tc)?;
    let summary = TrainSummary {
        level,
        best_step_size: out.best_step_size,
        best_epoch: out.best_epoch,
        initial_dev_per: out.initial_dev_per,
        dev_per: out.dev_per,
        skipped: out
            .log
            .iter()
            .filter(|l| Some(l.step_size) == out.best_step_size && l.epoch == out.best_epoch)
            .map(|l| l.skipped)
            .sum(),
    };

    let stage = Stage::new(&cfg.level_dir(level)?.join("train"))?;
    stage.write("model.txt", &io::format_model(&out.model))?;
    stage.write("train_log.jsonl", &out.log.iter().map(json_line).collect::<String>())?;
    stage.write("summary.json", &json_line(&summary))?;
    if let Some((lm, _)) = level_lm(cfg, level, &labels, &all)? {
        stage.write("lm.txt", &io::format_lm(&lm, &labels))?;
    }
    stage.write("manifest.json", &manifest("train", Some(cfg), json!({ "level": level }), &inputs)?)?;
    stage.commit()?;
    Ok(summary)
}

fn load_model(cfg: &RunConfig, level: usize, path: Option<&Path>) -> Result<(Model, PathBuf)> {
    let p = match path {
        Some(p) => p.to_path_buf(),
        None => cfg.model_path(level)?,
    };
    Ok((io::read_model(&p)?, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Exact,
    Beam(usize),
}

impl DecodeMode {
    fn tag(self) -> String {
        match self {
            DecodeMode::Exact => "exact".into(),
            DecodeMode::Beam(w) => format!("beam{w}"),
        }
    }
}

fn split_tag(split: Option<Split>) -> String {
    split.map_or_else(|| "all".to_string(), |s| s.to_string())
}

#[derive(Clone, Debug, Serialize)]
struct UtteranceScore<'a> {
    id: &'a str,
    score: f64,
    #[serde(rename = "S")]
    substitutions: usize,
    #[serde(rename = "I")]
    insertions: usize,
    #[serde(rename = "D")]
    deletions: usize,
    reference_len: usize,
}

pub struct DecodeRequest<'a> {
    pub level: usize,
    pub model: Option<&'a Path>,
    pub mode: DecodeMode,
    pub split: Option<Split>,
    pub lattice_dir: Option<&'a Path>,
}

/// Decodes a split; writes hypotheses, references, per-utterance scores and
/// the corpus report.
pub fn decode(cfg: &RunConfig, req: &DecodeRequest) -> Result<(ScoreReport, PathBuf)> {
    let (labels, all) = load_corpus(cfg)?;
    let utts = select(&all, req.split);
    if utts.is_empty() {
        return Err(WorkflowError::Usage(format!("no utterances in split {}", split_tag(req.split))));
    }
    let (model, model_path) = load_model(cfg, req.level, req.model)?;
    let (graphs, mut inputs) = level_graphs(cfg, req.level, &labels, &all, &utts, req.lattice_dir)?;
    inputs.splice(0..0, [cfg.corpus_dir()?, model_path]);
    let (collapse, _) = cfg.collapse(&labels)?;
    let width = match req.mode {
        DecodeMode::Beam(w) => Some(BeamConfig::new(w)?),
        DecodeMode::Exact => None,
    };

    let decoded: Vec<(Vec<Label>, f64)> = utts
        .par_iter()
        .zip(&graphs)
        .map(|(u, g)| -> Result<(Vec<Label>, f64)> {
            let w = g.scores(&model, &u.scores)?;
            let path = match &width {
                None => g.graph.best_path_with(&w)?,
                Some(b) => {
                    let r = beam_decode(&g.graph, &w, b)?;
                    (crate::graph::Path::new(r.arcs), r.score)
                }
            };
            Ok((path_labels(&g.graph, &path.0), path.1))
        })
        .collect::<Result<_>>()?;

    let mut hyp = Vec::new();
    let mut refs = Vec::new();
    let mut counts = Vec::new();
    let mut lines = String::new();
    for (u, (seq, score)) in utts.iter().zip(&decoded) {
        let h = collapse.apply(&io::names(&labels, seq))?;
        let r = collapse.apply(&io::names(&labels, &u.gold.labels()))?;
        let c = edit_counts(&h, &r);
        lines.push_str(&json_line(&UtteranceScore {
            id: &u.id,
            score: *score,
            substitutions: c.substitutions,
            insertions: c.insertions,
            deletions: c.deletions,
            reference_len: c.reference_len,
        }));
        counts.push(c);
        hyp.push((u.id.as_str(), io::names(&labels, seq)));
        refs.push((u.id.as_str(), io::names(&labels, &u.gold.labels())));
    }
    let report = ScoreReport::from_counts(&counts)?;

    let dest = cfg
        .level_dir(req.level)?
        .join(format!("decode-{}-{}", split_tag(req.split), req.mode.tag()));
    let stage = Stage::new(&dest)?;
    stage.write("hyp.txt", &io::format_transcripts(hyp))?;
    stage.write("ref.txt", &io::format_transcripts(refs))?;
    stage.write("scores.jsonl", &lines)?;
    stage.write("report.json", &json_line(&report))?;
    let args = json!({
        "level": req.level,
        "mode": req.mode.tag(),
        "split": split_tag(req.split),
    });
    stage.write("manifest.json", &manifest("decode", Some(cfg), args, &inputs)?)?;
    let dir = stage.commit()?;
    Ok((report, dir))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
struct PruneLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    report: PruneReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruneSummary {
    pub level: usize,
    pub lambda: f64,
    pub utterances: usize,
    pub mean_density: f64,
    pub mean_oracle_error: f64,
}

/// Prunes every utterance's level graph under the level model.
pub fn prune(
    cfg: &RunConfig,
    level: usize,
    model: Option<&Path>,
    lambda: Option<f64>,
    split: Option<Split>,
) -> Result<PruneSummary> {
    let (labels, all) = load_corpus(cfg)?;
    let utts = select(&all, split);
    let lambda = match lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => return Err(WorkflowError::Usage(format!("lambda {l} is outside [0, 1]"))),
        None => cfg.lambda(level)?,
    };
    let (model, model_path) = load_model(cfg, level, model)?;
    let (graphs, mut inputs) = level_graphs(cfg, level, &labels, &all, &utts, None)?;
    inputs.splice(0..0, [cfg.corpus_dir()?, model_path]);
    let (_, classes) = cfg.collapse(&labels)?;

    let pruned: Vec<(LevelGraph, PruneReport)> = utts
        .par_iter()
        .zip(&graphs)
        .map(|(u, g)| -> Result<_> {
            let w = g.scores(&model, &u.scores)?;
            let (lat, report) = g.prune(&w, lambda)?;
            let m = lattice_metrics(&lat.graph, &u.gold.labels(), classes.as_deref());
            Ok((lat, report.with_metrics(m)))
        })
        .collect::<Result<_>>()?;

    let stage = Stage::new(&cfg.lattice_dir(level)?)?;
    let mut lines = String::new();
    let (mut dens, mut orc) = (0.0, 0.0);
    for (u, (lat, report)) in utts.iter().zip(&pruned) {
        stage.write(&format!("{}.lat", u.id), &io::format_lattice(&lat.graph, &labels))?;
        dens += report.density.unwrap_or(0.0);
        orc += report.oracle_error.unwrap_or(0.0);
        lines.push_str(&json_line(&PruneLine {
            id: &u.id,
            report: report.clone(),
        }));
    }
    stage.write("prune_report.jsonl", &lines)?;
    let args = json!({ "level": level, "lambda": lambda, "split": split_tag(split) });
    stage.write("manifest.json", &manifest("prune", Some(cfg), args, &inputs)?)?;
    stage.commit()?;
    let n = utts.len().max(1) as f64;
    Ok(PruneSummary {
        level,
        lambda,
        utterances: utts.len(),
        mean_density: dens / n,
        mean_oracle_error: orc / n,
    })
}

/// Composes every lattice in `lattice_dir` with the label model at `lm`.
/// Output lattices are unscored.
pub fn compose(cfg: &RunConfig, lattice_dir: &Path, lm_path: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let labels = io::read_labels(&cfg.corpus_dir()?.join(io::LABELS_FILE))?;
    let lm = io::read_lm(lm_path, &labels)?;
    let (b, _) = build_bigram_lm_graph(&lm, labels.len())?;
    let mut names: Vec<String> = fs::read_dir(lattice_dir)
        .map_err(fs_err(lattice_dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".lat"))
        .collect();
    names.sort();
    let dest = match out {
        Some(p) => p.to_path_buf(),
        None => cfg.output_dir()?.join("composed"),
    };
    let composed: Vec<String> = names
        .par_iter()
        .map(|n| -> Result<String> {
            let a = io::read_lattice(&lattice_dir.join(n), &labels)?;
            let c = sigma_compose(&a, &b)?;
            Ok(io::format_lattice(&c.graph, &labels))
        })
        .collect::<Result<_>>()?;
    let stage = Stage::new(&dest)?;
    for (n, text) in names.iter().zip(&composed) {
        stage.write(n, text)?;
    }
    let inputs = [lattice_dir.to_path_buf(), lm_path.to_path_buf()];
    stage.write("manifest.json", &manifest("compose", Some(cfg), json!({}), &inputs)?)?;
    stage.commit()
}

/// Scores a hypothesis transcript file against a reference file.
pub fn eval(hyp: &Path, reference: &Path, collapse: Option<&Path>, out: Option<&Path>) -> Result<ScoreReport> {
    let h = io::read_transcripts(hyp)?;
    let r = io::read_transcripts(reference)?;
    let map = collapse.map(io::read_collapse_map).transpose()?;
    let hyps: HashMap<&str, &Vec<String>> = h.iter().map(|(id, s)| (id.as_str(), s)).collect();
    let mut counts = Vec::with_capacity(r.len());
    for (id, rs) in &r {
        let hs = hyps
            .get(id.as_str())
            .ok_or_else(|| WorkflowError::Usage(format!("hypothesis file lacks utterance {id:?}")))?;
        let (hs, rs) = match &map {
            Some(m) => (m.apply(hs)?, m.apply(rs)?),
            None => ((*hs).clone(), rs.clone()),
        };
        counts.push(crate::eval::per(&hs, &rs)?);
    }
    let report = ScoreReport::from_counts(&counts)?;
    if let Some(out) = out {
        io::write_text(out, &json_line(&report))?;
        let mut inputs = vec![hyp.to_path_buf(), reference.to_path_buf()];
        inputs.extend(collapse.map(Path::to_path_buf));
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        io::write_text(&out.with_file_name(name), &manifest("eval", None, json!({}), &inputs)?)?;
    }
    Ok(report)
}

// Beam diagnostics over lazy compositions

/// Zero-weight label model that only tracks the previous label.
pub fn label_history_graph(labels: usize) -> Result<Fst> {
    let mut lm = BigramLM::default();
    for s in (0..labels).map(Label::from) {
        lm.unigram.insert(s, 0.0);
        for t in (0..labels).map(Label::from) {
            lm.bigram.insert((s, t), 0.0);
        }
    }
    Ok(build_bigram_lm_graph(&lm, labels)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HitReport {
    pub width: usize,
    pub utterances: usize,
    pub hit_rate: f64,
    pub beam_per: f64,
    pub exact_per: f64,
    /// Largest time-slice population seen by the beam.
    pub max_frontier: usize,
}

#[derive(Serialize)]
struct LevelHitReport<'a> {
    level: usize,
    #[serde(flatten)]
    report: &'a HitReport,
}

/// Beam search over the lazy composition of each graph with `lm`, against
/// the exact best path of the eager composition. Paths are compared by
/// provenance.
pub fn beam_diagnostics(
    utts: &[&Utterance],
    graphs: &[LevelGraph],
    lm: &Fst,
    model: &Model,
    width: usize,
    classes: Option<&[usize]>,
) -> Result<HitReport> {
    let cfg = BeamConfig::new(width)?;
    let map = |seq: Vec<Label>| -> Vec<usize> { seq.iter().map(|l| classes.map_or(l.index(), |c| c[l.index()])).collect() };
    let rows: Vec<(bool, EditCounts, EditCounts, usize)> = utts
        .par_iter()
        .zip(graphs)
        .map(|(u, g)| -> Result<_> {
            let a = &g.graph;
            let cache: RefCell<HashMap<ComposedEdge, f64>> = RefCell::new(HashMap::new());
            let context = |e: &ComposedEdge| -> EdgeContext {
                let arc = lm.edge(e.right);
                match e.left {
                    LeftMove::Edge(e1) => EdgeContext {
                        history: arc.output.history(),
                        lm_score: arc.weight,
                        ..g.contexts[e1]
                    },
                    LeftMove::Stay(_) => EdgeContext {
                        lm_score: arc.weight,
                        ..EdgeContext::default()
                    },
                }
            };
            let score = |_: PairState, e: &ComposedEdge| -> f64 {
                if let Some(&s) = cache.borrow().get(e) {
                    return s;
                }
                let phi = extract(&model.layout, &u.scores, &context(e)).expect("contexts carry every attribute");
                let s = phi.dot(&model.theta).expect("layout matches model");
                cache.borrow_mut().insert(*e, s);
                s
            };
            let lazy = LazyComposition::new(a, lm)?;
            let beam = beam_search(
                &ScoredComposition {
                    composition: &lazy,
                    scorer: &score,
                },
                &cfg,
            );

            let eager = sigma_compose(a, lm)?;
            let w: Vec<f64> = eager
                .provenance
                .iter()
                .zip(eager.graph.edges())
                .map(|(p, e)| score(eager.states[e.tail], p))
                .collect();
            let (exact, _) = eager.graph.best_path_with(&w)?;
            let exact_arcs: Vec<ComposedEdge> = exact.edges.iter().map(|&e| eager.provenance[e]).collect();
            let gold = map(u.gold.labels());
            let labels_of = |arcs: &[ComposedEdge]| -> Vec<Label> {
                arcs.iter().filter_map(|e| e.left_edge().and_then(|x| a.edge(x).input.current())).collect()
            };
            let exact_counts = edit_counts(&map(labels_of(&exact_arcs)), &gold);
            Ok(match beam {
                Ok(r) => (
                    r.arcs == exact_arcs,
                    edit_counts(&map(labels_of(&r.arcs)), &gold),
                    exact_counts,
                    r.max_frontier,
                ),
                Err(BeamError::NoCompletePath) => (false, edit_counts(&[], &gold), exact_counts, 0),
                Err(e) => return Err(e.into()),
            })
        })
        .collect::<Result<_>>()?;

    let (mut beam_total, mut exact_total) = (EditCounts::default(), EditCounts::default());
    for (_, b, e, _) in &rows {
        beam_total.add(b);
        exact_total.add(e);
    }
    Ok(HitReport {
        width,
        utterances: rows.len(),
        hit_rate: crate::beam::hit_rate(rows.iter().map(|r| r.0)),
        beam_per: beam_total.rate(),
        exact_per: exact_total.rate(),
        max_frontier: rows.iter().map(|r| r.3).max().unwrap_or(0),
    })
}

/// Hit rate of a level model: lazy search over the level's uncomposed
/// graphs times its label model (a plain label-history graph at level one).
pub fn hitrate(
    cfg: &RunConfig,
    level: usize,
    model: Option<&Path>,
    width: usize,
    split: Option<Split>,
) -> Result<HitReport> {
    let (labels, all) = load_corpus(cfg)?;
    let utts = select(&all, split);
    let (model, model_path) = load_model(cfg, level, model)?;
    let (graphs, lm, mut inputs) = if level == 1 {
        let g = first_level_graphs(&utts, labels.len(), &cfg.segmentation()?)?;
        (g, label_history_graph(labels.len())?, Vec::new())
    } else {
        let dir = cfg.lattice_dir(level - 1)?;
        let graphs: Vec<LevelGraph> = utts
            .par_iter()
            .map(|u| Ok(LevelGraph::from_graph(io::read_lattice(&dir.join(format!("{}.lat", u.id)), &labels)?)))
            .collect::<Result<_>>()?;
        let lm = match level_lm(cfg, level, &labels, &all)? {
            Some((_, g)) => g,
            None => label_history_graph(labels.len())?,
        };
        (graphs, lm, vec![dir])
    };
    inputs.splice(0..0, [cfg.corpus_dir()?, model_path]);
    let (_, classes) = cfg.collapse(&labels)?;
    let report = beam_diagnostics(&utts, &graphs, &lm, &model, width, classes.as_deref())?;

    let dest = cfg
        .level_dir(level)?
        .join(format!("hitrate-{}-beam{width}", split_tag(split)));
    let stage = Stage::new(&dest)?;
    stage.write("report.json", &json_line(&LevelHitReport { level, report: &report }))?;
    let args = json!({ "level": level, "width": width, "split": split_tag(split) });
    stage.write("manifest.json", &manifest("hitrate", Some(cfg), args, &inputs)?)?;
    stage.commit()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let p = Path::new("/tmp/run.cfg");
        let cfg = RunConfig::parse(
            p,
            "# comment\nseed = 7\ncorpus_dir = data # trailing\ntemplates.2 = second\nlambda.1=0.5\nstep_sizes = 0.1, 1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 7);
        assert_eq!(cfg.corpus_dir().unwrap(), PathBuf::from("/tmp/data"));
        assert_eq!(cfg.lambda(1).unwrap(), 0.5);
        assert_eq!(cfg.step_sizes().unwrap(), vec![0.1, 1.0]);
        assert_eq!(cfg.templates(1).unwrap(), FeatureTemplate::first_level());
        assert_eq!(cfg.levels(), vec![2]);

        for bad in ["colour = red\n", "seed = x\n", "lambda.1 = 2\n", "seed\n", "seed=1\nseed=2\n", "templates.0 = first\n"] {
            assert!(RunConfig::parse(p, bad).is_err(), "{bad:?}");
        }
        assert!(RunConfig::parse(p, "lm.2 = /definitely/missing/lm.txt\n").is_err());
        assert!(RunConfig::parse(p, "lm.2 = estimate\n").is_ok());
    }

    #[test]
    fn stage_cleans_up_unless_committed() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("out");
        {
            let s = Stage::new(&dest).unwrap();
            s.write("a", "x").unwrap();
        }
        assert!(!dest.exists() && !dir.path().join("out.partial").exists());
        let s = Stage::new(&dest).unwrap();
        s.write("a", "x").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(dest.join("a")).unwrap(), "x");
    }
}
