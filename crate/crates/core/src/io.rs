//! Text formats for corpora, lattices, label models and model parameters.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::corpus::{GoldSegmentation, Segment, Split, Utterance};
use crate::eval::CollapseMap;
use crate::features::{FeatureLayout, FeatureTemplate, FrameScores, Model};
use crate::graph::{DecodingGraph, Fst, Label, Sym};
use crate::hypothesis::{BigramLM, LabelSet, EPS_NAME};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, IoError>;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Numbered, non-empty lines with `#` comments removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
}

struct Cursor<'a> {
    path: &'a Path,
    lines: Vec<(usize, &'a str)>,
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Cursor {
            path,
            lines: content_lines(text).collect(),
            at: 0,
        }
    }

    fn err<T>(&self, line: usize, message: impl Into<String>) -> Result<T> {
        Err(IoError::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        })
    }

    fn next(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        match self.lines.get(self.at) {
            Some(&(n, l)) => {
                self.at += 1;
                Ok((n, l.split_whitespace().collect()))
            }
            None => {
                let last = self.lines.last().map_or(0, |l| l.0);
                self.err(last, format!("expected {what}, found end of file"))
            }
        }
    }

    fn done(&self) -> Result<()> {
        match self.lines.get(self.at) {
            Some(&(n, _)) => self.err(n, "unexpected trailing content"),
            None => Ok(()),
        }
    }

    fn parse<T: std::str::FromStr>(&self, line: usize, field: &str, what: &str) -> Result<T> {
        field
            .parse()
            .or_else(|_| self.err(line, format!("invalid {what} {field:?}")))
    }

    /// `key value` header fields, e.g. `frames 10 labels 3`.
    fn header(&mut self, keys: &[&str]) -> Result<Vec<usize>> {
        let (n, f) = self.next("header")?;
        if f.len() != 2 * keys.len() || keys.iter().enumerate().any(|(i, k)| f[2 * i] != *k) {
            return self.err(n, format!("expected header \"{}\"", keys.join(" N ") + " N"));
        }
        keys.iter()
            .enumerate()
            .map(|(i, k)| self.parse(n, f[2 * i + 1], k))
            .collect()
    }
}

/// Real number with 9 significant digits, in the style of C's `%.9g`.
pub fn format_g9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf" } else { "-inf" }.into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.8e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let strip = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if (-4..9).contains(&exp) {
        strip(format!("{:.*}", (8 - exp) as usize, x))
    } else {
        format!("{}e{}{:02}", strip(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

// Labels

pub fn format_labels(labels: &LabelSet) -> String {
    labels.names().iter().map(|n| format!("{n}\n")).collect()
}

pub fn read_labels(path: &Path) -> Result<LabelSet> {
    let text = read_text(path)?;
    let names: Vec<&str> = content_lines(&text).map(|(_, l)| l).collect();
    LabelSet::new(names).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

// Frame scores

pub fn format_frame_scores(fs: &FrameScores) -> String {
    let mut s = format!("frames {} labels {}\n", fs.frames(), fs.labels());
    for t in 0..fs.frames() {
        let row: Vec<String> = fs.row(t).iter().map(|x| format!("{x}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_frame_scores(path: &Path, expect_labels: usize) -> Result<FrameScores> {
    let text = read_text(path)?;
    let mut c = Cursor::new(path, &text);
    let h = c.header(&["frames", "labels"])?;
    let (frames, labels) = (h[0], h[1]);
    if labels != expect_labels {
        return c.err(1, format!("{labels} labels, label set has {expect_labels}"));
    }
    let mut data = Vec::with_capacity(frames * labels);
    for _ in 0..frames {
        let (n, f) = c.next("score row")?;
        if f.len() != labels {
            return c.err(n, format!("expected {labels} scores, found {}", f.len()));
        }
        for x in f {
            data.push(c.parse(n, x, "score")?);
        }
    }
    c.done()?;
    FrameScores::new(frames, labels, data).or_else(|e| c.err(1, e.to_string()))
}

// Segmentations

pub fn format_segmentation(gold: &GoldSegmentation, labels: &LabelSet) -> String {
    gold.segments()
        .iter()
        .map(|s| format!("{} {} {}\n", s.start, s.end, labels.name(s.label)))
        .collect()
}

pub fn read_segmentation(path: &Path, labels: &LabelSet, frames: u32) -> Result<GoldSegmentation> {
    let text = read_text(path)?;
    let mut c = Cursor::new(path, &text);
    let mut segments = Vec::new();
    while c.at < c.lines.len() {
        let (n, f) = c.next("segment")?;
        if f.len() != 3 {
            return c.err(n, "expected \"<start> <end> <label>\"");
        }
        let label = labels.get(f[2]).or_else(|e| c.err(n, e.to_string()))?;
        segments.push(Segment {
            start: c.parse(n, f[0], "start frame")?,
            end: c.parse(n, f[1], "end frame")?,
            label,
        });
    }
    GoldSegmentation::new(segments, frames, labels.len()).or_else(|e| c.err(0, e.to_string()))
}

// Transcripts: "<id> label label ..."

pub fn format_transcripts<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a str, Vec<String>)>,
{
    rows.into_iter()
        .map(|(id, labels)| {
            if labels.is_empty() {
                format!("{id}\n")
            } else {
                format!("{id} {}\n", labels.join(" "))
            }
        })
        .collect()
}

pub fn read_transcripts(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = read_text(path)?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (n, l) in content_lines(&text) {
        let mut f = l.split_whitespace();
        let id = f.next().expect("non-empty line").to_string();
        if seen.insert(id.clone(), n).is_some() {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n,
                message: format!("duplicate id {id:?}"),
            });
        }
        out.push((id, f.map(str::to_string).collect()));
    }
    Ok(out)
}

// Collapse map: "<from> <to>"

pub fn read_collapse_map(path: &Path) -> Result<CollapseMap> {
    let text = read_text(path)?;
    let mut map = HashMap::new();
    for (n, l) in content_lines(&text) {
        let f: Vec<&str> = l.split_whitespace().collect();
        if f.len() != 2 {
            return Err(IoError::Parse {
                path: path.to_path_buf(),
                line: n,
                message: "expected \"<from> <to>\"".into(),
            });
        }
        map.insert(f[0].to_string(), f[1].to_string());
    }
    Ok(CollapseMap::new(map))
}

// Corpus directory: labels.txt, index.txt ("<id> <split>"), <id>.scores, <id>.seg

pub const LABELS_FILE: &str = "labels.txt";
pub const INDEX_FILE: &str = "index.txt";

pub fn write_corpus(dir: &Path, labels: &LabelSet, utterances: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_text(&dir.join(LABELS_FILE), &format_labels(labels))?;
    let index: String = utterances.iter().map(|u| format!("{} {}\n", u.id, u.split)).collect();
    write_text(&dir.join(INDEX_FILE), &index)?;
    for u in utterances {
        write_text(&dir.join(format!("{}.scores", u.id)), &format_frame_scores(&u.scores))?;
        write_text(&dir.join(format!("{}.seg", u.id)), &format_segmentation(&u.gold, labels))?;
    }
    Ok(())
}

pub fn read_index(path: &Path) -> Result<Vec<(String, Split)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (n, l) in content_lines(&text) {
        let f: Vec<&str> = l.split_whitespace().collect();
        let bad = |m: String| IoError::Parse {
            path: path.to_path_buf(),
            line: n,
            message: m,
        };
        if f.len() != 2 {
            return Err(bad("expected \"<id> <split>\"".into()));
        }
        let split = f[1].parse().map_err(|e: crate::corpus::CorpusError| bad(e.to_string()))?;
        out.push((f[0].to_string(), split));
    }
    Ok(out)
}

pub fn read_corpus(dir: &Path) -> Result<(LabelSet, Vec<Utterance>)> {
    let labels = read_labels(&dir.join(LABELS_FILE))?;
    let mut utterances = Vec::new();
    for (id, split) in read_index(&dir.join(INDEX_FILE))? {
        let scores = read_frame_scores(&dir.join(format!("{id}.scores")), labels.len())?;
        let gold = read_segmentation(&dir.join(format!("{id}.seg")), &labels, scores.frames() as u32)?;
        utterances.push(Utterance {
            id,
            split,
            scores,
            gold,
        });
    }
    Ok((labels, utterances))
}

// Lattices

fn sym_name(sym: Sym, labels: &LabelSet) -> String {
    match sym {
        Sym::Eps => EPS_NAME.to_string(),
        Sym::One(l) => labels.name(l).to_string(),
        Sym::Pair(h, l) => format!("{}|{}", h.map_or(EPS_NAME, |h| labels.name(h)), labels.name(l)),
    }
}

fn parse_sym(s: &str, labels: &LabelSet) -> std::result::Result<Sym, String> {
    let one = |n: &str| labels.get(n).map_err(|e| e.to_string());
    if s == EPS_NAME {
        return Ok(Sym::Eps);
    }
    match s.split_once('|') {
        Some((h, l)) => {
            let h = if h == EPS_NAME { None } else { Some(one(h)?) };
            Ok(Sym::Pair(h, one(l)?))
        }
        None => Ok(Sym::One(one(s)?)),
    }
}

/// Unscored edges are written with weight `-`. Initial and final vertex
/// lists follow the edges.
pub fn format_lattice(g: &Fst, labels: &LabelSet) -> String {
    let mut s = format!("vertices {} edges {}\n", g.num_vertices(), g.num_edges());
    for v in 0..g.num_vertices() {
        let _ = writeln!(s, "{v} {}", g.time(v));
    }
    for (id, e) in g.edges().iter().enumerate() {
        let w = e.weight.map_or_else(|| "-".to_string(), format_g9);
        let _ = writeln!(
            s,
            "{id} {} {} {} {} {w}",
            e.tail,
            e.head,
            sym_name(e.input, labels),
            sym_name(e.output, labels)
        );
    }
    let list = |it: &mut dyn Iterator<Item = usize>| it.map(|v| format!(" {v}")).collect::<String>();
    let _ = writeln!(s, "initial{}", list(&mut g.initials()));
    let _ = writeln!(s, "final{}", list(&mut g.finals()));
    s
}

pub fn read_lattice(path: &Path, labels: &LabelSet) -> Result<DecodingGraph> {
    let text = read_text(path)?;
    let mut c = Cursor::new(path, &text);
    let h = c.header(&["vertices", "edges"])?;
    let mut g = Fst::new();
    for v in 0..h[0] {
        let (n, f) = c.next("vertex")?;
        if f.len() != 2 || c.parse::<usize>(n, f[0], "vertex id")? != v {
            return c.err(n, format!("expected \"{v} <time>\""));
        }
        g.add_vertex(c.parse(n, f[1], "time")?);
    }
    for id in 0..h[1] {
        let (n, f) = c.next("edge")?;
        if f.len() != 6 || c.parse::<usize>(n, f[0], "edge id")? != id {
            return c.err(n, format!("expected \"{id} <tail> <head> <in> <out> <weight>\""));
        }
        let tail = c.parse(n, f[1], "tail")?;
        let head = c.parse(n, f[2], "head")?;
        let input = parse_sym(f[3], labels).or_else(|m| c.err(n, m))?;
        let output = parse_sym(f[4], labels).or_else(|m| c.err(n, m))?;
        let r = if f[5] == "-" {
            g.add_edge(tail, head, input, output)
        } else {
            let w: f64 = c.parse(n, f[5], "weight")?;
            g.add_weighted_edge(tail, head, input, output, w)
        };
        r.or_else(|e| c.err(n, e.to_string()))?;
    }
    for key in ["initial", "final"] {
        let (n, f) = c.next(key)?;
        if f.first() != Some(&key) {
            return c.err(n, format!("expected \"{key} <vertex>...\""));
        }
        for v in &f[1..] {
            let v = c.parse(n, v, "vertex")?;
            let r = if key == "initial" { g.set_initial(v) } else { g.set_final(v) };
            r.or_else(|e| c.err(n, e.to_string()))?;
        }
    }
    c.done()?;
    g.seal().or_else(|e| c.err(0, e.to_string()))
}

// Bigram label model: "1 <label> <logp>", "2 <history> <label> <logp>",
// "B <history> <logw>"

pub fn format_lm(lm: &BigramLM, labels: &LabelSet) -> String {
    let mut s = String::new();
    for (l, p) in &lm.unigram {
        let _ = writeln!(s, "1 {} {p}", labels.name(*l));
    }
    for ((h, l), p) in &lm.bigram {
        let _ = writeln!(s, "2 {} {} {p}", labels.name(*h), labels.name(*l));
    }
    for (h, w) in &lm.backoff {
        let _ = writeln!(s, "B {} {w}", labels.name(*h));
    }
    s
}

pub fn read_lm(path: &Path, labels: &LabelSet) -> Result<BigramLM> {
    let text = read_text(path)?;
    let c = Cursor::new(path, &text);
    let mut lm = BigramLM::default();
    for &(n, l) in &c.lines {
        let f: Vec<&str> = l.split_whitespace().collect();
        let label = |s: &str| labels.get(s).or_else(|e| c.err(n, e.to_string()));
        match (f.first().copied(), f.len()) {
            (Some("1"), 3) => {
                lm.unigram.insert(label(f[1])?, c.parse(n, f[2], "log probability")?);
            }
            (Some("2"), 4) => {
                lm.bigram
                    .insert((label(f[1])?, label(f[2])?), c.parse(n, f[3], "log probability")?);
            }
            (Some("B"), 3) => {
                lm.backoff.insert(label(f[1])?, c.parse(n, f[2], "log weight")?);
            }
            _ => return c.err(n, "expected a \"1\", \"2\" or \"B\" entry"),
        }
    }
    Ok(lm)
}

// Model: header, template manifest, then sparse "index value" lines.

pub fn format_model(model: &Model) -> String {
    let l = &model.layout;
    let mut s = format!(
        "model dim {} labels {} max_len {} templates {}\n",
        l.dim(),
        l.label_count(),
        l.max_len(),
        l.templates().len()
    );
    for ((t, d), o) in l.templates().iter().zip(l.base_dims()).zip(l.offsets()) {
        let _ = writeln!(s, "template {t} {d} {o}");
    }
    for (i, &x) in model.theta.iter().enumerate() {
        if x != 0.0 {
            let _ = writeln!(s, "{i} {x}");
        }
    }
    s
}

pub fn read_model(path: &Path) -> Result<Model> {
    let text = read_text(path)?;
    let mut c = Cursor::new(path, &text);
    let (n, f) = c.next("model header")?;
    if f.len() != 9 || f[0] != "model" || f[1] != "dim" || f[3] != "labels" || f[5] != "max_len" || f[7] != "templates" {
        return c.err(n, "expected \"model dim D labels K max_len M templates N\"");
    }
    let dim: usize = c.parse(n, f[2], "dim")?;
    let labels: usize = c.parse(n, f[4], "label count")?;
    let max_len: usize = c.parse(n, f[6], "max_len")?;
    let count: usize = c.parse(n, f[8], "template count")?;
    let mut templates = Vec::new();
    let mut manifest = Vec::new();
    for _ in 0..count {
        let (n, f) = c.next("template")?;
        if f.len() != 4 || f[0] != "template" {
            return c.err(n, "expected \"template <name> <base_dim> <offset>\"");
        }
        let t: FeatureTemplate = f[1].parse().or_else(|e: crate::features::FeatureError| c.err(n, e.to_string()))?;
        templates.push(t);
        manifest.push((n, c.parse::<usize>(n, f[2], "base dim")?, c.parse::<usize>(n, f[3], "offset")?));
    }
    let layout = FeatureLayout::new(templates, labels, max_len);
    for (i, &(n, d, o)) in manifest.iter().enumerate() {
        if layout.base_dims()[i] != d || layout.offsets()[i] != o {
            return c.err(n, "template manifest does not match the layout");
        }
    }
    if layout.dim() != dim {
        return c.err(1, format!("dimension {dim} does not match the layout ({})", layout.dim()));
    }
    let mut theta = vec![0.0; dim];
    while c.at < c.lines.len() {
        let (n, f) = c.next("parameter")?;
        if f.len() != 2 {
            return c.err(n, "expected \"<index> <value>\"");
        }
        let i: usize = c.parse(n, f[0], "index")?;
        if i >= dim {
            return c.err(n, format!("index {i} out of range"));
        }
        theta[i] = c.parse(n, f[1], "value")?;
    }
    Ok(Model { layout, theta })
}

/// Label names of a label sequence.
pub fn names(labels: &LabelSet, seq: &[Label]) -> Vec<String> {
    seq.iter().map(|&l| labels.name(l).to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::{build_bigram_lm_graph, build_full_space, SegmentationConfig};
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn g9_matches_c_style() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (f64::NEG_INFINITY, "-inf"),
            (14.0 / 3.0, "4.66666667"),
        ];
        for (x, s) in cases {
            assert_eq!(format_g9(x), s, "{x}");
        }
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&SynthConfig {
            utterances: 4,
            train: 2,
            dev: 1,
            ..Default::default()
        })
        .unwrap();
        write_corpus(dir.path(), &c.labels, &c.utterances).unwrap();
        let (labels, utts) = read_corpus(dir.path()).unwrap();
        assert_eq!(labels, c.labels);
        assert_eq!(utts, c.utterances);
    }

    #[test]
    fn lattice_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelSet::new(["a", "b"]).unwrap();
        let mut g = build_full_space(3, 2, &SegmentationConfig::new(1, 2).unwrap()).unwrap();
        let w: Vec<f64> = (0..g.num_edges()).map(|i| i as f64 / 7.0).collect();
        g.set_weights(&w).unwrap();
        let p = dir.path().join("x.lat");
        write_text(&p, &format_lattice(&g, &labels)).unwrap();
        let back = read_lattice(&p, &labels).unwrap();
        assert_eq!(back.num_edges(), g.num_edges());
        for (a, b) in back.edges().iter().zip(g.edges()) {
            assert_eq!((a.tail, a.head, a.input, a.output), (b.tail, b.head, b.input, b.output));
            assert!((a.weight.unwrap() - b.weight.unwrap()).abs() < 1e-8);
        }
        assert_eq!(format_lattice(&back, &labels), format_lattice(&g, &labels));

        // Composed-style symbols and unscored edges.
        let mut lm = BigramLM::default();
        lm.unigram.insert(Label(0), -0.5);
        lm.unigram.insert(Label(1), -1.0);
        lm.backoff.insert(Label(0), -0.25);
        lm.backoff.insert(Label(1), -0.25);
        let (b, _) = build_bigram_lm_graph(&lm, 2).unwrap();
        let composed = crate::compose::sigma_compose(&g, &b).unwrap();
        let text = format_lattice(&composed.graph, &labels);
        assert!(text.contains("<eps>|a") && text.contains(" -\n"));
        write_text(&p, &text).unwrap();
        assert_eq!(format_lattice(&read_lattice(&p, &labels).unwrap(), &labels), text);
    }

    #[test]
    fn model_and_lm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = FeatureLayout::new(FeatureTemplate::second_level(), 3, 5);
        let mut m = Model::zeros(layout);
        m.theta[0] = 0.1 + 0.2;
        m.theta[4] = -1e-300;
        let p = dir.path().join("m.model");
        write_text(&p, &format_model(&m)).unwrap();
        assert_eq!(read_model(&p).unwrap(), m);

        let labels = LabelSet::new(["a", "b", "c"]).unwrap();
        let mut lm = BigramLM::default();
        lm.unigram.insert(Label(2), -0.7);
        lm.bigram.insert((Label(0), Label(1)), -1.0 / 3.0);
        lm.backoff.insert(Label(0), -2.0);
        let p = dir.path().join("lm.txt");
        write_text(&p, &format_lm(&lm, &labels)).unwrap();
        assert_eq!(read_lm(&p, &labels).unwrap(), lm);
    }

    #[test]
    fn parse_errors_carry_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.scores");
        write_text(&p, "frames 2 labels 2\n0 0\n0\n").unwrap();
        let e = read_frame_scores(&p, 2).unwrap_err().to_string();
        assert!(e.contains(":3:"), "{e}");
        assert!(read_frame_scores(&dir.path().join("missing"), 2).is_err());
    }
}
