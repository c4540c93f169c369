//! Phone error rate scoring.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::hypothesis::LabelSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("no utterances to score")]
    EmptyCorpus,
    #[error("label {0:?} has no collapse mapping")]
    UnmappedLabel(String),
}

/// Edit operations of a minimum-cost alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Errors divided by reference length.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_len as f64
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. On ties
/// the backtrace prefers substitution (or match), then insertion, then
/// deletion.
pub fn edit_counts<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditCounts {
    let (n, m) = (hyp.len(), reference.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(hyp[i - 1] != reference[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        reference_len: m,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let mismatch = hyp[i - 1] != reference[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(mismatch) {
                counts.substitutions += usize::from(mismatch);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.insertions += 1;
            i -= 1;
        } else {
            counts.deletions += 1;
            j -= 1;
        }
    }
    counts
}

/// Edit counts with a non-empty reference.
pub fn per<T: PartialEq>(hyp: &[T], reference: &[T]) -> Result<EditCounts, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_counts(hyp, reference))
}

/// Pooled rate: total errors over total reference length.
pub fn corpus_per(counts: &[EditCounts]) -> Result<f64, EvalError> {
    if counts.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let mut total = EditCounts::default();
    for c in counts {
        total.add(c);
    }
    if total.reference_len == 0 {
        return Err(EvalError::EmptyReference);
    }
    Ok(total.rate())
}

/// Per-symbol relabeling applied before scoring. Adjacent duplicates are
/// kept: two segments that collapse to the same label remain two tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CollapseMap {
    map: HashMap<String, String>,
}

impl CollapseMap {
    pub fn new(map: HashMap<String, String>) -> Self {
        CollapseMap { map }
    }

    pub fn identity<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CollapseMap {
            map: labels
                .into_iter()
                .map(Into::into)
                .map(|l: String| (l.clone(), l))
                .collect(),
        }
    }

    pub fn apply<S: AsRef<str>>(&self, seq: &[S]) -> Result<Vec<String>, EvalError> {
        seq.iter()
            .map(|s| {
                self.map
                    .get(s.as_ref())
                    .cloned()
                    .ok_or_else(|| EvalError::UnmappedLabel(s.as_ref().to_string()))
            })
            .collect()
    }

    /// Class index of every label, classes numbered by sorted target name.
    pub fn class_indices(&self, labels: &LabelSet) -> Result<Vec<usize>, EvalError> {
        let targets: BTreeSet<&String> = labels
            .names()
            .iter()
            .map(|n| self.map.get(n).ok_or_else(|| EvalError::UnmappedLabel(n.clone())))
            .collect::<Result<_, _>>()?;
        let targets: Vec<&String> = targets.into_iter().collect();
        Ok(labels
            .names()
            .iter()
            .map(|n| targets.binary_search(&&self.map[n]).expect("target present"))
            .collect())
    }
}

/// Corpus-level score report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoreReport {
    pub utterances: usize,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    pub per: f64,
}

impl ScoreReport {
    pub fn from_counts(counts: &[EditCounts]) -> Result<Self, EvalError> {
        let rate = corpus_per(counts)?;
        let mut total = EditCounts::default();
        for c in counts {
            total.add(c);
        }
        Ok(ScoreReport {
            utterances: counts.len(),
            substitutions: total.substitutions,
            insertions: total.insertions,
            deletions: total.deletions,
            per: rate,
        })
    }
}
