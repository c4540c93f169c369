//! Utterances and gold segmentations.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::features::FrameScores;
use crate::graph::Label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("gold segments do not tile [0, {frames}): gap or overlap at frame {at}")]
    NotTiling { frames: u32, at: u32 },
    #[error("gold segment [{start}, {end}) is empty")]
    EmptySegment { start: u32, end: u32 },
    #[error("gold segment [{start}, {end}) is longer than the {max}-frame maximum")]
    SegmentTooLong { start: u32, end: u32, max: usize },
    #[error("gold label {0} is outside the label set")]
    LabelOutOfRange(usize),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub label: Label,
    pub start: u32,
    pub end: u32,
}

impl Segment {
    pub fn len(&self) -> u32 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Labeled segments that abut exactly and cover `[0, T)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldSegmentation {
    segments: Vec<Segment>,
}

impl GoldSegmentation {
    pub fn new(segments: Vec<Segment>, frames: u32, label_count: usize) -> Result<Self, CorpusError> {
        let mut at = 0;
        for s in &segments {
            if s.is_empty() {
                return Err(CorpusError::EmptySegment {
                    start: s.start,
                    end: s.end,
                });
            }
            if s.start != at {
                return Err(CorpusError::NotTiling { frames, at });
            }
            if s.label.index() >= label_count {
                return Err(CorpusError::LabelOutOfRange(s.label.index()));
            }
            at = s.end;
        }
        if at != frames {
            return Err(CorpusError::NotTiling { frames, at });
        }
        Ok(GoldSegmentation { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn frames(&self) -> u32 {
        self.segments.last().map_or(0, |s| s.end)
    }

    pub fn labels(&self) -> Vec<Label> {
        self.segments.iter().map(|s| s.label).collect()
    }

    /// Whether `[start, end)` with `label` is one of the gold segments.
    pub fn contains(&self, start: u32, end: u32, label: Label) -> bool {
        self.segments
            .binary_search_by_key(&start, |s| s.start)
            .is_ok_and(|i| self.segments[i].end == end && self.segments[i].label == label)
    }

    /// Rejects segmentations the full hypothesis space could not reach.
    pub fn check_max_len(&self, max: usize) -> Result<(), CorpusError> {
        match self.segments.iter().find(|s| s.len() as usize > max) {
            Some(s) => Err(CorpusError::SegmentTooLong {
                start: s.start,
                end: s.end,
                max,
            }),
            None => Ok(()),
        }
    }

    /// Gold label of every frame.
    pub fn frame_labels(&self) -> Vec<Label> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.label, s.len() as usize))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(CorpusError::UnknownSplit(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub scores: FrameScores,
    pub gold: GoldSegmentation,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(label: u32, start: u32, end: u32) -> Segment {
        Segment {
            label: Label(label),
            start,
            end,
        }
    }

    #[test]
    fn tiling_is_enforced() {
        let ok = GoldSegmentation::new(vec![seg(0, 0, 2), seg(1, 2, 5)], 5, 2).unwrap();
        assert_eq!(ok.labels(), vec![Label(0), Label(1)]);
        assert_eq!(ok.frame_labels().len(), 5);
        assert!(ok.contains(2, 5, Label(1)));
        assert!(!ok.contains(2, 5, Label(0)));
        assert!(!ok.contains(1, 5, Label(1)));

        assert!(matches!(
            GoldSegmentation::new(vec![seg(0, 0, 2), seg(1, 3, 5)], 5, 2),
            Err(CorpusError::NotTiling { at: 2, .. })
        ));
        assert!(GoldSegmentation::new(vec![seg(0, 0, 2)], 5, 2).is_err());
        assert!(GoldSegmentation::new(vec![seg(2, 0, 5)], 5, 2).is_err());
        assert!(GoldSegmentation::new(vec![seg(0, 0, 0), seg(0, 0, 5)], 5, 2).is_err());
    }

    #[test]
    fn long_segments_rejected() {
        let g = GoldSegmentation::new(vec![seg(0, 0, 4), seg(1, 4, 5)], 5, 2).unwrap();
        assert!(g.check_max_len(4).is_ok());
        assert_eq!(
            g.check_max_len(3).unwrap_err(),
            CorpusError::SegmentTooLong { start: 0, end: 4, max: 3 }
        );
    }
}
