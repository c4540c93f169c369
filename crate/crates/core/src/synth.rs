//! Seeded synthetic corpora with controllable segment and label structure.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Geometric, StandardNormal};
use thiserror::Error;

use crate::corpus::{GoldSegmentation, Segment, Split, Utterance};
use crate::features::FrameScores;
use crate::graph::Label;
use crate::hypothesis::LabelSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthesis configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub utterances: usize,
    /// The first `train` utterances are training data, the next `dev`
    /// development data, the rest test data.
    pub train: usize,
    pub dev: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub labels: usize,
    pub mean_segment: f64,
    pub max_segment: usize,
    /// Logit added to the true label of every frame.
    pub sharpness: f64,
    /// Log-weight of each label's preferred successor; 0 gives a uniform chain.
    pub transition_strength: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            utterances: 300,
            train: 200,
            dev: 50,
            min_frames: 20,
            max_frames: 40,
            labels: 5,
            mean_segment: 4.0,
            max_segment: 10,
            sharpness: 1.5,
            transition_strength: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.to_string()));
        if self.utterances == 0 || self.labels == 0 || self.max_segment == 0 {
            return bad("utterances, labels and max_segment must be positive");
        }
        if self.train + self.dev > self.utterances {
            return bad("train + dev exceeds the number of utterances");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 <= min_frames <= max_frames");
        }
        if !(self.mean_segment >= 1.0) {
            return bad("mean_segment must be at least 1");
        }
        if !(self.sharpness >= 0.0) || !self.transition_strength.is_finite() || self.transition_strength < 0.0 {
            return bad("sharpness and transition_strength must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub labels: LabelSet,
    pub utterances: Vec<Utterance>,
    /// Row-stochastic label transition matrix of the generating chain.
    pub transitions: Vec<Vec<f64>>,
}

pub fn label_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

/// Transition matrix where each label prefers one successor, the
/// successors forming a random cycle over all labels.
fn transition_matrix(labels: usize, strength: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut cycle: Vec<usize> = (0..labels).collect();
    cycle.shuffle(rng);
    let mut next = vec![0; labels];
    for i in 0..labels {
        next[cycle[i]] = cycle[(i + 1) % labels];
    }
    let boost = strength.exp();
    (0..labels)
        .map(|p| {
            let row: Vec<f64> = (0..labels).map(|s| if s == next[p] { boost } else { 1.0 }).collect();
            let z: f64 = row.iter().sum();
            row.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

fn log_softmax(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for x in row {
        *x -= lse;
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.labels;
    let transitions = transition_matrix(k, cfg.transition_strength, &mut rng);
    let rows: Vec<WeightedIndex<f64>> = transitions
        .iter()
        .map(|r| WeightedIndex::new(r).expect("positive weights"))
        .collect();
    let lengths = Geometric::new(1.0 / cfg.mean_segment).expect("probability in (0, 1]");

    let mut utterances = Vec::with_capacity(cfg.utterances);
    for u in 0..cfg.utterances {
        let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
        let mut segments = Vec::new();
        let mut at = 0usize;
        let mut label = rng.gen_range(0..k);
        while at < frames {
            if !segments.is_empty() {
                label = rows[label].sample(&mut rng);
            }
            let len = (1 + lengths.sample(&mut rng) as usize)
                .min(cfg.max_segment)
                .min(frames - at);
            segments.push(Segment {
                label: Label::from(label),
                start: at as u32,
                end: (at + len) as u32,
            });
            at += len;
        }
        let gold = GoldSegmentation::new(segments, frames as u32, k).expect("segments tile by construction");

        let mut data = Vec::with_capacity(frames * k);
        for truth in gold.frame_labels() {
            let mut row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            row[truth.index()] += cfg.sharpness;
            log_softmax(&mut row);
            data.extend(row);
        }
        let scores = FrameScores::new(frames, k, data).expect("rows sized by construction");
        let split = if u < cfg.train {
            Split::Train
        } else if u < cfg.train + cfg.dev {
            Split::Dev
        } else {
            Split::Test
        };
        utterances.push(Utterance {
            id: format!("utt{u:04}"),
            split,
            scores,
            gold,
        });
    }
    Ok(SynthCorpus {
        labels: LabelSet::new(label_names(k)).expect("generated names are valid"),
        utterances,
        transitions,
    })
}

/// Label sequence from per-frame argmax, runs merged into segments.
pub fn frame_argmax_sequence(scores: &FrameScores) -> Vec<Label> {
    let mut out: Vec<Label> = scores.argmax_labels();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            utterances: 20,
            train: 10,
            dev: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate(&small(4)).unwrap(), generate(&small(4)).unwrap());
        assert_ne!(generate(&small(4)).unwrap(), generate(&small(5)).unwrap());
    }

    #[test]
    fn segments_respect_bounds_and_splits() {
        let c = generate(&small(2)).unwrap();
        for u in &c.utterances {
            assert!(u.gold.check_max_len(10).is_ok());
            assert!((20..=40).contains(&u.scores.frames()));
            assert_eq!(u.gold.frames() as usize, u.scores.frames());
            assert!(u.scores.max_log_normalization_error() < 1e-9);
        }
        let count = |s| c.utterances.iter().filter(|u| u.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Dev), count(Split::Test)), (10, 5, 5));
    }

    #[test]
    fn very_sharp_scores_reveal_gold() {
        let c = generate(&SynthConfig {
            sharpness: 60.0,
            ..small(3)
        })
        .unwrap();
        for u in &c.utterances {
            assert_eq!(u.scores.argmax_labels(), u.gold.frame_labels());
        }
    }

    #[test]
    fn zero_strength_chain_is_uniform() {
        let c = generate(&SynthConfig {
            utterances: 800,
            train: 800,
            dev: 0,
            min_frames: 60,
            max_frames: 60,
            mean_segment: 2.0,
            ..Default::default()
        })
        .unwrap();
        let k = 5;
        let mut counts = vec![0usize; k * k];
        let mut n = 0;
        for u in &c.utterances {
            for w in u.gold.labels().windows(2) {
                counts[w[0].index() * k + w[1].index()] += 1;
                n += 1;
            }
        }
        assert!(n >= 10_000, "only {n} transitions");
        let p = 1.0 / (k * k) as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0, "count {c} of {n}");
        }
    }

    #[test]
    fn strong_chain_prefers_successor() {
        let c = generate(&SynthConfig {
            transition_strength: 3.0,
            ..small(7)
        })
        .unwrap();
        for row in &c.transitions {
            let max = row.iter().copied().fold(0.0, f64::max);
            assert!((max - 3f64.exp() / (3f64.exp() + 4.0)).abs() < 1e-12);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_configs_rejected() {
        assert!(generate(&SynthConfig { labels: 0, ..small(1) }).is_err());
        assert!(generate(&SynthConfig { train: 30, ..small(1) }).is_err());
        assert!(generate(&SynthConfig { sharpness: -1.0, ..small(1) }).is_err());
    }
}
