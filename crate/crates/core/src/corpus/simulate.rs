//! Multi-talker mixture simulation.
//!
//! Turns are placed one after another. Each new turn either starts after a
//! silence gap or is pulled back into the previous turn to create overlap;
//! the overlap amount is steered so the running ratio of overlapped to
//! speech frames tracks the configured target.

use std::ops::Range;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::bank::{gaussian, normalize, synth_speaker_bank, SpeakerPool};
use super::frontend::{downsample_labels, frontend};
use super::{CorpusError, NegativeEntry, SimConfig, Split};
use crate::autodiff::Tensor;
use crate::pse::FrameLabels;
use crate::seeding::rng_for;

/// One word of a mixture transcript with its span in output frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Word {
    pub token: usize,
    /// Label column of the speaker who said it.
    pub speaker: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub split: Split,
    pub index: usize,
    /// `T x input_dim` frontend output.
    pub features: Tensor,
    /// `T x k`, column `i` belonging to `speakers[i]`.
    pub labels: FrameLabels,
    /// Pool ids of the speakers in the mixture.
    pub speakers: Vec<usize>,
    /// One enrollment embedding per label column.
    pub enrollments: Vec<Vec<f64>>,
    /// Words in transcript order (by turn start, then position in turn).
    pub words: Vec<Word>,
    pub raw_frames: usize,
    pub speech_frames: usize,
    pub overlap_frames: usize,
}

impl MixtureSample {
    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Replaces each token by a different uniformly drawn one with
/// probability `rate`.
pub fn corrupt_tokens(tokens: &[usize], rate: f64, vocab_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    tokens
        .iter()
        .map(|&tok| {
            if vocab_size > 1 && rng.gen_bool(rate.clamp(0.0, 1.0)) {
                let r = rng.gen_range(0..vocab_size - 1);
                if r >= tok {
                    r + 1
                } else {
                    r
                }
            } else {
                tok
            }
        })
        .collect()
}

struct Turn {
    column: usize,
    start: usize,
    len: usize,
}

/// Deterministic mixture generator; everything derives from `config.seed`.
#[derive(Clone, Debug)]
pub struct Simulator {
    config: SimConfig,
    pool: SpeakerPool,
    /// `feature_dim x embedding_dim`, row-major.
    projection: Vec<f64>,
    lexicon: Vec<Vec<f64>>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, CorpusError> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "pool", 0);
        let pool = synth_speaker_bank(
            config.pool_speakers,
            config.embedding_dim,
            config.separation_rule(),
            config.enrollment_noise,
            &mut rng,
        )?;
        let mut rng = rng_for(config.seed, "projection", 0);
        let scale = 1.0 / (config.feature_dim as f64).sqrt();
        let projection = gaussian(&mut rng, config.feature_dim * config.embedding_dim)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        let mut rng = rng_for(config.seed, "lexicon", 0);
        let lexicon = (0..config.vocab_size)
            .map(|_| {
                let mut v = gaussian(&mut rng, config.lexical_dim);
                normalize(&mut v);
                v
            })
            .collect();
        Ok(Self {
            config,
            pool,
            projection,
            lexicon,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn pool(&self) -> &SpeakerPool {
        &self.pool
    }

    pub fn split_speakers(&self, split: Split) -> Range<usize> {
        let cut = self.config.pool_speakers - self.config.validation_speakers;
        match split {
            Split::Train => 0..cut,
            Split::Validation => cut..self.config.pool_speakers,
        }
    }

    /// Speaker-part feature vector of an embedding.
    pub fn signature(&self, embedding: &[f64]) -> Vec<f64> {
        let d = self.config.embedding_dim;
        self.projection
            .chunks(d)
            .map(|row| row.iter().zip(embedding).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// One enrollment per training speaker, used as negatives when
    /// padding training banks.
    pub fn negative_pool(&self) -> Vec<NegativeEntry> {
        self.split_speakers(Split::Train)
            .map(|s| {
                let mut rng = rng_for(self.config.seed, "negatives", s as u64);
                NegativeEntry {
                    speaker: s,
                    embedding: self.pool.enroll(s, &mut rng),
                }
            })
            .collect()
    }

    pub fn simulate_mixture(&self, split: Split, index: usize) -> Result<MixtureSample, CorpusError> {
        let mut rng = rng_for(self.config.seed, split.name(), index as u64);
        self.simulate_with(split, index, &mut rng)
    }

    pub fn simulate_with(
        &self,
        split: Split,
        index: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<MixtureSample, CorpusError> {
        let c = &self.config;
        let range = self.split_speakers(split);
        let k = rng.gen_range(c.num_speakers[0]..=c.num_speakers[1]);
        if k > range.len() {
            return Err(CorpusError::Config(format!(
                "{k} speakers requested from a split of {}",
                range.len()
            )));
        }
        let speakers: Vec<usize> = rand::seq::index::sample(rng, range.len(), k)
            .into_iter()
            .map(|i| range.start + i)
            .collect();
        let order = turn_order(k, c.turns_per_speaker, rng);

        // Frame activity counts and per-column flags on the raw timeline.
        let lead = rng.gen_range(c.edge_silence[0]..=c.edge_silence[1]);
        let mut active: Vec<Vec<bool>> = Vec::new();
        let mut counts: Vec<usize> = vec![0; lead];
        let mut turns = Vec::with_capacity(order.len());
        let (mut speech, mut overlap) = (0usize, 0usize);
        let mut prev_end = lead;
        for (i, &column) in order.iter().enumerate() {
            let len = rng.gen_range(c.turn_length[0]..=c.turn_length[1]);
            let mut start = None;
            if i > 0 && c.overlap_ratio > 0.0 {
                let r = c.overlap_ratio;
                let target = ((r * (speech + len) as f64 - overlap as f64) / (1.0 + r)).max(0.0);
                let draw = (rng.gen::<f64>() * 2.0 * target).round() as usize;
                let most = draw.min(len - 1).min(prev_end - lead);
                start = (1..=most).rev().map(|o| prev_end - o).find(|&s| {
                    (s..prev_end).all(|t| counts[t] < c.max_simultaneous && !active[t][column])
                });
            }
            let start = match start {
                Some(s) => s,
                None => prev_end + rng.gen_range(c.silence_gap[0]..=c.silence_gap[1]),
            };
            let end = start + len;
            if counts.len() < end {
                counts.resize(end, 0);
            }
            active.resize(counts.len(), vec![false; k]);
            for t in start..end {
                match counts[t] {
                    0 => speech += 1,
                    1 => overlap += 1,
                    _ => {}
                }
                counts[t] += 1;
                active[t][column] = true;
            }
            turns.push(Turn { column, start, len });
            prev_end = end;
        }
        let trail = rng.gen_range(c.edge_silence[0]..=c.edge_silence[1]);
        let raw_frames = prev_end + trail;
        active.resize(raw_frames, vec![false; k]);

        // Words with uniform spans inside each turn.
        turns.sort_by_key(|t| t.start);
        let mut raw_words = Vec::new();
        for turn in &turns {
            let nw = (turn.len / c.frames_per_word).max(1);
            for j in 0..nw {
                raw_words.push(Word {
                    token: rng.gen_range(0..c.vocab_size),
                    speaker: turn.column,
                    start: turn.start + j * turn.len / nw,
                    end: turn.start + (j + 1) * turn.len / nw,
                });
            }
        }

        let width = c.feature_dim + c.lexical_dim;
        let signatures: Vec<Vec<f64>> = speakers.iter().map(|&s| self.signature(&self.pool.means[s])).collect();
        let mut raw = vec![0.0; raw_frames * width];
        for (t, row) in active.iter().enumerate() {
            for (n, &on) in row.iter().enumerate() {
                if on {
                    raw[t * width..t * width + c.feature_dim]
                        .iter_mut()
                        .zip(&signatures[n])
                        .for_each(|(x, s)| *x += s);
                }
            }
        }
        if c.lexical_dim > 0 {
            for w in &raw_words {
                for t in w.start..w.end {
                    raw[t * width + c.feature_dim..(t + 1) * width]
                        .iter_mut()
                        .zip(&self.lexicon[w.token])
                        .for_each(|(x, l)| *x += l);
                }
            }
        }
        if c.feature_noise > 0.0 {
            for (x, z) in raw.iter_mut().zip(gaussian(rng, raw_frames * width)) {
                *x += c.feature_noise * z;
            }
        }
        let enrollments = speakers.iter().map(|&s| self.pool.enroll(s, rng)).collect();

        let raw = Tensor::matrix(raw_frames, width, raw).map_err(|e| CorpusError::Format(e.to_string()))?;
        let features = frontend(&raw, c.context, c.stride);
        let raw_labels = FrameLabels::from_flat(
            raw_frames,
            k,
            active.iter().flatten().map(|&b| b as u8).collect(),
        )
        .expect("binary labels");
        let labels = downsample_labels(&raw_labels, c.stride);
        let frames = labels.frames();
        let words = raw_words
            .into_iter()
            .map(|w| {
                let start = w.start / c.stride;
                Word {
                    start,
                    end: w.end.div_ceil(c.stride).clamp(start + 1, frames),
                    ..w
                }
            })
            .collect();
        Ok(MixtureSample {
            split,
            index,
            features,
            labels,
            speakers,
            enrollments,
            words,
            raw_frames,
            speech_frames: speech,
            overlap_frames: overlap,
        })
    }

    /// Closed-form decoder that knows the simulator's projection: for each
    /// frame, picks the subset of at most `max_overlap` sample speakers
    /// whose summed enrollment signatures are nearest to the centre
    /// frame's speaker features. Ties go to the earlier subset in PSE
    /// class order.
    pub fn oracle_decode(&self, sample: &MixtureSample, max_overlap: usize) -> FrameLabels {
        let c = &self.config;
        let k = sample.num_speakers();
        let table = crate::pse::build_valid_table(max_overlap.min(k), k).expect("valid table");
        let sigs: Vec<Vec<f64>> = sample.enrollments.iter().map(|e| self.signature(e)).collect();
        let patterns: Vec<Vec<f64>> = (0..table.len())
            .map(|class| {
                let on = table.class_activity(class).expect("class in range");
                let mut p = vec![0.0; c.feature_dim];
                for (n, &a) in on.iter().enumerate() {
                    if a {
                        p.iter_mut().zip(&sigs[n]).for_each(|(x, s)| *x += s);
                    }
                }
                p
            })
            .collect();
        let offset = c.context * (c.feature_dim + c.lexical_dim);
        let classes: Vec<usize> = (0..sample.frames())
            .map(|t| {
                let x = &sample.features.row(t)[offset..offset + c.feature_dim];
                let mut best = (f64::INFINITY, 0);
                for (class, p) in patterns.iter().enumerate() {
                    let d: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, class);
                    }
                }
                best.1
            })
            .collect();
        crate::pse::classes_to_labels(&classes, &table).expect("classes from table")
    }
}

/// Turn sequence over `k` speakers, avoiding back-to-back turns by the
/// same speaker whenever another speaker still has turns left.
fn turn_order(k: usize, per_speaker: [usize; 2], rng: &mut impl Rng) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..k).map(|_| rng.gen_range(per_speaker[0]..=per_speaker[1])).collect();
    let mut order = Vec::new();
    let mut last: Option<usize> = None;
    while remaining.iter().any(|&r| r > 0) {
        let others: Vec<usize> = (0..k).map(|i| if Some(i) == last { 0 } else { remaining[i] }).collect();
        let weights = if others.iter().any(|&w| w > 0) { others } else { remaining.clone() };
        let pick = WeightedIndex::new(&weights).expect("positive weight").sample(rng);
        remaining[pick] -= 1;
        order.push(pick);
        last = Some(pick);
    }
    order
}
