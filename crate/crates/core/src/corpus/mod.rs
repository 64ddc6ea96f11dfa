//! Simulated multi-talker data: speaker embeddings, mixtures with frame
//! labels and word spans, the stacking frontend, dataset files and RTTM.

mod bank;
mod dataset;
mod frontend;
mod rttm;
mod simulate;

pub use bank::{synth_speaker_bank, Separation, SpeakerPool};
pub use dataset::{Dataset, Manifest, ManifestEntry, ManifestSummary, NegativeEntry};
pub use frontend::{downsample_labels, frontend};
pub use rttm::{frame_labels_to_rttm, rttm_emit, rttm_parse, rttm_to_frame_labels, RttmSegment};
pub use simulate::{corrupt_tokens, MixtureSample, Simulator, Word};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("RTTM line {line}: {msg}")]
    Rttm { line: usize, msg: String },
    #[error("speaker {0:?} not in the speaker order")]
    UnknownSpeaker(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Simulation settings. Lengths and gaps are in raw frames (before the
/// frontend subsamples them); ranges are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    /// Speakers in the pool; the last `validation_speakers` are held out.
    pub pool_speakers: usize,
    pub validation_speakers: usize,
    pub embedding_dim: usize,
    /// Margin `s`: speaker means have pairwise cosine at most `1 / (1 + s)`.
    pub separation: f64,
    /// Orthonormal means instead of the margin rule.
    pub orthogonal: bool,
    pub enrollment_noise: f64,
    pub num_speakers: [usize; 2],
    pub max_simultaneous: usize,
    pub turns_per_speaker: [usize; 2],
    pub turn_length: [usize; 2],
    pub silence_gap: [usize; 2],
    pub edge_silence: [usize; 2],
    /// Target fraction of speech frames with two or more speakers.
    pub overlap_ratio: f64,
    /// Dimension of the speaker part of a raw frame.
    pub feature_dim: usize,
    /// Dimension of the word-content part of a raw frame (0 disables it).
    pub lexical_dim: usize,
    pub feature_noise: f64,
    pub vocab_size: usize,
    pub frames_per_word: usize,
    pub context: usize,
    pub stride: usize,
    /// Raw frame shift in seconds, used when writing RTTM.
    pub frame_shift: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_samples: 200,
            validation_samples: 40,
            pool_speakers: 60,
            validation_speakers: 12,
            embedding_dim: 16,
            separation: 1.0,
            orthogonal: false,
            enrollment_noise: 0.05,
            num_speakers: [2, 4],
            max_simultaneous: 2,
            turns_per_speaker: [1, 2],
            turn_length: [20, 50],
            silence_gap: [2, 12],
            edge_silence: [4, 10],
            overlap_ratio: 0.2,
            feature_dim: 16,
            lexical_dim: 0,
            feature_noise: 0.1,
            vocab_size: 32,
            frames_per_word: 8,
            context: 2,
            stride: 2,
            frame_shift: 0.01,
        }
    }
}

fn check_range(name: &str, r: [usize; 2], min: usize) -> Result<(), CorpusError> {
    if r[0] > r[1] {
        return Err(CorpusError::Config(format!("{name}: min {} above max {}", r[0], r[1])));
    }
    if r[0] < min {
        return Err(CorpusError::Config(format!("{name}: min must be at least {min}")));
    }
    Ok(())
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        check_range("num_speakers", self.num_speakers, 1)?;
        check_range("turns_per_speaker", self.turns_per_speaker, 1)?;
        check_range("turn_length", self.turn_length, 1)?;
        check_range("silence_gap", self.silence_gap, 0)?;
        check_range("edge_silence", self.edge_silence, 1)?;
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if 2 * self.edge_silence[0] < self.stride {
            return bad(format!(
                "edge silence {} is too short to survive stride {}",
                self.edge_silence[0], self.stride
            ));
        }
        if self.validation_speakers >= self.pool_speakers {
            return bad("validation speakers must leave some training speakers".into());
        }
        let train_pool = self.pool_speakers - self.validation_speakers;
        if self.num_speakers[1] > train_pool.min(self.validation_speakers) {
            return bad(format!(
                "{} speakers per mixture need that many speakers in each split",
                self.num_speakers[1]
            ));
        }
        if self.max_simultaneous == 0 {
            return bad("max_simultaneous must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return bad(format!("overlap ratio {} outside [0, 1)", self.overlap_ratio));
        }
        if self.overlap_ratio > 0.0 && self.max_simultaneous < 2 {
            return bad("overlap requested but max_simultaneous is 1".into());
        }
        if self.embedding_dim == 0 || self.feature_dim == 0 {
            return bad("embedding and feature dims must be positive".into());
        }
        if !(self.orthogonal || self.separation > 0.0) {
            return bad(format!("separation must be positive, got {}", self.separation));
        }
        if !(self.feature_noise >= 0.0 && self.enrollment_noise >= 0.0) {
            return bad("noise scales must be nonnegative".into());
        }
        if self.vocab_size == 0 || self.frames_per_word == 0 {
            return bad("vocab size and frames per word must be positive".into());
        }
        if !(self.frame_shift > 0.0) {
            return bad("frame shift must be positive".into());
        }
        Ok(())
    }

    pub fn separation_rule(&self) -> Separation {
        if self.orthogonal {
            Separation::Orthogonal
        } else {
            Separation::Margin(self.separation)
        }
    }

    /// Width of a frame after the frontend.
    pub fn input_dim(&self) -> usize {
        (2 * self.context + 1) * (self.feature_dim + self.lexical_dim)
    }

    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let c: Self = toml::from_str(text).map_err(|e| CorpusError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
