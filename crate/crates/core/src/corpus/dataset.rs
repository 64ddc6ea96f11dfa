//! Simulated dataset directories.
//!
//! ```text
//! <dir>/config.toml         resolved simulation config
//! <dir>/manifest.toml       counts, overlap statistics, one entry per sample
//! <dir>/negatives.bin       enrollments of training speakers
//! <dir>/train/000000.bin    one record per sample
//! <dir>/validation/...
//! ```
//!
//! Records are little-endian: an 8-byte magic, `u64` shape fields, then
//! `f64` features and embeddings, `u8` labels and `u64` word fields.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, MixtureSample, SimConfig, Simulator, Split, Word};
use crate::autodiff::Tensor;
use crate::pse::FrameLabels;

const SAMPLE_MAGIC: &[u8; 8] = b"SENDMIX1";
const NEGATIVE_MAGIC: &[u8; 8] = b"SENDNEG1";

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeEntry {
    pub speaker: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub seed: u64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub frames: usize,
    pub speech_frames: usize,
    pub overlap_frames: usize,
    pub overlap_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub file: String,
    pub frames: usize,
    pub raw_frames: usize,
    pub speakers: usize,
    pub words: usize,
    pub speech_frames: usize,
    pub overlap_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub summary: ManifestSummary,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SimConfig,
    pub train: Vec<MixtureSample>,
    pub validation: Vec<MixtureSample>,
    pub negatives: Vec<NegativeEntry>,
}

fn sample_file(split: Split, index: usize) -> String {
    format!("{}/{index:06}.bin", split.name())
}

impl Dataset {
    pub fn generate(config: &SimConfig) -> Result<Self, CorpusError> {
        let sim = Simulator::new(config.clone())?;
        Self::generate_with(&sim)
    }

    pub fn generate_with(sim: &Simulator) -> Result<Self, CorpusError> {
        let c = sim.config();
        let train = (0..c.train_samples)
            .map(|i| sim.simulate_mixture(Split::Train, i))
            .collect::<Result<_, _>>()?;
        let validation = (0..c.validation_samples)
            .map(|i| sim.simulate_mixture(Split::Validation, i))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            config: c.clone(),
            train,
            validation,
            negatives: sim.negative_pool(),
        })
    }

    pub fn samples(&self, split: Split) -> &[MixtureSample] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let samples: Vec<ManifestEntry> = self
            .train
            .iter()
            .chain(&self.validation)
            .map(|m| ManifestEntry {
                split: m.split,
                index: m.index,
                file: sample_file(m.split, m.index),
                frames: m.frames(),
                raw_frames: m.raw_frames,
                speakers: m.num_speakers(),
                words: m.words.len(),
                speech_frames: m.speech_frames,
                overlap_frames: m.overlap_frames,
            })
            .collect();
        let speech: usize = samples.iter().map(|e| e.speech_frames).sum();
        let overlap: usize = samples.iter().map(|e| e.overlap_frames).sum();
        Manifest {
            summary: ManifestSummary {
                seed: self.config.seed,
                train_samples: self.train.len(),
                validation_samples: self.validation.len(),
                frames: samples.iter().map(|e| e.raw_frames).sum(),
                speech_frames: speech,
                overlap_frames: overlap,
                overlap_ratio: if speech == 0 { 0.0 } else { overlap as f64 / speech as f64 },
            },
            samples,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir.join(Split::Train.name()))?;
        fs::create_dir_all(dir.join(Split::Validation.name()))?;
        fs::write(dir.join("config.toml"), self.config.to_toml())?;
        let manifest = toml::to_string(&self.manifest()).map_err(|e| CorpusError::Format(e.to_string()))?;
        fs::write(dir.join("manifest.toml"), manifest)?;
        fs::write(dir.join("negatives.bin"), encode_negatives(&self.negatives))?;
        for m in self.train.iter().chain(&self.validation) {
            fs::write(dir.join(sample_file(m.split, m.index)), encode_sample(m))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CorpusError> {
        let config = SimConfig::from_toml(&fs::read_to_string(dir.join("config.toml"))?)?;
        let manifest: Manifest = toml::from_str(&fs::read_to_string(dir.join("manifest.toml"))?)
            .map_err(|e| CorpusError::Format(format!("manifest: {e}")))?;
        let negatives = decode_negatives(&fs::read(dir.join("negatives.bin"))?)?;
        let (mut train, mut validation) = (Vec::new(), Vec::new());
        for entry in &manifest.samples {
            let bytes = fs::read(dir.join(&entry.file))?;
            let m = decode_sample(&bytes, entry.split, entry.index)
                .map_err(|e| CorpusError::Format(format!("{}: {e}", entry.file)))?;
            match entry.split {
                Split::Train => train.push(m),
                Split::Validation => validation.push(m),
            }
        }
        Ok(Self {
            config,
            train,
            validation,
            negatives,
        })
    }
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_sample(m: &MixtureSample) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SAMPLE_MAGIC);
    let emb_dim = m.enrollments.first().map(Vec::len).unwrap_or(0);
    for v in [
        m.frames(),
        m.features.cols(),
        m.num_speakers(),
        emb_dim,
        m.words.len(),
        m.raw_frames,
        m.speech_frames,
        m.overlap_frames,
    ] {
        put_u64(&mut out, v);
    }
    for &s in &m.speakers {
        put_u64(&mut out, s);
    }
    put_f64s(&mut out, m.features.data());
    out.extend_from_slice(m.labels.as_flat());
    for e in &m.enrollments {
        put_f64s(&mut out, e);
    }
    for w in &m.words {
        for v in [w.token, w.speaker, w.start, w.end] {
            put_u64(&mut out, v);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], String> {
        if self.bytes.len() < n {
            return Err("truncated record".into());
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<usize, String> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        usize::try_from(u64::from_le_bytes(b)).map_err(|e| e.to_string())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(8).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<(), String> {
        let mut m = [0u8; 8];
        self.take(8)?.read_exact(&mut m).expect("8 bytes");
        if &m != expected {
            return Err("bad magic".into());
        }
        Ok(())
    }
}

fn decode_sample(bytes: &[u8], split: Split, index: usize) -> Result<MixtureSample, String> {
    let mut r = Reader { bytes };
    r.magic(SAMPLE_MAGIC)?;
    let frames = r.u64()?;
    let dim = r.u64()?;
    let k = r.u64()?;
    let emb_dim = r.u64()?;
    let num_words = r.u64()?;
    let raw_frames = r.u64()?;
    let speech_frames = r.u64()?;
    let overlap_frames = r.u64()?;
    let speakers = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
    let features = Tensor::matrix(frames, dim, r.f64s(frames * dim)?).map_err(|e| e.to_string())?;
    let labels = FrameLabels::from_flat(frames, k, r.take(frames * k)?.to_vec()).map_err(|e| e.to_string())?;
    let enrollments = (0..k).map(|_| r.f64s(emb_dim)).collect::<Result<Vec<_>, _>>()?;
    let mut words = Vec::with_capacity(num_words);
    for _ in 0..num_words {
        let (token, speaker, start, end) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        if speaker >= k || start >= end || end > frames {
            return Err("word outside the sample".into());
        }
        words.push(Word {
            token,
            speaker,
            start,
            end,
        });
    }
    if !r.bytes.is_empty() {
        return Err("trailing bytes".into());
    }
    Ok(MixtureSample {
        split,
        index,
        features,
        labels,
        speakers,
        enrollments,
        words,
        raw_frames,
        speech_frames,
        overlap_frames,
    })
}

fn encode_negatives(negatives: &[NegativeEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(NEGATIVE_MAGIC);
    put_u64(&mut out, negatives.len());
    put_u64(&mut out, negatives.first().map(|n| n.embedding.len()).unwrap_or(0));
    for n in negatives {
        put_u64(&mut out, n.speaker);
        put_f64s(&mut out, &n.embedding);
    }
    out
}

fn decode_negatives(bytes: &[u8]) -> Result<Vec<NegativeEntry>, CorpusError> {
    let parse = || -> Result<Vec<NegativeEntry>, String> {
        let mut r = Reader { bytes };
        r.magic(NEGATIVE_MAGIC)?;
        let count = r.u64()?;
        let dim = r.u64()?;
        let out = (0..count)
            .map(|_| {
                Ok(NegativeEntry {
                    speaker: r.u64()?,
                    embedding: r.f64s(dim)?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        if !r.bytes.is_empty() {
            return Err("trailing bytes".into());
        }
        Ok(out)
    };
    parse().map_err(|e| CorpusError::Format(format!("negatives.bin: {e}")))
}
