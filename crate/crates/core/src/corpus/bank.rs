//! Synthetic speaker embeddings standing in for an x-vector extractor.

use rand::Rng;
use rand_distr::StandardNormal;

use super::CorpusError;

/// How far apart speaker means are placed.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Separation {
    /// Orthonormal means; needs `dim >= num_speakers`.
    Orthogonal,
    /// Random unit means with pairwise cosine at most `1 / (1 + s)`.
    Margin(f64),
}

impl Separation {
    pub fn cosine_bound(self) -> f64 {
        match self {
            Separation::Orthogonal => 0.0,
            Separation::Margin(s) => 1.0 / (1.0 + s),
        }
    }
}

/// Per-speaker mean embeddings plus the enrollment noise model.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerPool {
    pub means: Vec<Vec<f64>>,
    pub enrollment_noise: f64,
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MAX_ATTEMPTS: usize = 10_000;

pub fn synth_speaker_bank(
    num_speakers: usize,
    dim: usize,
    separation: Separation,
    enrollment_noise: f64,
    rng: &mut impl Rng,
) -> Result<SpeakerPool, CorpusError> {
    if dim == 0 {
        return Err(CorpusError::Config("embedding dim must be positive".into()));
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_speakers);
    match separation {
        Separation::Orthogonal => {
            if dim < num_speakers {
                return Err(CorpusError::Config(format!(
                    "{num_speakers} orthogonal speakers need dim >= {num_speakers}, got {dim}"
                )));
            }
            // Gram-Schmidt over Gaussian draws.
            while means.len() < num_speakers {
                let mut v = gaussian(rng, dim);
                for m in &means {
                    let p = dot(&v, m);
                    v.iter_mut().zip(m).for_each(|(x, y)| *x -= p * y);
                }
                if v.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
                    continue;
                }
                normalize(&mut v);
                means.push(v);
            }
        }
        Separation::Margin(s) => {
            if !(s > 0.0) {
                return Err(CorpusError::Config(format!("separation must be positive, got {s}")));
            }
            let bound = separation.cosine_bound();
            let mut attempts = 0;
            while means.len() < num_speakers {
                attempts += 1;
                if attempts > MAX_ATTEMPTS * num_speakers.max(1) {
                    return Err(CorpusError::Config(format!(
                        "could not place {num_speakers} speakers in {dim} dims with cosine <= {bound:.3}"
                    )));
                }
                let mut v = gaussian(rng, dim);
                normalize(&mut v);
                if means.iter().all(|m| dot(m, &v) <= bound) {
                    means.push(v);
                }
            }
        }
    }
    Ok(SpeakerPool {
        means,
        enrollment_noise,
    })
}

impl SpeakerPool {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map(Vec::len).unwrap_or(0)
    }

    /// One enrollment: the speaker mean plus isotropic noise, renormalized.
    pub fn enroll(&self, speaker: usize, rng: &mut impl Rng) -> Vec<f64> {
        let mut v = self.means[speaker].clone();
        if self.enrollment_noise > 0.0 {
            for x in v.iter_mut() {
                *x += self.enrollment_noise * rng.sample::<f64, _>(StandardNormal);
            }
            normalize(&mut v);
        }
        v
    }
}
