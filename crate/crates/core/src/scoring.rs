//! Frame-level diarization error rate and word-level attribution error.
//!
//! Hypothesis columns are assumed to be aligned with the reference (the
//! model emits labels in bank order). [`der_hungarian`] first finds the
//! column mapping for externally produced hypotheses.

use std::fmt;
use std::ops::Add;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pse::FrameLabels;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("shape mismatch: reference {0:?}, hypothesis {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("no scored frames (every reference frame is overlapped)")]
    EmptyScoredRegion,
    #[error("reference has no speech in the scored region")]
    NoReferenceSpeech,
    #[error("word lists differ in length: {0} vs {1}")]
    WordCount(usize, usize),
    #[error("empty word list")]
    NoWords,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerMode {
    Full,
    /// Frames where the reference has two or more speakers are not scored.
    IgnoreOverlap,
}

impl DerMode {
    pub fn name(self) -> &'static str {
        match self {
            DerMode::Full => "full",
            DerMode::IgnoreOverlap => "ignore_overlap",
        }
    }
}

/// Raw speaker-frame error counts; add them up across recordings and call
/// [`DerCounts::report`] for a corpus-level score.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct DerCounts {
    pub miss: usize,
    pub false_alarm: usize,
    pub confusion: usize,
    /// Reference speaker-frames in the scored region.
    pub reference: usize,
    pub scored_frames: usize,
}

impl Add for DerCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            miss: self.miss + o.miss,
            false_alarm: self.false_alarm + o.false_alarm,
            confusion: self.confusion + o.confusion,
            reference: self.reference + o.reference,
            scored_frames: self.scored_frames + o.scored_frames,
        }
    }
}

impl DerCounts {
    pub fn report(&self, mode: DerMode) -> Result<DerReport, ScoringError> {
        if self.scored_frames == 0 {
            return Err(ScoringError::EmptyScoredRegion);
        }
        if self.reference == 0 {
            return Err(ScoringError::NoReferenceSpeech);
        }
        let r = self.reference as f64;
        let (miss, false_alarm, confusion) = (
            self.miss as f64 / r,
            self.false_alarm as f64 / r,
            self.confusion as f64 / r,
        );
        Ok(DerReport {
            mode,
            der: miss + false_alarm + confusion,
            miss,
            false_alarm,
            confusion,
            scored_frames: self.scored_frames,
            reference_speech: self.reference,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerReport {
    pub mode: DerMode,
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_frames: usize,
    pub reference_speech: usize,
}

impl DerReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for DerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "DER ({}) {:.2}%  miss {:.2}%  false alarm {:.2}%  confusion {:.2}%  scored frames {}",
            self.mode.name(),
            100.0 * self.der,
            100.0 * self.miss,
            100.0 * self.false_alarm,
            100.0 * self.confusion,
            self.scored_frames
        )
    }
}

fn check_shapes(reference: &FrameLabels, hyp: &FrameLabels) -> Result<(), ScoringError> {
    if reference.frames() != hyp.frames() || reference.speakers() != hyp.speakers() {
        return Err(ScoringError::Shape(
            (reference.frames(), reference.speakers()),
            (hyp.frames(), hyp.speakers()),
        ));
    }
    Ok(())
}

pub fn der_counts(reference: &FrameLabels, hyp: &FrameLabels, mode: DerMode) -> Result<DerCounts, ScoringError> {
    check_shapes(reference, hyp)?;
    let mut c = DerCounts::default();
    for t in 0..reference.frames() {
        let nr = reference.active_count(t);
        if mode == DerMode::IgnoreOverlap && nr >= 2 {
            continue;
        }
        let nh = hyp.active_count(t);
        let correct = reference
            .row(t)
            .iter()
            .zip(hyp.row(t))
            .filter(|(&r, &h)| r == 1 && h == 1)
            .count();
        c.scored_frames += 1;
        c.reference += nr;
        c.miss += nr.saturating_sub(nh);
        c.false_alarm += nh.saturating_sub(nr);
        c.confusion += nr.min(nh) - correct;
    }
    Ok(c)
}

pub fn der(reference: &FrameLabels, hyp: &FrameLabels, mode: DerMode) -> Result<DerReport, ScoringError> {
    der_counts(reference, hyp, mode)?.report(mode)
}

/// Independent per-frame computation: enumerates every pairing of active
/// reference and hypothesis speakers and keeps the one with the most
/// same-speaker pairs. Exponential; meant for tests.
pub fn der_bruteforce_oracle(
    reference: &FrameLabels,
    hyp: &FrameLabels,
    mode: DerMode,
) -> Result<DerReport, ScoringError> {
    check_shapes(reference, hyp)?;
    let mut c = DerCounts::default();
    for t in 0..reference.frames() {
        let rs: Vec<usize> = (0..reference.speakers()).filter(|&n| reference.get(t, n)).collect();
        let hs: Vec<usize> = (0..hyp.speakers()).filter(|&n| hyp.get(t, n)).collect();
        if mode == DerMode::IgnoreOverlap && rs.len() >= 2 {
            continue;
        }
        c.scored_frames += 1;
        c.reference += rs.len();
        let (mut best_pairs, mut best_correct) = (0, 0);
        best_pairing(&rs, &hs, &mut vec![false; hs.len()], 0, 0, &mut best_pairs, &mut best_correct);
        c.miss += rs.len() - best_pairs;
        c.false_alarm += hs.len() - best_pairs;
        c.confusion += best_pairs - best_correct;
    }
    c.report(mode)
}

// Pairs as many speakers as possible, then maximizes correct pairs.
fn best_pairing(
    rs: &[usize],
    hs: &[usize],
    used: &mut Vec<bool>,
    pairs: usize,
    correct: usize,
    best_pairs: &mut usize,
    best_correct: &mut usize,
) {
    let Some((&r, rest)) = rs.split_first() else {
        if (pairs, correct) > (*best_pairs, *best_correct) {
            *best_pairs = pairs;
            *best_correct = correct;
        }
        return;
    };
    best_pairing(rest, hs, used, pairs, correct, best_pairs, best_correct);
    for j in 0..hs.len() {
        if !used[j] {
            used[j] = true;
            let ok = (hs[j] == r) as usize;
            best_pairing(rest, hs, used, pairs + 1, correct + ok, best_pairs, best_correct);
            used[j] = false;
        }
    }
}

/// One-to-one mapping from hypothesis columns to reference columns that
/// maximizes co-active frames. `None` marks hypothesis speakers left
/// unmatched because the reference has fewer speakers.
pub fn optimal_mapping(reference: &FrameLabels, hyp: &FrameLabels) -> Result<Vec<Option<usize>>, ScoringError> {
    if reference.frames() != hyp.frames() {
        return Err(ScoringError::Shape(
            (reference.frames(), reference.speakers()),
            (hyp.frames(), hyp.speakers()),
        ));
    }
    let size = reference.speakers().max(hyp.speakers());
    if size == 0 {
        return Ok(Vec::new());
    }
    let mut weights = Matrix::new(size, size, 0i64);
    for t in 0..reference.frames() {
        for h in 0..hyp.speakers() {
            if hyp.get(t, h) {
                for r in 0..reference.speakers() {
                    if reference.get(t, r) {
                        weights[(h, r)] += 1;
                    }
                }
            }
        }
    }
    let (_, assignment) = kuhn_munkres(&weights);
    Ok(assignment
        .into_iter()
        .take(hyp.speakers())
        .map(|r| (r < reference.speakers()).then_some(r))
        .collect())
}

/// Error counts after relabeling hypothesis columns with
/// [`optimal_mapping`]; the speaker counts may differ.
pub fn der_counts_hungarian(
    reference: &FrameLabels,
    hyp: &FrameLabels,
    mode: DerMode,
) -> Result<DerCounts, ScoringError> {
    let mapping = optimal_mapping(reference, hyp)?;
    let width = reference.speakers().max(hyp.speakers());
    let mut extra = reference.speakers();
    let slots: Vec<usize> = mapping
        .iter()
        .map(|m| {
            m.unwrap_or_else(|| {
                extra += 1;
                extra - 1
            })
        })
        .collect();
    let all: Vec<usize> = (0..reference.speakers()).collect();
    der_counts(
        &reference.scatter_columns(&all, width),
        &hyp.scatter_columns(&slots, width),
        mode,
    )
}

pub fn der_hungarian(reference: &FrameLabels, hyp: &FrameLabels, mode: DerMode) -> Result<DerReport, ScoringError> {
    der_counts_hungarian(reference, hyp, mode)?.report(mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WderReport {
    pub wder: f64,
    pub total_words: usize,
    pub wrong_words: usize,
}

impl WderReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for WderReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "wDER {:.2}%  wrong words {} of {}",
            100.0 * self.wder,
            self.wrong_words,
            self.total_words
        )
    }
}

pub fn wder<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WderReport, ScoringError> {
    if reference.len() != hyp.len() {
        return Err(ScoringError::WordCount(reference.len(), hyp.len()));
    }
    if reference.is_empty() {
        return Err(ScoringError::NoWords);
    }
    let wrong = reference.iter().zip(hyp).filter(|(a, b)| a != b).count();
    Ok(WderReport {
        wder: wrong as f64 / reference.len() as f64,
        total_words: reference.len(),
        wrong_words: wrong,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(rows: &[&[u8]]) -> FrameLabels {
        FrameLabels::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random_labels(rng: &mut impl Rng, t: usize, n: usize, p: f64) -> FrameLabels {
        FrameLabels::from_flat(t, n, (0..t * n).map(|_| rng.gen_bool(p) as u8).collect()).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let r = labels(&[&[1, 0], &[1, 1], &[0, 0]]);
        for mode in [DerMode::Full, DerMode::IgnoreOverlap] {
            assert_eq!(der(&r, &r, mode).unwrap().der, 0.0);
        }
    }

    #[test]
    fn one_missed_frame_of_ten() {
        let r = FrameLabels::from_flat(10, 1, vec![1; 10]).unwrap();
        let mut h = r.clone();
        h.set(9, 0, false);
        let rep = der(&r, &h, DerMode::Full).unwrap();
        assert!((rep.der - 0.1).abs() < 1e-12);
        assert!((rep.miss - 0.1).abs() < 1e-12);
        assert_eq!((rep.false_alarm, rep.confusion), (0.0, 0.0));
        assert_eq!(rep, der_bruteforce_oracle(&r, &h, DerMode::Full).unwrap());
    }

    #[test]
    fn degenerate_inputs() {
        let overlap = labels(&[&[1, 1], &[1, 1]]);
        assert_eq!(der(&overlap, &overlap, DerMode::IgnoreOverlap), Err(ScoringError::EmptyScoredRegion));
        let silent = labels(&[&[0, 0]]);
        assert_eq!(der(&silent, &silent, DerMode::Full), Err(ScoringError::NoReferenceSpeech));
        assert!(matches!(der(&silent, &overlap, DerMode::Full), Err(ScoringError::Shape(..))));
    }

    #[test]
    fn spurious_speakers_push_der_above_one() {
        let r = labels(&[&[1, 0, 0, 0], &[1, 0, 0, 0]]);
        let h = labels(&[&[1, 1, 1, 1], &[1, 1, 1, 1]]);
        let rep = der(&r, &h, DerMode::Full).unwrap();
        assert!((rep.der - 3.0).abs() < 1e-12);
        assert_eq!(rep.der, rep.false_alarm);
    }

    #[test]
    fn confusion_counts_wrong_speaker() {
        let r = labels(&[&[1, 0, 0], &[1, 1, 0]]);
        let h = labels(&[&[0, 1, 0], &[1, 0, 1]]);
        let rep = der(&r, &h, DerMode::Full).unwrap();
        assert_eq!(rep.reference_speech, 3);
        assert!((rep.confusion - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rep.miss + rep.false_alarm, 0.0);
        let ign = der(&r, &h, DerMode::IgnoreOverlap).unwrap();
        assert_eq!((ign.scored_frames, ign.reference_speech), (1, 1));
        assert_eq!(ign.der, 1.0);
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 1000 {
            let t = rng.gen_range(1..=50);
            let n = rng.gen_range(1..=5);
            let (pr, ph) = (rng.gen_range(0.1..0.6), rng.gen_range(0.0..0.7));
            let r = random_labels(&mut rng, t, n, pr);
            let h = random_labels(&mut rng, t, n, ph);
            for mode in [DerMode::Full, DerMode::IgnoreOverlap] {
                match (der(&r, &h, mode), der_bruteforce_oracle(&r, &h, mode)) {
                    (Ok(a), Ok(b)) => {
                        for (x, y) in [(a.der, b.der), (a.miss, b.miss), (a.false_alarm, b.false_alarm), (a.confusion, b.confusion)] {
                            assert!((x - y).abs() < 1e-12);
                        }
                        assert!((a.der - (a.miss + a.false_alarm + a.confusion)).abs() < 1e-9);
                    }
                    (Err(a), Err(b)) => assert_eq!(a, b),
                    other => panic!("{other:?}"),
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn ignore_equals_full_without_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let t = rng.gen_range(2..40);
            let n = rng.gen_range(1..5);
            let mut r = FrameLabels::zeros(t, n);
            for f in 0..t {
                if rng.gen_bool(0.7) {
                    r.set(f, rng.gen_range(0..n), true);
                }
            }
            if r.active_count(0) == 0 {
                r.set(0, 0, true);
            }
            let h = random_labels(&mut rng, t, n, 0.3);
            assert_eq!(der(&r, &h, DerMode::Full).unwrap().der, der(&r, &h, DerMode::IgnoreOverlap).unwrap().der);
        }
    }

    #[test]
    fn hungarian_recovers_permuted_hypothesis() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let n = rng.gen_range(1..=5);
            let r = random_labels(&mut rng, 30, n, 0.4);
            let mut order: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let h = r.permute_columns(&order);
            if der(&r, &r, DerMode::Full).is_err() {
                continue;
            }
            assert_eq!(der_hungarian(&r, &h, DerMode::Full).unwrap().der, 0.0);
        }
    }

    #[test]
    fn hungarian_is_the_best_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let n = rng.gen_range(1..=4);
            let r = random_labels(&mut rng, 20, n, 0.4);
            let h = random_labels(&mut rng, 20, n, 0.4);
            let Ok(hung) = der_hungarian(&r, &h, DerMode::Full) else { continue };
            let best = (0..n)
                .permutations(n)
                .map(|p| der(&r, &h.permute_columns(&p), DerMode::Full).unwrap().der)
                .fold(f64::INFINITY, f64::min);
            assert!((hung.der - best).abs() < 1e-12);
        }
    }

    #[test]
    fn hungarian_with_extra_hypothesis_speaker() {
        let r = labels(&[&[1], &[1], &[0]]);
        let h = labels(&[&[0, 1], &[0, 1], &[1, 0]]);
        let rep = der_hungarian(&r, &h, DerMode::Full).unwrap();
        assert_eq!(rep.der, 0.5);
        assert_eq!(optimal_mapping(&r, &h).unwrap(), vec![None, Some(0)]);
    }

    #[test]
    fn wder_examples() {
        assert_eq!(wder(&[1, 2, 2], &[1, 2, 2]).unwrap().wder, 0.0);
        let r = wder(&[1, 1, 2, 2], &[1, 2, 2, 2]).unwrap();
        assert_eq!((r.wder, r.wrong_words, r.total_words), (0.25, 1, 4));
        assert_eq!(wder(&[1, 2], &[2, 1]).unwrap().wder, 1.0);
        assert_eq!(wder::<usize>(&[], &[]), Err(ScoringError::NoWords));
        assert_eq!(wder(&[1], &[1, 2]), Err(ScoringError::WordCount(1, 2)));
    }

    #[test]
    fn report_formats() {
        let r = FrameLabels::from_flat(10, 1, vec![1; 10]).unwrap();
        let h = FrameLabels::from_flat(10, 1, [vec![1; 9], vec![0]].concat()).unwrap();
        let rep = der(&r, &h, DerMode::Full).unwrap();
        assert!(rep.to_string().starts_with("DER (full) 10.00%"));
        let back: DerReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
