//! Speaker banks: the `N x D_emb` embedding matrix fed to the speaker
//! encoder, with a role tag per slot.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SendError;
use crate::autodiff::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotRole {
    /// Enrollment of a speaker present in the recording.
    Positive,
    /// Enrollment of a speaker who says nothing in the recording.
    Negative,
    /// Exact zero vector.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerBank {
    embeddings: Vec<Vec<f64>>,
    roles: Vec<SlotRole>,
}

impl SpeakerBank {
    pub fn new(embeddings: Vec<Vec<f64>>, roles: Vec<SlotRole>) -> Result<Self, SendError> {
        if embeddings.is_empty() || embeddings.len() != roles.len() {
            return Err(SendError::Bank(format!(
                "{} embeddings for {} roles",
                embeddings.len(),
                roles.len()
            )));
        }
        let dim = embeddings[0].len();
        if dim == 0 || embeddings.iter().any(|e| e.len() != dim) {
            return Err(SendError::Bank("embeddings must share a positive dimension".into()));
        }
        if embeddings.iter().flatten().any(|x| !x.is_finite()) {
            return Err(SendError::Bank("non-finite embedding value".into()));
        }
        for (slot, (e, role)) in embeddings.iter().zip(&roles).enumerate() {
            if *role == SlotRole::Zero && e.iter().any(|&x| x != 0.0) {
                return Err(SendError::Bank(format!("zero slot {slot} holds a nonzero vector")));
            }
        }
        Ok(Self { embeddings, roles })
    }

    /// Positives in order in the first slots, zeros after them.
    pub fn inference(positives: &[Vec<f64>], capacity: usize) -> Result<Self, SendError> {
        if positives.is_empty() {
            return Err(SendError::Bank("no speaker embeddings".into()));
        }
        if positives.len() > capacity {
            return Err(SendError::Bank(format!(
                "{} speakers exceed capacity {capacity}",
                positives.len()
            )));
        }
        let dim = positives[0].len();
        let mut embeddings = positives.to_vec();
        let mut roles = vec![SlotRole::Positive; positives.len()];
        embeddings.resize(capacity, vec![0.0; dim]);
        roles.resize(capacity, SlotRole::Zero);
        Self::new(embeddings, roles)
    }

    pub fn capacity(&self) -> usize {
        self.embeddings.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn roles(&self) -> &[SlotRole] {
        &self.roles
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.embeddings).expect("validated bank")
    }

    /// Bank whose slot `j` is this bank's slot `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            embeddings: order.iter().map(|&i| self.embeddings[i].clone()).collect(),
            roles: order.iter().map(|&i| self.roles[i]).collect(),
        }
    }
}

/// Training bank: every positive, `m` negatives drawn without replacement
/// (`m` uniform on `0..=n - positives`, capped by the pool) and zero
/// vectors for the rest, in shuffled slot order. Also returns the slot of
/// each positive.
pub fn augment_bank(
    positives: &[Vec<f64>],
    negative_pool: &[Vec<f64>],
    n: usize,
    rng: &mut impl Rng,
) -> Result<(SpeakerBank, Vec<usize>), SendError> {
    if positives.len() > n {
        return Err(SendError::Bank(format!(
            "{} positives exceed capacity {n}",
            positives.len()
        )));
    }
    if positives.is_empty() {
        return Err(SendError::Bank("a training bank needs a positive".into()));
    }
    let dim = positives[0].len();
    let p = positives.len();
    let m = rng.gen_range(0..=n - p).min(negative_pool.len());
    let negatives = rand::seq::index::sample(rng, negative_pool.len(), m);
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    let mut embeddings = vec![vec![0.0; dim]; n];
    let mut roles = vec![SlotRole::Zero; n];
    for (i, e) in positives.iter().enumerate() {
        embeddings[slots[i]] = e.clone();
        roles[slots[i]] = SlotRole::Positive;
    }
    for (j, idx) in negatives.into_iter().enumerate() {
        embeddings[slots[p + j]] = negative_pool[idx].clone();
        roles[slots[p + j]] = SlotRole::Negative;
    }
    let bank = SpeakerBank::new(embeddings, roles)?;
    slots.truncate(p);
    Ok((bank, slots))
}

/// Mean embedding per cluster id, clusters ordered by first appearance.
pub fn cluster_centers(embeddings: &[Vec<f64>], assignments: &[usize]) -> Result<Vec<Vec<f64>>, SendError> {
    if embeddings.is_empty() {
        return Err(SendError::Bank("no embeddings to cluster".into()));
    }
    if embeddings.len() != assignments.len() {
        return Err(SendError::Bank(format!(
            "{} embeddings for {} assignments",
            embeddings.len(),
            assignments.len()
        )));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(SendError::Bank("embeddings differ in dimension".into()));
    }
    let mut ids: Vec<usize> = Vec::new();
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for (e, &a) in embeddings.iter().zip(assignments) {
        let k = match ids.iter().position(|&id| id == a) {
            Some(k) => k,
            None => {
                ids.push(a);
                sums.push((vec![0.0; dim], 0));
                ids.len() - 1
            }
        };
        sums[k].0.iter_mut().zip(e).for_each(|(s, x)| *s += x);
        sums[k].1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(s, c)| s.into_iter().map(|x| x / c as f64).collect())
        .collect())
}
