//! Power-set encoding of speaker subsets.
//!
//! A subset `S` of the speakers `{1..N}` is encoded as `Σ_{n∈S} 2^(n-1)`.
//! Limiting the table to subsets of at most `K` speakers gives the
//! single-label class space used by the PSE output head; class indices are
//! positions in the sorted code list, so class 0 is always silence.

use std::collections::{BTreeSet, HashMap};

use itertools::Itertools;
use thiserror::Error;

/// Largest capacity whose codes fit comfortably in a `u64`.
pub const MAX_CAPACITY: usize = 62;

#[derive(Debug, Error, PartialEq)]
pub enum PseError {
    #[error("capacity {0} exceeds the supported maximum of {MAX_CAPACITY}")]
    CapacityTooLarge(usize),
    #[error("speaker {member} outside 1..={capacity}")]
    MemberOutOfRange { member: usize, capacity: usize },
    #[error("code {code} does not fit capacity {capacity}")]
    CodeOutOfRange { code: u64, capacity: usize },
    #[error("max overlap {k} exceeds capacity {n}")]
    OverlapAboveCapacity { k: usize, n: usize },
    #[error("frame {frame} has {active} active speakers, above the limit of {limit}")]
    Overflow { frame: usize, active: usize, limit: usize },
    #[error("label capacity {labels} does not match table capacity {table}")]
    CapacityMismatch { labels: usize, table: usize },
    #[error("class {class} out of range for a table of {size}")]
    ClassOutOfRange { class: usize, size: usize },
    #[error("label matrix: {0}")]
    BadLabels(String),
}

/// Subset of speakers `1..=capacity` (1-based, as in the encoding).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerSet {
    members: BTreeSet<usize>,
    capacity: usize,
}

impl SpeakerSet {
    pub fn new(members: impl IntoIterator<Item = usize>, capacity: usize) -> Result<Self, PseError> {
        let members: BTreeSet<usize> = members.into_iter().collect();
        if let Some(&m) = members.iter().find(|&&m| m == 0 || m > capacity) {
            return Err(PseError::MemberOutOfRange {
                member: m,
                capacity,
            });
        }
        Ok(Self { members, capacity })
    }

    pub fn empty(capacity: usize) -> Self {
        Self {
            members: BTreeSet::new(),
            capacity,
        }
    }

    pub fn members(&self) -> &BTreeSet<usize> {
        &self.members
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

fn check_capacity(n: usize) -> Result<(), PseError> {
    if n > MAX_CAPACITY {
        return Err(PseError::CapacityTooLarge(n));
    }
    Ok(())
}

pub fn encode(s: &SpeakerSet, n: usize) -> Result<u64, PseError> {
    check_capacity(n)?;
    let mut code = 0u64;
    for &m in &s.members {
        if m == 0 || m > n {
            return Err(PseError::MemberOutOfRange {
                member: m,
                capacity: n,
            });
        }
        code |= 1u64 << (m - 1);
    }
    Ok(code)
}

pub fn decode(code: u64, n: usize) -> Result<SpeakerSet, PseError> {
    check_capacity(n)?;
    if code >> n != 0 {
        return Err(PseError::CodeOutOfRange { code, capacity: n });
    }
    let members = (0..n).filter(|b| code >> b & 1 == 1).map(|b| b + 1);
    SpeakerSet::new(members, n)
}

/// `Σ_{j=0..k} C(n, j)`.
pub fn valid_label_count(k: usize, n: usize) -> u64 {
    let mut total = 0u64;
    let mut c = 1u64;
    for j in 0..=k.min(n) {
        total += c;
        c = c * (n - j) as u64 / (j + 1) as u64;
    }
    total
}

/// Caller-selected handling of frames with more than `K` active speakers.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum OverflowPolicy {
    #[default]
    Reject,
    /// Keep the first `K` active speakers in the given priority order of
    /// 0-based columns; columns missing from the list rank after listed
    /// ones in column order. An empty list means plain column order.
    Truncate(Vec<usize>),
}

/// Enumerated PSE codes of all subsets with at most `max_overlap` members.
#[derive(Clone, Debug)]
pub struct ValidLabelTable {
    max_overlap: usize,
    capacity: usize,
    codes: Vec<u64>,
    code_to_class: HashMap<u64, usize>,
}

impl ValidLabelTable {
    pub fn build(k: usize, n: usize) -> Result<Self, PseError> {
        check_capacity(n)?;
        if k > n {
            return Err(PseError::OverlapAboveCapacity { k, n });
        }
        let mut codes: Vec<u64> = (0..=k)
            .flat_map(|size| {
                (0..n)
                    .combinations(size)
                    .map(|bits| bits.iter().fold(0u64, |acc, b| acc | 1 << b))
            })
            .collect();
        codes.sort_unstable();
        let code_to_class = codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Ok(Self {
            max_overlap: k,
            capacity: n,
            codes,
            code_to_class,
        })
    }

    pub fn max_overlap(&self) -> usize {
        self.max_overlap
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    pub fn code(&self, class: usize) -> Result<u64, PseError> {
        self.codes.get(class).copied().ok_or(PseError::ClassOutOfRange {
            class,
            size: self.codes.len(),
        })
    }

    pub fn class_of(&self, code: u64) -> Option<usize> {
        self.code_to_class.get(&code).copied()
    }

    /// Multi-hot activity (0-based columns) of a class.
    pub fn class_activity(&self, class: usize) -> Result<Vec<bool>, PseError> {
        let code = self.code(class)?;
        Ok((0..self.capacity).map(|b| code >> b & 1 == 1).collect())
    }
}

pub fn build_valid_table(k: usize, n: usize) -> Result<ValidLabelTable, PseError> {
    ValidLabelTable::build(k, n)
}

/// Binary `frames x speakers` activity matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameLabels {
    frames: usize,
    speakers: usize,
    data: Vec<u8>,
}

impl FrameLabels {
    pub fn zeros(frames: usize, speakers: usize) -> Self {
        Self {
            frames,
            speakers,
            data: vec![0; frames * speakers],
        }
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, PseError> {
        let speakers = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != speakers) {
            return Err(PseError::BadLabels("ragged rows".into()));
        }
        Self::from_flat(rows.len(), speakers, rows.concat())
    }

    pub fn from_flat(frames: usize, speakers: usize, data: Vec<u8>) -> Result<Self, PseError> {
        if data.len() != frames * speakers {
            return Err(PseError::BadLabels(format!(
                "{} values for {frames}x{speakers}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(PseError::BadLabels("entries must be 0 or 1".into()));
        }
        Ok(Self {
            frames,
            speakers,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn get(&self, t: usize, n: usize) -> bool {
        self.data[t * self.speakers + n] == 1
    }

    pub fn set(&mut self, t: usize, n: usize, active: bool) {
        self.data[t * self.speakers + n] = active as u8;
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.speakers..(t + 1) * self.speakers]
    }

    pub fn as_flat(&self) -> &[u8] {
        &self.data
    }

    pub fn active_count(&self, t: usize) -> usize {
        self.row(t).iter().filter(|&&v| v == 1).count()
    }

    /// Copy with columns rearranged: output column `j` is input column
    /// `order[j]`.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let mut out = Self::zeros(self.frames, order.len());
        for t in 0..self.frames {
            for (j, &src) in order.iter().enumerate() {
                out.set(t, j, self.get(t, src));
            }
        }
        out
    }

    /// Copy widened to `capacity` columns, input column `i` landing at
    /// `slots[i]`.
    pub fn scatter_columns(&self, slots: &[usize], capacity: usize) -> Self {
        let mut out = Self::zeros(self.frames, capacity);
        for t in 0..self.frames {
            for (i, &slot) in slots.iter().enumerate() {
                if self.get(t, i) {
                    out.set(t, slot, true);
                }
            }
        }
        out
    }
}

/// Class index sequence over a [`ValidLabelTable`].
pub type PseClassSequence = Vec<usize>;

pub fn labels_to_classes(
    labels: &FrameLabels,
    table: &ValidLabelTable,
    policy: &OverflowPolicy,
) -> Result<PseClassSequence, PseError> {
    if labels.speakers() != table.capacity() {
        return Err(PseError::CapacityMismatch {
            labels: labels.speakers(),
            table: table.capacity(),
        });
    }
    let k = table.max_overlap();
    (0..labels.frames())
        .map(|t| {
            let mut active: Vec<usize> = (0..labels.speakers()).filter(|&n| labels.get(t, n)).collect();
            if active.len() > k {
                match policy {
                    OverflowPolicy::Reject => {
                        return Err(PseError::Overflow {
                            frame: t,
                            active: active.len(),
                            limit: k,
                        })
                    }
                    OverflowPolicy::Truncate(priority) => {
                        let rank = |c: usize| {
                            priority
                                .iter()
                                .position(|&p| p == c)
                                .unwrap_or(priority.len() + c)
                        };
                        active.sort_by_key(|&c| rank(c));
                        active.truncate(k);
                    }
                }
            }
            let code = active.iter().fold(0u64, |acc, &c| acc | 1 << c);
            Ok(table.class_of(code).expect("subset within K is in the table"))
        })
        .collect()
}

pub fn classes_to_labels(seq: &[usize], table: &ValidLabelTable) -> Result<FrameLabels, PseError> {
    let mut out = FrameLabels::zeros(seq.len(), table.capacity());
    for (t, &class) in seq.iter().enumerate() {
        for (n, on) in table.class_activity(class)?.into_iter().enumerate() {
            if on {
                out.set(t, n, true);
            }
        }
    }
    Ok(out)
}
