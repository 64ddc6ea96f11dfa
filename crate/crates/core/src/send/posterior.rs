use super::{Head, SendError};
use crate::autodiff::Tensor;
use crate::pse::{classes_to_labels, FrameLabels, PseClassSequence, ValidLabelTable};

/// Per-frame output: a distribution over power-set classes, or one
/// activity probability per speaker slot.
#[derive(Clone, Debug, PartialEq)]
pub struct DiarizationPosterior {
    head: Head,
    probs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(PseClassSequence),
    Labels(FrameLabels),
}

impl DiarizationPosterior {
    pub fn new(head: Head, probs: Tensor) -> Self {
        Self { head, probs }
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }

    pub fn width(&self) -> usize {
        self.probs.cols()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.probs.row(t)
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.probs.get(t, c)
    }
}

const PROB_FLOOR: f64 = 1e-12;

/// Mean frame cross-entropy (power-set head) or mean frame-and-slot
/// binary cross-entropy (multi-label head).
pub fn send_loss(post: &DiarizationPosterior, targets: &Targets) -> Result<f64, SendError> {
    let frames = post.frames();
    match (post.head, targets) {
        (Head::Pse, Targets::Classes(c)) => {
            if c.len() != frames {
                return Err(SendError::Input(format!("{} targets for {frames} frames", c.len())));
            }
            let mut total = 0.0;
            for (t, &class) in c.iter().enumerate() {
                let p = *post.row(t).get(class).ok_or_else(|| {
                    SendError::Input(format!("class {class} outside {} outputs", post.width()))
                })?;
                total -= p.max(PROB_FLOOR).ln();
            }
            Ok(total / frames as f64)
        }
        (Head::Multilabel, Targets::Labels(l)) => {
            if l.frames() != frames || l.speakers() != post.width() {
                return Err(SendError::Input(format!(
                    "labels {}x{} for a {}x{} posterior",
                    l.frames(),
                    l.speakers(),
                    frames,
                    post.width()
                )));
            }
            let total: f64 = post
                .probs
                .data()
                .iter()
                .zip(l.as_flat())
                .map(|(&p, &y)| {
                    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
                    if y == 1 {
                        -p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                })
                .sum();
            Ok(total / post.probs.len() as f64)
        }
        _ => Err(SendError::Input("target kind does not match the head".into())),
    }
}

/// Frame labels from a posterior. The power-set head takes the arg-max
/// class (ties to the lower class index, so silence wins ties); the
/// multi-label head marks slots with probability at or above `threshold`.
pub fn decode_frames(
    post: &DiarizationPosterior,
    table: &ValidLabelTable,
    threshold: Option<f64>,
) -> Result<FrameLabels, SendError> {
    match (post.head, threshold) {
        (Head::Pse, None) => {
            if post.width() != table.len() {
                return Err(SendError::Input(format!(
                    "posterior has {} classes, table has {}",
                    post.width(),
                    table.len()
                )));
            }
            let classes: Vec<usize> = (0..post.frames()).map(|t| argmax(post.row(t))).collect();
            Ok(classes_to_labels(&classes, table)?)
        }
        (Head::Multilabel, Some(th)) => {
            if post.width() != table.capacity() {
                return Err(SendError::Input(format!(
                    "posterior has {} slots, table capacity is {}",
                    post.width(),
                    table.capacity()
                )));
            }
            let data = post.probs.data().iter().map(|&p| (p >= th) as u8).collect();
            Ok(FrameLabels::from_flat(post.frames(), post.width(), data)?)
        }
        (Head::Pse, Some(_)) => Err(SendError::UnexpectedThreshold),
        (Head::Multilabel, None) => Err(SendError::MissingThreshold),
    }
}

/// Index of the largest value, first one on ties.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
