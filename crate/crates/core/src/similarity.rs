//! Frame-versus-speaker similarity metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dot,
    SigmaDot,
    Cosine,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Cosine, Metric::Dot, Metric::SigmaDot];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dot => "dot",
            Metric::SigmaDot => "sigma_dot",
            Metric::Cosine => "cosine",
        }
    }
}

fn check(h: &[f64], e: &[f64]) -> Result<(), SimilarityError> {
    if h.len() != e.len() {
        return Err(SimilarityError::Dimension(h.len(), e.len()));
    }
    Ok(())
}

pub fn dot_sim(h: &[f64], e: &[f64]) -> Result<f64, SimilarityError> {
    check(h, e)?;
    Ok(h.iter().zip(e).map(|(a, b)| a * b).sum())
}

/// Dot product of tanh-activated vectors; bounded by the dimension.
pub fn sigma_dot_sim(h: &[f64], e: &[f64]) -> Result<f64, SimilarityError> {
    check(h, e)?;
    Ok(h.iter().zip(e).map(|(a, b)| a.tanh() * b.tanh()).sum())
}

/// Cosine similarity. `degenerate` is set when either vector is zero, in
/// which case the value is 0.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_sim(h: &[f64], e: &[f64]) -> Result<Cosine, SimilarityError> {
    check(h, e)?;
    let nh = h.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ne = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nh == 0.0 || ne == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    let v = h.iter().zip(e).map(|(a, b)| (a / nh) * (b / ne)).sum::<f64>();
    Ok(Cosine {
        value: v.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn metric_sim(metric: Metric, h: &[f64], e: &[f64]) -> Result<(f64, bool), SimilarityError> {
    match metric {
        Metric::Dot => dot_sim(h, e).map(|v| (v, false)),
        Metric::SigmaDot => sigma_dot_sim(h, e).map(|v| (v, false)),
        Metric::Cosine => cosine_sim(h, e).map(|c| (c.value, c.degenerate)),
    }
}

/// `rows x speakers` similarity matrix (frames or words against speakers).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub metric: Metric,
    /// Pairs that hit the zero-vector cosine case.
    pub degenerate_pairs: usize,
}

impl SimilarityMatrix {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }
}

pub fn similarity_matrix(
    h: &[Vec<f64>],
    e: &[Vec<f64>],
    metric: Metric,
) -> Result<SimilarityMatrix, SimilarityError> {
    let mut values = Vec::with_capacity(h.len() * e.len());
    let mut degenerate_pairs = 0;
    for hr in h {
        for er in e {
            let (v, d) = metric_sim(metric, hr, er)?;
            degenerate_pairs += d as usize;
            values.push(v);
        }
    }
    Ok(SimilarityMatrix {
        rows: h.len(),
        cols: e.len(),
        values,
        metric,
        degenerate_pairs,
    })
}

/// Differentiable similarity matrix between the rows of `h` and `e`.
pub fn similarity_node(
    g: &mut Graph,
    h: NodeId,
    e: NodeId,
    metric: Metric,
) -> Result<NodeId, AutodiffError> {
    match metric {
        Metric::Dot => g.matmul_t(h, e),
        Metric::SigmaDot => {
            let th = g.tanh(h);
            let te = g.tanh(e);
            g.matmul_t(th, te)
        }
        Metric::Cosine => {
            let nh = g.l2_normalize_rows(h);
            let ne = g.l2_normalize_rows(e);
            g.matmul_t(nh, ne)
        }
    }
}
