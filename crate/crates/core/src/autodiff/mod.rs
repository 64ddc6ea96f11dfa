//! Minimal dense-tensor reverse-mode differentiation.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore, Parameter, CHECKPOINT_BIN, CHECKPOINT_MANIFEST};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("loss node must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Builds a graph over `store` with `build`, runs the reverse pass and
/// leaves d(loss)/d(value) in every parameter's `grad` (overwriting
/// previous gradients).
pub fn forward_backward<F>(store: &mut ParamStore, build: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph) -> Result<NodeId, AutodiffError>,
{
    let (loss, grads) = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    store.zero_grad();
    store.accumulate(&grads);
    Ok(loss)
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new(store);
    let loss = build(&mut g)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(AutodiffError::NotScalar(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares analytic gradients against central differences for every
/// parameter entry and returns the worst relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`. The numeric side is Richardson
/// extrapolated from steps `epsilon` and `epsilon / 2` (fourth order), so
/// near-zero gradients are resolved well below the 1e-8 floor.
pub fn grad_check<F>(store: &ParamStore, build: F, epsilon: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph) -> Result<NodeId, AutodiffError>,
{
    assert!(epsilon > 0.0, "epsilon must be positive");
    let mut work = store.clone();
    forward_backward(&mut work, &build)?;
    let analytic: Vec<Tensor> = work.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work.get(ParamId(pi)).value.data()[i];
            let mut central = |h: f64| -> Result<f64, AutodiffError> {
                work.get_mut(ParamId(pi)).value.data_mut()[i] = orig + h;
                let plus = eval_loss(&work, &build)?;
                work.get_mut(ParamId(pi)).value.data_mut()[i] = orig - h;
                let minus = eval_loss(&work, &build)?;
                work.get_mut(ParamId(pi)).value.data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let coarse = central(epsilon)?;
            let fine = central(epsilon / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Numerically stable softmax of a vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln p[target]`.
pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<f64, AutodiffError> {
    let p = probabilities
        .get(target)
        .ok_or(AutodiffError::TargetOutOfRange {
            target,
            classes: probabilities.len(),
        })?;
    Ok(-p.ln())
}
