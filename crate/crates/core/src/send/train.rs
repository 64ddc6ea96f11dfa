use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{augment_bank, decode_frames, DiarizationPosterior, SendError, SendModel, SpeakerBank};
use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::corpus::{Dataset, MixtureSample};
use crate::optim::{clip_grad_norm, Adam, WarmupSchedule};
use crate::pse::{FrameLabels, OverflowPolicy, ValidLabelTable};
use crate::scoring::{der_counts, DerCounts, DerMode};
use crate::seeding::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak of the warmup schedule.
    pub learning_rate: f64,
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Decision threshold for validating a multi-label model.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 100,
            clip_norm: 5.0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SendError> {
        let bad = |m: &str| Err(SendError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip norm must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold outside [0, 1]");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, SendError> {
        let c: Self = toml::from_str(text).map_err(|e| SendError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub validation_der: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    /// One JSON record per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

/// Loss and gradients of one training sample: `(params, sample, epoch)`.
pub(crate) type SampleLoss<'a> = dyn Fn(&ParamStore, usize, usize) -> Result<(f64, Gradients), SendError> + 'a;

/// Mini-batch Adam over `n` samples. Batches are drawn from a per-epoch
/// shuffle and their gradients summed in sample order, so a run depends
/// only on the seed.
pub(crate) fn optimize(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    n: usize,
    sample_loss: &SampleLoss,
    validate: &mut dyn FnMut(&ParamStore) -> Result<Option<f64>, SendError>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, SendError> {
    cfg.validate()?;
    if n == 0 {
        return Err(SendError::Input("empty training set".into()));
    }
    let schedule = WarmupSchedule {
        peak: cfg.learning_rate,
        warmup: cfg.warmup_steps,
    };
    let mut adam = Adam::new(store);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut lr = 0.0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                let (loss, grads) = sample_loss(store, i, epoch)?;
                if !loss.is_finite() {
                    return Err(SendError::Diverged {
                        epoch,
                        step: adam.steps(),
                        loss,
                    });
                }
                store.accumulate(&grads);
                total += loss;
            }
            store.scale_grads(1.0 / batch.len() as f64);
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(store, cfg.clip_norm);
            }
            lr = schedule.lr(adam.steps() + 1);
            adam.step(store, lr);
            if store.iter().any(|(_, p)| p.value.data().iter().any(|v| !v.is_finite())) {
                return Err(SendError::Diverged {
                    epoch,
                    step: adam.steps(),
                    loss: f64::NAN,
                });
            }
        }
        let record = EpochRecord {
            epoch,
            loss: total / n as f64,
            lr,
            validation_der: validate(store)?,
        };
        on_epoch(&record);
        epochs.push(record);
    }
    Ok(TrainReport {
        seed: cfg.seed,
        steps: adam.steps(),
        epochs,
    })
}

/// Trains on `dataset.train`. Each sample gets a fresh bank per epoch:
/// its enrollments at shuffled slots, negatives from the dataset's pool
/// (never one of the sample's own speakers) and zero padding. Validation
/// DER is computed after every epoch when validation samples exist.
pub fn train(
    model: &mut SendModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, SendError> {
    let SendModel { net, store, .. } = model;
    let capacity = net.config.capacity;
    let samples = &dataset.train;
    for s in samples.iter().chain(&dataset.validation) {
        check_sample(net, s)?;
    }
    let pools: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|s| {
            dataset
                .negatives
                .iter()
                .filter(|e| !s.speakers.contains(&e.speaker))
                .map(|e| e.embedding.clone())
                .collect()
        })
        .collect();
    let n = samples.len();
    let sample_loss = |store: &ParamStore, i: usize, epoch: usize| {
        let s = &samples[i];
        let mut rng = rng_for(cfg.seed, "bank", (epoch * n + i) as u64);
        let (bank, slots) = augment_bank(&s.enrollments, &pools[i], capacity, &mut rng)?;
        let targets = net.targets(&s.labels.scatter_columns(&slots, capacity), &OverflowPolicy::Reject)?;
        let mut g = Graph::new(store);
        let x = g.input(s.features.clone());
        let b = g.input(bank.to_tensor());
        let loss = net.loss_node(&mut g, x, b, &targets)?;
        Ok(g.backward(loss)?)
    };
    let threshold = (net.config.head == super::Head::Multilabel).then_some(cfg.threshold);
    let net_ref = &*net;
    let mut validate = |store: &ParamStore| -> Result<Option<f64>, SendError> {
        if dataset.validation.is_empty() {
            return Ok(None);
        }
        let mut total = DerCounts::default();
        for s in &dataset.validation {
            let (post, reference) = validation_posterior(net_ref, store, s)?;
            let hyp = decode_frames(&post, net_ref.table(), threshold)?;
            total = total + der_counts(&reference, &hyp, DerMode::Full)?;
        }
        Ok(Some(total.report(DerMode::Full)?.der))
    };
    optimize(store, cfg, n, &sample_loss, &mut validate, on_epoch)
}

fn check_sample(net: &super::SendNet, s: &MixtureSample) -> Result<(), SendError> {
    if s.features.cols() != net.config.feature_dim {
        return Err(SendError::Input(format!(
            "sample {} has {} feature dims, model expects {}",
            s.index,
            s.features.cols(),
            net.config.feature_dim
        )));
    }
    if s.num_speakers() > net.config.capacity {
        return Err(SendError::Input(format!(
            "sample {} has {} speakers, capacity is {}",
            s.index,
            s.num_speakers(),
            net.config.capacity
        )));
    }
    if s.enrollments.first().map_or(true, |e| e.len() != net.config.embedding_dim) {
        return Err(SendError::Input(format!("sample {} enrollments do not match the model", s.index)));
    }
    Ok(())
}

/// Inference bank (enrollments first, zeros after) and the reference
/// labels widened to match it.
fn validation_posterior(
    net: &super::SendNet,
    store: &ParamStore,
    s: &MixtureSample,
) -> Result<(DiarizationPosterior, FrameLabels), SendError> {
    let capacity = net.config.capacity;
    let bank = SpeakerBank::inference(&s.enrollments, capacity)?;
    let post = net.forward(store, &s.features, &bank)?;
    let slots: Vec<usize> = (0..s.num_speakers()).collect();
    Ok((post, s.labels.scatter_columns(&slots, capacity)))
}

/// Posterior and bank-aligned reference for every sample.
pub fn validation_posteriors(
    model: &SendModel,
    samples: &[MixtureSample],
) -> Result<Vec<(DiarizationPosterior, FrameLabels)>, SendError> {
    samples
        .iter()
        .map(|s| {
            check_sample(&model.net, s)?;
            validation_posterior(&model.net, &model.store, s)
        })
        .collect()
}

/// Error counts summed over decoded posteriors (full scoring).
pub fn evaluate(
    posteriors: &[(DiarizationPosterior, FrameLabels)],
    table: &ValidLabelTable,
    threshold: Option<f64>,
) -> Result<DerCounts, SendError> {
    let mut total = DerCounts::default();
    for (post, reference) in posteriors {
        let hyp = decode_frames(post, table, threshold)?;
        total = total + der_counts(reference, &hyp, DerMode::Full)?;
    }
    Ok(total)
}

/// Sweeps thresholds 0.05, 0.10, ..., 0.95 and returns the one with the
/// lowest corpus DER (the lowest threshold on ties) with that DER.
pub fn best_threshold(
    posteriors: &[(DiarizationPosterior, FrameLabels)],
    table: &ValidLabelTable,
) -> Result<(f64, f64), SendError> {
    let mut best: Option<(f64, f64)> = None;
    for k in 1..=19 {
        let th = k as f64 * 0.05;
        let der = evaluate(posteriors, table, Some(th))?.report(DerMode::Full)?.der;
        if best.map_or(true, |(_, d)| der < d) {
            best = Some((th, der));
        }
    }
    Ok(best.expect("nonempty sweep"))
}
