use serde::{Deserialize, Serialize};

use super::{decode_words, insert_sc_separators, SendTiModel, SendTiNet, TokenSequence};
use crate::autodiff::{Graph, ParamStore};
use crate::corpus::{corrupt_tokens, Dataset, MixtureSample};
use crate::scoring::{wder, WderReport};
use crate::send::{augment_bank, optimize, EpochRecord, SendError, SpeakerBank, TrainConfig, TrainReport};
use crate::seeding::rng_for;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// Reference transcript.
    Grand,
    /// Reference transcript with random word substitutions.
    Recognition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Insert a separator at every speaker change.
    pub separators: bool,
    pub source: TextSource,
    /// Substitution rate of recognition text.
    pub error_rate: f64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            separators: true,
            source: TextSource::Grand,
            error_rate: 0.15,
        }
    }
}

impl TextConfig {
    /// Token sequence of a sample and the label column of each word. The
    /// substitutions depend only on `seed` and the sample, so every model
    /// sees the same recognition text.
    pub fn tokens(&self, sample: &MixtureSample, vocab_size: usize, seed: u64) -> Result<(TokenSequence, Vec<usize>), SendError> {
        let mut words: Vec<usize> = sample.words.iter().map(|w| w.token).collect();
        let columns: Vec<usize> = sample.words.iter().map(|w| w.speaker).collect();
        if self.source == TextSource::Recognition {
            let label = format!("recognition.{}", sample.split.name());
            let mut rng = rng_for(seed, &label, sample.index as u64);
            words = corrupt_tokens(&words, self.error_rate, vocab_size, &mut rng);
        }
        let seq = if self.separators {
            insert_sc_separators(&words, &columns, vocab_size)?
        } else {
            TokenSequence::plain(words, vocab_size)?
        };
        Ok((seq, columns))
    }
}

/// Class per token: the bank slot of the word's speaker, "none" for
/// separators.
pub fn word_targets(seq: &TokenSequence, columns: &[usize], slots: &[usize], none: usize) -> Result<Vec<usize>, SendError> {
    let mut words = columns.iter();
    let targets = seq
        .tokens()
        .iter()
        .map(|&t| {
            if t == seq.separator() {
                Ok(none)
            } else {
                let c = words.next().ok_or_else(|| SendError::Input("more words than labels".into()))?;
                slots
                    .get(*c)
                    .copied()
                    .ok_or_else(|| SendError::Input(format!("label column {c} has no slot")))
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    if words.next().is_some() {
        return Err(SendError::Input("more labels than words".into()));
    }
    Ok(targets)
}

fn check_sample(net: &SendTiNet, s: &MixtureSample) -> Result<(), SendError> {
    let c = &net.config;
    if s.features.cols() != c.feature_dim || s.num_speakers() > c.capacity {
        return Err(SendError::Input(format!(
            "sample {} ({} dims, {} speakers) does not fit the model",
            s.index,
            s.features.cols(),
            s.num_speakers()
        )));
    }
    if s.words.is_empty() {
        return Err(SendError::Input(format!("sample {} has no words", s.index)));
    }
    if s.words.iter().any(|w| w.token >= c.vocab_size) {
        return Err(SendError::Input(format!("sample {} uses a token outside the vocabulary", s.index)));
    }
    Ok(())
}

/// Trains on `dataset.train` with per-epoch augmented banks. The epoch
/// record's validation field holds the validation wDER.
pub fn train_ti(
    model: &mut SendTiModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    text: &TextConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, SendError> {
    let SendTiModel { net, store, .. } = model;
    let capacity = net.config.capacity;
    let vocab = net.config.vocab_size;
    let samples = &dataset.train;
    for s in samples.iter().chain(&dataset.validation) {
        check_sample(net, s)?;
    }
    let texts = samples
        .iter()
        .map(|s| text.tokens(s, vocab, dataset.config.seed))
        .collect::<Result<Vec<_>, _>>()?;
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
    let net_ref = &*net;
    let sample_loss = |store: &ParamStore, i: usize, epoch: usize| {
        let s = &samples[i];
        let mut rng = rng_for(cfg.seed, "bank", (epoch * n + i) as u64);
        let (bank, slots) = augment_bank(&s.enrollments, &pools[i], capacity, &mut rng)?;
        let (seq, columns) = &texts[i];
        let targets = word_targets(seq, columns, &slots, capacity)?;
        let mut g = Graph::new(store);
        let x = g.input(s.features.clone());
        let b = g.input(bank.to_tensor());
        let loss = net_ref.loss_node(&mut g, x, b, seq, &targets)?;
        Ok(g.backward(loss)?)
    };
    let mut validate = |store: &ParamStore| -> Result<Option<f64>, SendError> {
        if dataset.validation.is_empty() {
            return Ok(None);
        }
        let report = word_errors(net_ref, store, &dataset.validation, text, dataset.config.seed, false)?;
        Ok(Some(report.wder))
    };
    optimize(store, cfg, n, &sample_loss, &mut validate, on_epoch)
}

fn word_errors(
    net: &SendTiNet,
    store: &ParamStore,
    samples: &[MixtureSample],
    text: &TextConfig,
    seed: u64,
    mask_speech: bool,
) -> Result<WderReport, SendError> {
    let (mut reference, mut hyp) = (Vec::new(), Vec::new());
    for s in samples {
        check_sample(net, s)?;
        let (seq, columns) = text.tokens(s, net.config.vocab_size, seed)?;
        let bank = SpeakerBank::inference(&s.enrollments, net.config.capacity)?;
        let post = net.forward(store, &s.features, &bank, &seq, mask_speech)?;
        reference.extend_from_slice(&columns);
        hyp.extend(decode_words(&post));
    }
    Ok(wder(&reference, &hyp)?)
}

/// Word-level results of a model on a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordEval {
    pub wder: f64,
    pub total_words: usize,
    pub wrong_words: usize,
}

/// wDER with inference banks (enrollments in order, zeros after). A word
/// decoded as "none" counts as wrong.
pub fn evaluate_words(
    model: &SendTiModel,
    samples: &[MixtureSample],
    text: &TextConfig,
    seed: u64,
) -> Result<WordEval, SendError> {
    let r = word_errors(&model.net, &model.store, samples, text, seed, false)?;
    Ok(WordEval {
        wder: r.wder,
        total_words: r.total_words,
        wrong_words: r.wrong_words,
    })
}

/// Speech-masked evaluation on two-speaker samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextOnlyReport {
    /// Accuracy over both bank orders, choosing between the two speaker
    /// slots only.
    pub accuracy: f64,
    pub chance: f64,
    /// Largest posterior change when the two speakers trade places.
    pub max_swap_difference: f64,
    /// Same accuracy with speech left in, for contrast.
    pub unmasked_accuracy: f64,
    pub words: usize,
}

pub fn text_only_report(
    model: &SendTiModel,
    samples: &[MixtureSample],
    text: &TextConfig,
    seed: u64,
) -> Result<TextOnlyReport, SendError> {
    let net = &model.net;
    let (mut masked_hits, mut plain_hits, mut total) = (0usize, 0usize, 0usize);
    let mut max_diff: f64 = 0.0;
    for s in samples.iter().filter(|s| s.num_speakers() == 2) {
        check_sample(net, s)?;
        let (seq, columns) = text.tokens(s, net.config.vocab_size, seed)?;
        let bank = SpeakerBank::inference(&s.enrollments, net.config.capacity)?;
        let mut swapped_order: Vec<usize> = (0..net.config.capacity).collect();
        swapped_order.swap(0, 1);
        let swapped = bank.permuted(&swapped_order);
        let mut outputs = Vec::new();
        for (b, swap) in [(&bank, false), (&swapped, true)] {
            for mask in [true, false] {
                let post = net.forward(&model.store, &s.features, b, &seq, mask)?;
                let mut word = 0;
                for l in 0..post.tokens() {
                    if post.separators().contains(&l) {
                        continue;
                    }
                    let row = post.row(l);
                    let guess = if row[1] > row[0] { 1 } else { 0 };
                    let truth = if swap { 1 - columns[word] } else { columns[word] };
                    if guess == truth {
                        if mask {
                            masked_hits += 1;
                        } else {
                            plain_hits += 1;
                        }
                    }
                    if mask {
                        total += 1;
                    }
                    word += 1;
                }
                if mask {
                    outputs.push(post);
                }
            }
        }
        for (p, q) in outputs[0].probs().data().iter().zip(outputs[1].probs().data()) {
            max_diff = max_diff.max((p - q).abs());
        }
    }
    if total == 0 {
        return Err(SendError::Input("no two-speaker samples with words".into()));
    }
    Ok(TextOnlyReport {
        accuracy: masked_hits as f64 / total as f64,
        chance: 0.5,
        max_swap_difference: max_diff,
        unmasked_accuracy: plain_hits as f64 / total as f64,
        words: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SimConfig;
    use crate::send::PostNet;
    use crate::sendti::SendTiConfig;

    fn data() -> Dataset {
        let cfg = SimConfig {
            train_samples: 6,
            validation_samples: 4,
            pool_speakers: 12,
            validation_speakers: 4,
            embedding_dim: 8,
            num_speakers: [2, 2],
            turns_per_speaker: [1, 2],
            turn_length: [10, 16],
            silence_gap: [2, 4],
            edge_silence: [2, 4],
            feature_dim: 8,
            lexical_dim: 4,
            vocab_size: 6,
            frames_per_word: 4,
            context: 1,
            stride: 2,
            ..SimConfig::default()
        };
        Dataset::generate(&cfg).unwrap()
    }

    fn model(seed: u64) -> SendTiModel {
        SendTiModel::new(
            SendTiConfig {
                feature_dim: 36,
                embedding_dim: 8,
                encoding_dim: 8,
                capacity: 3,
                vocab_size: 6,
                speech_blocks: 1,
                speech_hidden: 8,
                speech_filter: 3,
                speaker_layers: 1,
                speaker_hidden: 8,
                text_blocks: 1,
                text_heads: 2,
                text_ffn: 8,
                positional: true,
                post_net: PostNet::FsmnFcn,
                post_blocks: 1,
                post_hidden: 4,
                post_filter: 3,
                post_fcn_hidden: 8,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn targets_follow_slots_and_separators() {
        let seq = insert_sc_separators(&[1, 2, 3], &[0, 0, 1], 6).unwrap();
        assert_eq!(word_targets(&seq, &[0, 0, 1], &[2, 0], 3).unwrap(), vec![2, 2, 3, 0]);
        assert!(word_targets(&seq, &[0, 0], &[2, 0], 3).is_err());
    }

    #[test]
    fn recognition_text_is_fixed_per_sample() {
        let d = data();
        let text = TextConfig {
            source: TextSource::Recognition,
            error_rate: 0.5,
            separators: false,
        };
        let s = &d.train[0];
        let (a, _) = text.tokens(s, 6, 1).unwrap();
        assert_eq!(a, text.tokens(s, 6, 1).unwrap().0);
        let grand: Vec<usize> = s.words.iter().map(|w| w.token).collect();
        assert_eq!(a.len(), grand.len());
        assert_ne!(a.tokens(), &grand[..]);
    }

    #[test]
    fn training_lowers_the_loss_and_is_reproducible() {
        let d = data();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 2,
            learning_rate: 1e-2,
            warmup_steps: 10,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = model(3);
            let r = train_ti(&mut m, &d, &cfg, &TextConfig::default(), &mut |_| {}).unwrap();
            (m, r)
        };
        let (m, r) = run();
        assert!(r.epochs[29].loss < r.epochs[0].loss);
        assert_eq!(r, run().1);
        let eval = evaluate_words(&m, &d.validation, &TextConfig::default(), d.config.seed).unwrap();
        assert!(eval.total_words > 0);
    }

    #[test]
    fn masked_speech_is_exactly_chance() {
        let d = data();
        let m = model(4);
        let r = text_only_report(&m, &d.validation, &TextConfig::default(), d.config.seed).unwrap();
        assert_eq!(r.max_swap_difference, 0.0);
        assert_eq!(r.accuracy, 0.5);
    }
}
