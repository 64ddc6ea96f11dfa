//! Word-level speaker attribution: transcript tokens attend over speech
//! encodings, and the aggregated vectors are scored against the speaker
//! encodings. One class per bank slot plus a final "none" class.

mod text;
mod train;

pub use text::{insert_sc_separators, parse_transcript, render_transcript, TokenSequence, SC_LITERAL};
pub use train::{
    evaluate_words, text_only_report, train_ti, word_targets, TextConfig, TextOnlyReport, TextSource, WordEval,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::nnet::{AttentionAligner, AttentionConfig, Fcn, Fsmn, FsmnConfig, SelfAttentionEncoder};
use crate::send::{restore, speaker_dims, PostNet, PostNetwork, SendError, SendModel, SpeakerBank};
use crate::seeding::rng_for;
use crate::similarity::{similarity_node, Metric};

pub const TI_CONFIG_FILE: &str = "model_ti.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SendTiConfig {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub encoding_dim: usize,
    pub capacity: usize,
    /// Plain words; the separator takes id `vocab_size`.
    pub vocab_size: usize,
    pub speech_blocks: usize,
    pub speech_hidden: usize,
    pub speech_filter: usize,
    pub speaker_layers: usize,
    pub speaker_hidden: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
    pub text_ffn: usize,
    pub positional: bool,
    /// `fcn` or `fsmn_fcn`; the post-net runs along the word axis.
    pub post_net: PostNet,
    pub post_blocks: usize,
    pub post_hidden: usize,
    pub post_filter: usize,
    pub post_fcn_hidden: usize,
}

impl Default for SendTiConfig {
    fn default() -> Self {
        Self {
            feature_dim: 560,
            embedding_dim: 512,
            encoding_dim: 512,
            capacity: 16,
            vocab_size: 5000,
            speech_blocks: 8,
            speech_hidden: 512,
            speech_filter: 31,
            speaker_layers: 3,
            speaker_hidden: 512,
            text_blocks: 2,
            text_heads: 4,
            text_ffn: 1024,
            positional: true,
            post_net: PostNet::FsmnFcn,
            post_blocks: 2,
            post_hidden: 64,
            post_filter: 5,
            post_fcn_hidden: 256,
        }
    }
}

impl SendTiConfig {
    pub fn validate(&self) -> Result<(), SendError> {
        let bad = |m: &str| Err(SendError::Config(m.into()));
        if [
            self.feature_dim,
            self.embedding_dim,
            self.encoding_dim,
            self.capacity,
            self.vocab_size,
            self.speaker_layers,
            self.speaker_hidden,
            self.post_fcn_hidden,
        ]
        .contains(&0)
        {
            return bad("dimensions must be positive");
        }
        if self.post_net == PostNet::None {
            return bad("the word head needs a post-net");
        }
        self.speech_fsmn().validate().map_err(SendError::Config)?;
        self.text_attention().validate().map_err(SendError::Config)?;
        if self.post_net == PostNet::FsmnFcn {
            self.post_fsmn().validate().map_err(SendError::Config)?;
        }
        Ok(())
    }

    pub fn speech_fsmn(&self) -> FsmnConfig {
        FsmnConfig {
            num_blocks: self.speech_blocks,
            hidden_units: self.speech_hidden,
            filter_size: self.speech_filter,
            projection_dim: self.encoding_dim,
        }
    }

    pub fn post_fsmn(&self) -> FsmnConfig {
        FsmnConfig {
            num_blocks: self.post_blocks,
            hidden_units: self.post_hidden,
            filter_size: self.post_filter,
            projection_dim: self.capacity,
        }
    }

    pub fn text_attention(&self) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.encoding_dim,
            num_heads: self.text_heads,
            num_blocks: self.text_blocks,
            ffn_dim: self.text_ffn,
            positional: self.positional,
        }
    }

    /// Slots plus "none".
    pub fn num_classes(&self) -> usize {
        self.capacity + 1
    }

    pub fn separator(&self) -> usize {
        self.vocab_size
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

/// `L x (N + 1)` word posterior. Remembers which rows are separators so
/// they can be left out of the readout.
#[derive(Clone, Debug, PartialEq)]
pub struct WordPosterior {
    probs: Tensor,
    separators: Vec<usize>,
}

impl WordPosterior {
    pub fn new(probs: Tensor, separators: Vec<usize>) -> Self {
        Self { probs, separators }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn row(&self, l: usize) -> &[f64] {
        self.probs.row(l)
    }

    pub fn separators(&self) -> &[usize] {
        &self.separators
    }

    /// Class index of "none".
    pub fn none_class(&self) -> usize {
        self.probs.cols() - 1
    }
}

/// Arg-max class per word (ties to the lower index), separators skipped.
/// Slot `n` reads as `n`; "none" reads as [`WordPosterior::none_class`].
pub fn decode_words(post: &WordPosterior) -> Vec<usize> {
    (0..post.tokens())
        .filter(|l| !post.separators.contains(l))
        .map(|l| crate::send::argmax(post.row(l)))
        .collect()
}

/// Node handles produced by one forward pass.
pub struct TiNodes {
    pub logits: NodeId,
    /// `L x N` word-speaker similarities.
    pub similarity: NodeId,
    /// `L x T` alignment weights.
    pub alignment: NodeId,
}

#[derive(Clone, Debug)]
pub struct SendTiNet {
    pub config: SendTiConfig,
    speech: Fsmn,
    speaker: Fcn,
    embedding: ParamId,
    text: SelfAttentionEncoder,
    pub aligner: AttentionAligner,
    post: PostNetwork,
}

impl SendTiNet {
    /// Speech and speaker encoders use the same parameter names as the
    /// frame-level model, so a SEND checkpoint can warm-start them.
    pub fn new(config: SendTiConfig, store: &mut ParamStore, seed: u64) -> Result<Self, SendError> {
        config.validate()?;
        let mut rng = rng_for(seed, "init", 0);
        let speech = Fsmn::new(store, "speech", config.feature_dim, &config.speech_fsmn(), &mut rng);
        let dims = speaker_dims(
            config.embedding_dim,
            config.speaker_layers,
            config.speaker_hidden,
            config.encoding_dim,
        );
        let speaker = Fcn::new(store, "speaker", &dims, &mut rng);
        let d = config.encoding_dim;
        let table = crate::nnet::uniform(&mut rng, config.vocab_size + 1, d, 1.0);
        let embedding = store.add("text.embedding", table);
        let text = SelfAttentionEncoder::new(store, "text.encoder", &config.text_attention(), &mut rng);
        let aligner = AttentionAligner::new(store, "align", d, &mut rng);
        let post = PostNetwork::new(
            store,
            config.post_net,
            config.capacity,
            &config.post_fsmn(),
            config.post_fcn_hidden,
            config.num_classes(),
            &mut rng,
        );
        Ok(Self {
            config,
            speech,
            speaker,
            embedding,
            text,
            aligner,
            post,
        })
    }

    fn check_inputs(&self, x: &Tensor, bank: &SpeakerBank, tokens: &TokenSequence) -> Result<(), SendError> {
        let c = &self.config;
        if x.rows() == 0 || tokens.is_empty() {
            return Err(SendError::Input("empty frames or tokens".into()));
        }
        if x.cols() != c.feature_dim {
            return Err(SendError::Input(format!(
                "features have {} dims, model expects {}",
                x.cols(),
                c.feature_dim
            )));
        }
        if bank.capacity() != c.capacity || bank.dim() != c.embedding_dim {
            return Err(SendError::Input(format!(
                "bank is {}x{}, model expects {}x{}",
                bank.capacity(),
                bank.dim(),
                c.capacity,
                c.embedding_dim
            )));
        }
        if let Some(&t) = tokens.tokens().iter().find(|&&t| t > c.vocab_size) {
            return Err(SendError::Input(format!("token {t} outside the vocabulary")));
        }
        Ok(())
    }

    /// Builds the pass up to the logits. With `mask_speech` the speech
    /// encodings are replaced by zeros.
    pub fn build(
        &self,
        g: &mut Graph,
        x: NodeId,
        bank: NodeId,
        tokens: &[usize],
        mask_speech: bool,
    ) -> Result<TiNodes, AutodiffError> {
        let mut h = self.speech.forward(g, x)?;
        if mask_speech {
            h = g.scale(h, 0.0);
        }
        let e = self.speaker.forward(g, bank)?;
        let table = g.param(self.embedding);
        let z = g.embedding(table, tokens)?;
        let u = self.text.forward(g, z)?.output;
        let aligned = self.aligner.forward(g, u, h)?;
        let a = similarity_node(g, aligned.aggregated, e, Metric::SigmaDot)?;
        let logits = self.post.forward(g, a)?;
        Ok(TiNodes {
            logits,
            similarity: a,
            alignment: aligned.weights,
        })
    }

    /// Mean cross-entropy over word tokens. Separator rows are left out of
    /// the loss; their targets are ignored.
    pub fn loss_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        bank: NodeId,
        tokens: &TokenSequence,
        targets: &[usize],
    ) -> Result<NodeId, SendError> {
        if targets.len() != tokens.len() {
            return Err(SendError::Input(format!(
                "{} targets for {} tokens",
                targets.len(),
                tokens.len()
            )));
        }
        let nodes = self.build(g, x, bank, tokens.tokens(), false)?;
        let sep = tokens.separator();
        let words: Vec<usize> = (0..tokens.len()).filter(|&l| tokens.tokens()[l] != sep).collect();
        let word_targets: Vec<usize> = words.iter().map(|&l| targets[l]).collect();
        let rows = g.embedding(nodes.logits, &words)?;
        Ok(g.softmax_cross_entropy(rows, &word_targets)?)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor,
        bank: &SpeakerBank,
        tokens: &TokenSequence,
        mask_speech: bool,
    ) -> Result<WordPosterior, SendError> {
        self.check_inputs(x, bank, tokens)?;
        let mut g = Graph::new(store);
        let xn = g.input(x.clone());
        let bn = g.input(bank.to_tensor());
        let nodes = self.build(&mut g, xn, bn, tokens.tokens(), mask_speech)?;
        let p = g.softmax_rows(nodes.logits);
        Ok(WordPosterior::new(g.value(p).clone(), tokens.sc_positions().to_vec()))
    }
}

#[derive(Clone, Debug)]
pub struct SendTiModel {
    pub net: SendTiNet,
    pub store: ParamStore,
    pub seed: u64,
}

impl SendTiModel {
    pub fn new(config: SendTiConfig, seed: u64) -> Result<Self, SendError> {
        let mut store = ParamStore::new();
        let net = SendTiNet::new(config, &mut store, seed)?;
        Ok(Self { net, store, seed })
    }

    pub fn config(&self) -> &SendTiConfig {
        &self.net.config
    }

    pub fn forward(&self, x: &Tensor, bank: &SpeakerBank, tokens: &TokenSequence) -> Result<WordPosterior, SendError> {
        self.net.forward(&self.store, x, bank, tokens, false)
    }

    /// Forward pass with the speech encodings zeroed.
    pub fn forward_text_only(
        &self,
        x: &Tensor,
        bank: &SpeakerBank,
        tokens: &TokenSequence,
    ) -> Result<WordPosterior, SendError> {
        self.net.forward(&self.store, x, bank, tokens, true)
    }

    /// Copies the speech and speaker encoders of a SEND model. Returns the
    /// number of tensors copied; shapes must agree.
    pub fn warm_start(&mut self, send: &SendModel) -> Result<usize, SendError> {
        let mut subset = ParamStore::new();
        for (_, p) in send.store.iter() {
            if p.name.starts_with("speech.") || p.name.starts_with("speaker.") {
                subset.add(p.name.clone(), p.value.clone());
            }
        }
        let copied = self.store.copy_matching(&subset);
        if copied != subset.len() {
            return Err(SendError::Config(format!(
                "only {copied} of {} encoder tensors fit this model",
                subset.len()
            )));
        }
        Ok(copied)
    }

    pub fn save(&self, dir: &Path) -> Result<(), SendError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(TI_CONFIG_FILE), self.config().to_toml())?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SendError> {
        let config = SendTiConfig::from_toml(&fs::read_to_string(dir.join(TI_CONFIG_FILE))?)?;
        let mut model = Self::new(config, 0)?;
        let loaded = ParamStore::load(dir)?;
        restore(&mut model.store, &loaded)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::send::SlotRole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> SendTiConfig {
        SendTiConfig {
            feature_dim: 6,
            embedding_dim: 5,
            encoding_dim: 8,
            capacity: 4,
            vocab_size: 7,
            speech_blocks: 1,
            speech_hidden: 6,
            speech_filter: 3,
            speaker_layers: 2,
            speaker_hidden: 6,
            text_blocks: 1,
            text_heads: 2,
            text_ffn: 6,
            positional: true,
            post_net: PostNet::FsmnFcn,
            post_blocks: 1,
            post_hidden: 5,
            post_filter: 3,
            post_fcn_hidden: 6,
        }
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bank(rng: &mut impl Rng) -> SpeakerBank {
        let e = (0..4).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        SpeakerBank::new(e, vec![SlotRole::Positive; 4]).unwrap()
    }

    fn seq(tokens: &[usize]) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), vec![], 7).unwrap()
    }

    #[test]
    fn rows_sum_to_one() {
        let model = SendTiModel::new(tiny(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let post = model.forward(&random(&mut rng, 9, 6), &bank(&mut rng), &seq(&[1, 2, 3, 0, 6])).unwrap();
        assert_eq!((post.tokens(), post.probs().cols()), (5, 5));
        for l in 0..5 {
            assert!((post.row(l).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_word_single_frame() {
        let model = SendTiModel::new(tiny(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let post = model.forward(&random(&mut rng, 1, 6), &bank(&mut rng), &seq(&[4])).unwrap();
        assert_eq!(post.tokens(), 1);
        assert!((post.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn similarities_are_bounded_and_alignment_rows_normalized() {
        let model = SendTiModel::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 11, 6).data().iter().map(|v| v * 50.0).collect();
        let x = Tensor::matrix(11, 6, x).unwrap();
        let b = bank(&mut rng);
        let mut g = Graph::new(&model.store);
        let xn = g.input(x);
        let bn = g.input(b.to_tensor());
        let nodes = model.net.build(&mut g, xn, bn, &[1, 2, 7, 3], false).unwrap();
        let d = model.config().encoding_dim as f64;
        assert!(g.value(nodes.similarity).data().iter().all(|v| v.abs() <= d));
        let w = g.value(nodes.alignment);
        assert_eq!((w.rows(), w.cols()), (4, 11));
        for l in 0..4 {
            assert!((w.row(l).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn repeated_tokens_without_positions_get_identical_rows() {
        let mut c = tiny();
        c.positional = false;
        c.post_net = PostNet::Fcn;
        let model = SendTiModel::new(c, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let post = model.forward(&random(&mut rng, 6, 6), &bank(&mut rng), &seq(&[5, 5, 5])).unwrap();
        assert_eq!(post.row(0), post.row(1));
        assert_eq!(post.row(1), post.row(2));
    }

    #[test]
    fn decode_examples() {
        let probs = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![0.1, 0.1, 0.8],
            vec![0.4, 0.4, 0.2],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        let post = WordPosterior::new(probs, vec![1]);
        assert_eq!(decode_words(&post), vec![1, 0, 0]);
        assert_eq!(post.none_class(), 2);
    }

    #[test]
    fn masked_speech_ignores_speech_and_bank() {
        let model = SendTiModel::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = seq(&[1, 2, 3]);
        let a = model.forward_text_only(&random(&mut rng, 7, 6), &bank(&mut rng), &tokens).unwrap();
        let b = model.forward_text_only(&random(&mut rng, 7, 6), &bank(&mut rng), &tokens).unwrap();
        for l in 0..3 {
            for (p, q) in a.row(l).iter().zip(b.row(l)) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn full_model_gradients() {
        for post_net in [PostNet::FsmnFcn, PostNet::Fcn] {
            for seed in 0..3 {
                let mut c = tiny();
                c.post_net = post_net;
                let model = SendTiModel::new(c, seed).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let x = random(&mut rng, 8, 6);
                let b = bank(&mut rng);
                let tokens = TokenSequence::new(vec![1, 7, 2, 3], vec![1], 7).unwrap();
                let err = grad_check(
                    &model.store,
                    |g| {
                        let xn = g.input(x.clone());
                        let bn = g.input(b.to_tensor());
                        model
                            .net
                            .loss_node(g, xn, bn, &tokens, &[0, 4, 2, 1])
                            .map_err(|e| AutodiffError::Shape(e.to_string()))
                    },
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-4, "{post_net:?} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn input_errors() {
        let model = SendTiModel::new(tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = bank(&mut rng);
        assert!(model.forward(&Tensor::zeros(&[0, 6]), &b, &seq(&[1])).is_err());
        assert!(model.forward(&random(&mut rng, 3, 6), &b, &seq(&[])).is_err());
        assert!(model.forward(&random(&mut rng, 3, 5), &b, &seq(&[1])).is_err());
        let mut c = tiny();
        c.post_net = PostNet::None;
        assert!(SendTiModel::new(c, 0).is_err());
    }

    #[test]
    fn warm_start_and_checkpoint() {
        use crate::send::{Head, SendConfig};
        let t = tiny();
        let send_cfg = SendConfig {
            feature_dim: t.feature_dim,
            embedding_dim: t.embedding_dim,
            encoding_dim: t.encoding_dim,
            capacity: t.capacity,
            max_overlap: 2,
            metric: Metric::SigmaDot,
            head: Head::Pse,
            post_net: PostNet::Fcn,
            speech_blocks: t.speech_blocks,
            speech_hidden: t.speech_hidden,
            speech_filter: t.speech_filter,
            speaker_layers: t.speaker_layers,
            speaker_hidden: t.speaker_hidden,
            post_blocks: 1,
            post_hidden: 4,
            post_filter: 3,
            post_fcn_hidden: 4,
        };
        let send = SendModel::new(send_cfg, 77).unwrap();
        let mut ti = SendTiModel::new(t, 1).unwrap();
        let copied = ti.warm_start(&send).unwrap();
        assert!(copied > 0);
        let id = ti.store.id_of("speech.block0.memory").unwrap();
        let sid = send.store.id_of("speech.block0.memory").unwrap();
        assert_eq!(ti.store.get(id).value, send.store.get(sid).value);

        let dir = tempfile::tempdir().unwrap();
        ti.save(dir.path()).unwrap();
        let back = SendTiModel::load(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, b) = (random(&mut rng, 5, 6), bank(&mut rng));
        let tokens = seq(&[1, 2]);
        assert_eq!(ti.forward(&x, &b, &tokens).unwrap(), back.forward(&x, &b, &tokens).unwrap());
    }
}
