//! The frame-level model: speech encoder, speaker encoder, similarity
//! matrix and post-net, with a power-set softmax head or a per-speaker
//! sigmoid head.

mod bank;
mod posterior;
mod train;

pub use bank::{augment_bank, cluster_centers, SlotRole, SpeakerBank};
pub use posterior::{decode_frames, send_loss, DiarizationPosterior, Targets};
pub(crate) use posterior::argmax;
pub use train::{
    best_threshold, evaluate, train, validation_posteriors, EpochRecord, TrainConfig, TrainReport,
};
#[allow(unused_imports)]
pub(crate) use train::{optimize, SampleLoss};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamStore, Tensor};
use crate::corpus::CorpusError;
use crate::nnet::{Fcn, Fsmn, FsmnConfig};
use crate::pse::{build_valid_table, labels_to_classes, FrameLabels, OverflowPolicy, PseError, ValidLabelTable};
use crate::scoring::ScoringError;
use crate::seeding::rng_for;
use crate::similarity::{similarity_node, Metric};

pub const MODEL_CONFIG_FILE: &str = "model.toml";

#[derive(Debug, Error)]
pub enum SendError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("speaker bank: {0}")]
    Bank(String),
    #[error("{0}")]
    Input(String),
    #[error("multi-label decoding needs a threshold")]
    MissingThreshold,
    #[error("power-set decoding takes no threshold")]
    UnexpectedThreshold,
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Pse(#[from] PseError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Softmax over the valid power-set classes.
    Pse,
    /// Independent sigmoid per speaker slot.
    Multilabel,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostNet {
    /// Similarities are the logits.
    None,
    Fcn,
    FsmnFcn,
}

impl PostNet {
    pub fn name(self) -> &'static str {
        match self {
            PostNet::None => "none",
            PostNet::Fcn => "fcn",
            PostNet::FsmnFcn => "fsmn_fcn",
        }
    }
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Pse => "pse",
            Head::Multilabel => "multilabel",
        }
    }
}

/// Model hyper-parameters. Defaults follow the full-size setup (N = 16,
/// K = 3, eight 512-unit FSMN blocks with 31 taps); desk runs shrink them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SendConfig {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Width `D` of speech and speaker encodings.
    pub encoding_dim: usize,
    /// Bank slots `N`.
    pub capacity: usize,
    /// Most simultaneous speakers `K` the power-set head can emit.
    pub max_overlap: usize,
    pub metric: Metric,
    pub head: Head,
    pub post_net: PostNet,
    pub speech_blocks: usize,
    pub speech_hidden: usize,
    pub speech_filter: usize,
    pub speaker_layers: usize,
    pub speaker_hidden: usize,
    pub post_blocks: usize,
    pub post_hidden: usize,
    pub post_filter: usize,
    pub post_fcn_hidden: usize,
}

impl Default for SendConfig {
    fn default() -> Self {
        Self {
            feature_dim: 560,
            embedding_dim: 512,
            encoding_dim: 512,
            capacity: 16,
            max_overlap: 3,
            metric: Metric::SigmaDot,
            head: Head::Pse,
            post_net: PostNet::FsmnFcn,
            speech_blocks: 8,
            speech_hidden: 512,
            speech_filter: 31,
            speaker_layers: 3,
            speaker_hidden: 512,
            post_blocks: 2,
            post_hidden: 64,
            post_filter: 31,
            post_fcn_hidden: 256,
        }
    }
}

impl SendConfig {
    pub fn validate(&self) -> Result<(), SendError> {
        let bad = |m: &str| Err(SendError::Config(m.into()));
        if self.head == Head::Pse && self.post_net == PostNet::None {
            return bad("the power-set head needs a post-net");
        }
        if [
            self.feature_dim,
            self.embedding_dim,
            self.encoding_dim,
            self.capacity,
            self.speaker_layers,
            self.speaker_hidden,
        ]
        .contains(&0)
        {
            return bad("dimensions must be positive");
        }
        build_valid_table(self.max_overlap, self.capacity)?;
        self.speech_fsmn().validate().map_err(SendError::Config)?;
        if self.post_net == PostNet::FsmnFcn {
            self.post_fsmn().validate().map_err(SendError::Config)?;
        }
        if self.post_net != PostNet::None && self.post_fcn_hidden == 0 {
            return bad("post-net FCN width must be positive");
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

    /// Post-net FSMN keeps the slot width `N` as its memory width.
    pub fn post_fsmn(&self) -> FsmnConfig {
        FsmnConfig {
            num_blocks: self.post_blocks,
            hidden_units: self.post_hidden,
            filter_size: self.post_filter,
            projection_dim: self.capacity,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Pse => crate::pse::valid_label_count(self.max_overlap, self.capacity) as usize,
            Head::Multilabel => self.capacity,
        }
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

/// Maps the `T x N` similarity matrix to per-frame logits.
#[derive(Clone, Debug)]
pub(crate) enum PostNetwork {
    None,
    Fcn(Fcn),
    FsmnFcn(Fsmn, Fcn),
}

impl PostNetwork {
    pub(crate) fn new(
        store: &mut ParamStore,
        kind: PostNet,
        width: usize,
        fsmn: &FsmnConfig,
        fcn_hidden: usize,
        out: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        match kind {
            PostNet::None => PostNetwork::None,
            PostNet::Fcn => PostNetwork::Fcn(Fcn::new(store, "post.fcn", &[width, fcn_hidden, out], rng)),
            PostNet::FsmnFcn => {
                let f = Fsmn::new(store, "post.fsmn", width, fsmn, rng);
                let width = fsmn.projection_dim;
                PostNetwork::FsmnFcn(f, Fcn::new(store, "post.fcn", &[width, fcn_hidden, out], rng))
            }
        }
    }

    pub(crate) fn forward(&self, g: &mut Graph, a: NodeId) -> Result<NodeId, AutodiffError> {
        match self {
            PostNetwork::None => Ok(a),
            PostNetwork::Fcn(fcn) => fcn.forward(g, a),
            PostNetwork::FsmnFcn(fsmn, fcn) => {
                let h = fsmn.forward(g, a)?;
                fcn.forward(g, h)
            }
        }
    }
}

/// Parameter handles of a SEND network; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct SendNet {
    pub config: SendConfig,
    speech: Fsmn,
    speaker: Fcn,
    post: PostNetwork,
    table: ValidLabelTable,
}

pub(crate) fn speaker_dims(embedding_dim: usize, layers: usize, hidden: usize, out: usize) -> Vec<usize> {
    let mut dims = vec![embedding_dim];
    dims.extend(std::iter::repeat(hidden).take(layers - 1));
    dims.push(out);
    dims
}

impl SendNet {
    pub fn new(config: SendConfig, store: &mut ParamStore, seed: u64) -> Result<Self, SendError> {
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
        let post = PostNetwork::new(
            store,
            config.post_net,
            config.capacity,
            &config.post_fsmn(),
            config.post_fcn_hidden,
            config.output_dim(),
            &mut rng,
        );
        let table = build_valid_table(config.max_overlap, config.capacity)?;
        Ok(Self {
            config,
            speech,
            speaker,
            post,
            table,
        })
    }

    pub fn table(&self) -> &ValidLabelTable {
        &self.table
    }

    pub fn check_inputs(&self, x: &Tensor, bank: &SpeakerBank) -> Result<(), SendError> {
        let c = &self.config;
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
        Ok(())
    }

    /// Speech encodings `H` (`T x D`).
    pub fn speech_encodings(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.speech.forward(g, x)
    }

    /// Speaker encodings `E` (`N x D`).
    pub fn speaker_encodings(&self, g: &mut Graph, bank: NodeId) -> Result<NodeId, AutodiffError> {
        self.speaker.forward(g, bank)
    }

    /// Similarity matrix `A` (`T x N`).
    pub fn similarity(&self, g: &mut Graph, x: NodeId, bank: NodeId) -> Result<NodeId, AutodiffError> {
        let h = self.speech_encodings(g, x)?;
        let e = self.speaker_encodings(g, bank)?;
        similarity_node(g, h, e, self.config.metric)
    }

    pub fn logits(&self, g: &mut Graph, x: NodeId, bank: NodeId) -> Result<NodeId, AutodiffError> {
        let a = self.similarity(g, x, bank)?;
        self.post.forward(g, a)
    }

    /// Posterior node: row softmax (power-set head) or sigmoid.
    pub fn posterior_node(&self, g: &mut Graph, x: NodeId, bank: NodeId) -> Result<NodeId, AutodiffError> {
        let z = self.logits(g, x, bank)?;
        Ok(match self.config.head {
            Head::Pse => g.softmax_rows(z),
            Head::Multilabel => g.sigmoid(z),
        })
    }

    pub fn loss_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        bank: NodeId,
        targets: &Targets,
    ) -> Result<NodeId, SendError> {
        let z = self.logits(g, x, bank)?;
        match (self.config.head, targets) {
            (Head::Pse, Targets::Classes(c)) => Ok(g.softmax_cross_entropy(z, c)?),
            (Head::Multilabel, Targets::Labels(l)) => {
                let p = g.sigmoid(z);
                let y: Vec<f64> = l.as_flat().iter().map(|&v| v as f64).collect();
                Ok(g.binary_cross_entropy(p, &y)?)
            }
            _ => Err(SendError::Input("target kind does not match the head".into())),
        }
    }

    /// Training targets from bank-aligned `T x N` labels.
    pub fn targets(&self, labels: &FrameLabels, policy: &OverflowPolicy) -> Result<Targets, SendError> {
        Ok(match self.config.head {
            Head::Pse => Targets::Classes(labels_to_classes(labels, &self.table, policy)?),
            Head::Multilabel => {
                if labels.speakers() != self.config.capacity {
                    return Err(SendError::Input(format!(
                        "labels have {} columns, bank has {}",
                        labels.speakers(),
                        self.config.capacity
                    )));
                }
                Targets::Labels(labels.clone())
            }
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, bank: &SpeakerBank) -> Result<DiarizationPosterior, SendError> {
        self.check_inputs(x, bank)?;
        let mut g = Graph::new(store);
        let xn = g.input(x.clone());
        let bn = g.input(bank.to_tensor());
        let p = self.posterior_node(&mut g, xn, bn)?;
        Ok(DiarizationPosterior::new(self.config.head, g.value(p).clone()))
    }
}

/// A SEND network together with its parameter values.
#[derive(Clone, Debug)]
pub struct SendModel {
    pub net: SendNet,
    pub store: ParamStore,
    pub seed: u64,
}

impl SendModel {
    pub fn new(config: SendConfig, seed: u64) -> Result<Self, SendError> {
        let mut store = ParamStore::new();
        let net = SendNet::new(config, &mut store, seed)?;
        Ok(Self { net, store, seed })
    }

    pub fn config(&self) -> &SendConfig {
        &self.net.config
    }

    pub fn table(&self) -> &ValidLabelTable {
        self.net.table()
    }

    pub fn forward(&self, x: &Tensor, bank: &SpeakerBank) -> Result<DiarizationPosterior, SendError> {
        self.net.forward(&self.store, x, bank)
    }

    /// Writes `model.toml` and the parameter checkpoint into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SendError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_CONFIG_FILE), self.config().to_toml())?;
        self.store.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SendError> {
        let config = SendConfig::from_toml(&fs::read_to_string(dir.join(MODEL_CONFIG_FILE))?)?;
        let mut model = Self::new(config, 0)?;
        let loaded = ParamStore::load(dir)?;
        restore(&mut model.store, &loaded)?;
        Ok(model)
    }
}

/// Copies every parameter of `loaded` into `store`, requiring an exact
/// match of names and shapes.
pub(crate) fn restore(store: &mut ParamStore, loaded: &ParamStore) -> Result<(), SendError> {
    if loaded.len() != store.len() || store.copy_matching(loaded) != store.len() {
        return Err(AutodiffError::Checkpoint("parameters do not match the model config".into()).into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::pse::FrameLabels;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(head: Head, post_net: PostNet, metric: Metric) -> SendConfig {
        SendConfig {
            feature_dim: 6,
            embedding_dim: 5,
            encoding_dim: 8,
            capacity: 4,
            max_overlap: 2,
            metric,
            head,
            post_net,
            speech_blocks: 2,
            speech_hidden: 7,
            speech_filter: 3,
            speaker_layers: 2,
            speaker_hidden: 6,
            post_blocks: 1,
            post_hidden: 5,
            post_filter: 3,
            post_fcn_hidden: 6,
        }
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_bank(rng: &mut impl Rng, n: usize, d: usize) -> SpeakerBank {
        let e: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        SpeakerBank::new(e, vec![SlotRole::Positive; n]).unwrap()
    }

    #[test]
    fn config_rules() {
        assert!(tiny(Head::Pse, PostNet::None, Metric::Dot).validate().is_err());
        assert!(tiny(Head::Multilabel, PostNet::None, Metric::Dot).validate().is_ok());
        assert_eq!(tiny(Head::Pse, PostNet::Fcn, Metric::Dot).output_dim(), 11);
        assert_eq!(tiny(Head::Multilabel, PostNet::Fcn, Metric::Dot).output_dim(), 4);
        assert_eq!(SendConfig::default().output_dim(), 697);
        let c = tiny(Head::Pse, PostNet::FsmnFcn, Metric::Cosine);
        assert_eq!(SendConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(SendConfig::from_toml("capacity = 2\nmax_overlap = 3").is_err());
        assert!(SendConfig::from_toml("speech_filter = 4").is_err());
        assert!(SendConfig::from_toml("head = \"softmax\"").is_err());
    }

    #[test]
    fn zero_bank_sigma_dot_gives_one_half() {
        let c = tiny(Head::Multilabel, PostNet::None, Metric::SigmaDot);
        let model = SendModel::new(c, 0).unwrap();
        // With zero biases the speaker encoder maps zero vectors to zero.
        let bank = SpeakerBank::inference(&[vec![0.0; 5]], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let post = model.forward(&random(&mut rng, 9, 6), &bank).unwrap();
        assert!(post.probs().data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn pse_rows_sum_to_one_and_frames_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for post_net in [PostNet::Fcn, PostNet::FsmnFcn] {
            let model = SendModel::new(tiny(Head::Pse, post_net, Metric::SigmaDot), 3).unwrap();
            let post = model.forward(&random(&mut rng, 13, 6), &random_bank(&mut rng, 4, 5)).unwrap();
            assert_eq!(post.frames(), 13);
            assert_eq!(post.width(), 11);
            for t in 0..13 {
                assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multilabel_without_post_net_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for metric in Metric::ALL {
            let model = SendModel::new(tiny(Head::Multilabel, PostNet::None, metric), 5).unwrap();
            let x = random(&mut rng, 10, 6);
            let bank = random_bank(&mut rng, 4, 5);
            let order = [2, 0, 3, 1];
            let a = model.forward(&x, &bank).unwrap();
            let b = model.forward(&x, &bank.permuted(&order)).unwrap();
            for t in 0..10 {
                for (j, &src) in order.iter().enumerate() {
                    assert_eq!(b.get(t, j), a.get(t, src));
                }
            }
        }
    }

    #[test]
    fn identical_encoder_outputs_give_identical_frame_posteriors() {
        // Constant input frames through framewise layers: every frame's
        // posterior must match exactly.
        let mut c = tiny(Head::Pse, PostNet::Fcn, Metric::Dot);
        c.speech_filter = 1;
        let model = SendModel::new(c, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_rows(&vec![row; 7]).unwrap();
        let post = model.forward(&x, &random_bank(&mut rng, 4, 5)).unwrap();
        for t in 1..7 {
            assert_eq!(post.row(t), post.row(0));
        }
    }

    #[test]
    fn full_model_gradients() {
        for (i, (head, post_net)) in [
            (Head::Pse, PostNet::FsmnFcn),
            (Head::Pse, PostNet::Fcn),
            (Head::Multilabel, PostNet::None),
            (Head::Multilabel, PostNet::FsmnFcn),
        ]
        .into_iter()
        .enumerate()
        {
            for metric in Metric::ALL {
                let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
                let model = SendModel::new(tiny(head, post_net, metric), i as u64).unwrap();
                let x = random(&mut rng, 8, 6);
                let bank = random_bank(&mut rng, 4, 5);
                let labels = FrameLabels::from_rows(
                    &(0..8).map(|t| vec![(t % 2) as u8, (t % 3 == 0) as u8, 0, 0]).collect::<Vec<_>>(),
                )
                .unwrap();
                let targets = model.net.targets(&labels, &OverflowPolicy::Reject).unwrap();
                let err = grad_check(
                    &model.store,
                    |g| {
                        let xn = g.input(x.clone());
                        let bn = g.input(bank.to_tensor());
                        model
                            .net
                            .loss_node(g, xn, bn, &targets)
                            .map_err(|e| AutodiffError::Shape(e.to_string()))
                    },
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-4, "{head:?} {post_net:?} {metric:?}: {err}");
            }
        }
    }

    #[test]
    fn shape_errors() {
        let model = SendModel::new(tiny(Head::Pse, PostNet::Fcn, Metric::Dot), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(model.forward(&random(&mut rng, 3, 5), &random_bank(&mut rng, 4, 5)).is_err());
        assert!(model.forward(&random(&mut rng, 3, 6), &random_bank(&mut rng, 3, 5)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = SendModel::new(tiny(Head::Pse, PostNet::FsmnFcn, Metric::SigmaDot), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = SendModel::load(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (x, bank) = (random(&mut rng, 5, 6), random_bank(&mut rng, 4, 5));
        assert_eq!(model.forward(&x, &bank).unwrap(), back.forward(&x, &bank).unwrap());
        // A checkpoint from a different architecture is rejected.
        let other = SendModel::new(tiny(Head::Multilabel, PostNet::None, Metric::Dot), 0).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        other.store.save(dir2.path()).unwrap();
        fs::write(dir2.path().join(MODEL_CONFIG_FILE), model.config().to_toml()).unwrap();
        assert!(SendModel::load(dir2.path()).is_err());
    }
}
