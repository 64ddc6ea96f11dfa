//! Network building blocks: FSMN stacks, dense stacks, a Transformer-style
//! self-attention encoder and the single-head text/speech aligner.
//!
//! Blocks register their parameters in a [`ParamStore`] under a name
//! prefix and record their forward computation on a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, ParamId, ParamStore, Tensor};

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, input, output, limit));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, output])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsmnConfig {
    pub num_blocks: usize,
    pub hidden_units: usize,
    /// Odd tap count: `filter_size / 2` past frames, the current frame and
    /// `filter_size / 2` future frames.
    pub filter_size: usize,
    pub projection_dim: usize,
}

impl FsmnConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.filter_size % 2 == 0 {
            return Err(format!("FSMN filter size {} must be odd", self.filter_size));
        }
        if self.num_blocks == 0 || self.hidden_units == 0 || self.projection_dim == 0 {
            return Err("FSMN dimensions must be positive".into());
        }
        Ok(())
    }
}

/// One FSMN block:
///
/// ```text
/// hidden = tanh(x · W_in + b_in)
/// p      = hidden · W_proj
/// m_t    = Σ_k taps[k] ⊙ p_{t + k - filter_size/2}     (zero-padded)
/// y      = m + x   when x already has the projection width, else m
/// ```
#[derive(Clone, Debug)]
pub struct FsmnBlock {
    pub inner: Linear,
    pub projection: Linear,
    pub taps: ParamId,
    residual: bool,
}

impl FsmnBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        config: &FsmnConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let inner = Linear::new(store, &format!("{name}.inner"), input, config.hidden_units, true, rng);
        let projection = Linear::new(
            store,
            &format!("{name}.proj"),
            config.hidden_units,
            config.projection_dim,
            false,
            rng,
        );
        let mut taps = uniform(rng, config.filter_size, config.projection_dim, 0.1);
        let center = config.filter_size / 2;
        for c in 0..config.projection_dim {
            taps.data_mut()[center * config.projection_dim + c] = 1.0;
        }
        let taps = store.add(format!("{name}.memory"), taps);
        Self {
            inner,
            projection,
            taps,
            residual: input == config.projection_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let h = self.inner.forward(g, x)?;
        let h = g.tanh(h);
        let p = self.projection.forward(g, h)?;
        let taps = g.param(self.taps);
        let m = g.seq_conv(p, taps)?;
        if self.residual {
            g.add(m, x)
        } else {
            Ok(m)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fsmn {
    pub blocks: Vec<FsmnBlock>,
}

impl Fsmn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        config: &FsmnConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(config.num_blocks);
        let mut width = input;
        for i in 0..config.num_blocks {
            blocks.push(FsmnBlock::new(store, &format!("{name}.block{i}"), width, config, rng));
            width = config.projection_dim;
        }
        Self { blocks }
    }

    /// `T x F` in, `T x projection_dim` out.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        self.blocks.iter().try_fold(x, |h, b| b.forward(g, h))
    }
}

/// Dense stack: affine + tanh between layers, plain affine at the end.
#[derive(Clone, Debug)]
pub struct Fcn {
    pub layers: Vec<Linear>,
}

impl Fcn {
    /// `dims` lists input width then every layer's output width.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an FCN needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.layer{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i != last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_dim: usize,
    /// Add sinusoidal position encodings to the input.
    pub positional: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(format!(
                "model dim {} not divisible by {} heads",
                self.model_dim, self.num_heads
            ));
        }
        Ok(())
    }
}

/// Standard sinusoidal position table, `len x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(len, dim, data).expect("finite table")
}

#[derive(Clone, Debug)]
struct Head {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

#[derive(Clone, Debug)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::matrix(1, dim, vec![1.0; dim]).unwrap());
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]));
        Self { gamma, beta }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, ga, be)
    }
}

/// Post-norm Transformer encoder block: multi-head self-attention and a
/// tanh feed-forward layer, each with residual connection and layer norm.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    heads: Vec<Head>,
    out_bias: ParamId,
    norm1: LayerNormParams,
    ffn_in: Linear,
    ffn_out: Linear,
    norm2: LayerNormParams,
    head_dim: usize,
}

impl SelfAttentionBlock {
    fn new(store: &mut ParamStore, name: &str, config: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = config.model_dim;
        let dh = d / config.num_heads;
        let heads = (0..config.num_heads)
            .map(|h| Head {
                query: Linear::new(store, &format!("{name}.head{h}.q"), d, dh, false, rng),
                key: Linear::new(store, &format!("{name}.head{h}.k"), d, dh, false, rng),
                value: Linear::new(store, &format!("{name}.head{h}.v"), d, dh, false, rng),
                output: Linear::new(store, &format!("{name}.head{h}.o"), dh, d, false, rng),
            })
            .collect();
        Self {
            heads,
            out_bias: store.add(format!("{name}.attn_bias"), Tensor::zeros(&[1, d])),
            norm1: LayerNormParams::new(store, &format!("{name}.norm1"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, config.ffn_dim, true, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), config.ffn_dim, d, true, rng),
            norm2: LayerNormParams::new(store, &format!("{name}.norm2"), d),
            head_dim: dh,
        }
    }

    /// Returns the block output and each head's `L x L` attention weights.
    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Vec<NodeId>), AutodiffError> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut mixed: Option<NodeId> = None;
        let mut weights = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = head.query.forward(g, x)?;
            let k = head.key.forward(g, x)?;
            let v = head.value.forward(g, x)?;
            let logits = g.matmul_t(q, k)?;
            let logits = g.scale(logits, scale);
            let w = g.softmax_rows(logits);
            weights.push(w);
            let ctx = g.matmul(w, v)?;
            let out = head.output.forward(g, ctx)?;
            mixed = Some(match mixed {
                Some(acc) => g.add(acc, out)?,
                None => out,
            });
        }
        let bias = g.param(self.out_bias);
        let attn = g.add_row(mixed.expect("at least one head"), bias)?;
        let x1 = g.add(x, attn)?;
        let x1 = self.norm1.forward(g, x1)?;
        let f = self.ffn_in.forward(g, x1)?;
        let f = g.tanh(f);
        let f = self.ffn_out.forward(g, f)?;
        let x2 = g.add(x1, f)?;
        Ok((self.norm2.forward(g, x2)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttentionEncoder {
    pub config: AttentionConfig,
    blocks: Vec<SelfAttentionBlock>,
}

/// Encoder output plus per-block, per-head attention weights.
pub struct EncoderOutput {
    pub output: NodeId,
    pub attention: Vec<Vec<NodeId>>,
}

impl SelfAttentionEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let blocks = (0..config.num_blocks)
            .map(|b| SelfAttentionBlock::new(store, &format!("{name}.block{b}"), config, rng))
            .collect();
        Self {
            config: config.clone(),
            blocks,
        }
    }

    /// `L x D` token embeddings in, `L x D` encodings out.
    pub fn forward(&self, g: &mut Graph, z: NodeId) -> Result<EncoderOutput, AutodiffError> {
        let mut h = z;
        if self.config.positional {
            let len = g.value(z).rows();
            let pe = g.input(positional_encoding(len, self.config.model_dim));
            h = g.add(h, pe)?;
        }
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, w) = block.forward(g, h)?;
            attention.push(w);
            h = out;
        }
        Ok(EncoderOutput {
            output: h,
            attention,
        })
    }
}

/// Single-head alignment of word encodings over speech encodings:
/// `α = (U W_q)(H W_k)ᵀ`, `a = softmax_t(α)`, `M = a (H W_v)`.
#[derive(Clone, Debug)]
pub struct AttentionAligner {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

pub struct AlignOutput {
    pub aggregated: NodeId,
    pub weights: NodeId,
}

impl AttentionAligner {
    /// The query projection starts at zero, so initial alignment weights
    /// are uniform over frames.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let query = Linear::new(store, &format!("{name}.q"), dim, dim, false, rng);
        store.get_mut(query.weight).value = Tensor::zeros(&[dim, dim]);
        Self {
            query,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, u: NodeId, h: NodeId) -> Result<AlignOutput, AutodiffError> {
        if g.value(h).is_empty() {
            return Err(AutodiffError::Shape("aligner needs at least one frame".into()));
        }
        let q = self.query.forward(g, u)?;
        let k = self.key.forward(g, h)?;
        let v = self.value.forward(g, h)?;
        let logits = g.matmul_t(q, k)?;
        let weights = g.softmax_rows(logits);
        let aggregated = g.matmul(weights, v)?;
        Ok(AlignOutput { aggregated, weights })
    }
}
