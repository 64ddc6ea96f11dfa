//! Tape of 2-D tensor primitives with reverse-mode gradients.
//!
//! Every node value is a `rows x cols` matrix; scalars are `1 x 1`.
//! Parameters enter the tape as leaves referring back to a [`ParamStore`];
//! [`Graph::backward`] returns their gradients keyed by [`ParamId`].

use super::{AutodiffError, ParamId, ParamStore, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// a · bᵀ
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a `1 x cols` row to every row.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    /// Mean over rows of -log softmax(logits)[target].
    SoftmaxCrossEntropy { logits: NodeId, targets: Vec<usize> },
    /// Mean over entries of the binary cross-entropy of probabilities.
    BinaryCrossEntropy { probs: NodeId, targets: Vec<f64> },
    /// Per-channel FIR filter along rows (time), zero-padded, centered.
    SeqConv { x: NodeId, taps: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    Embedding { table: NodeId, indices: Vec<usize> },
    Sum(NodeId),
    Mean(NodeId),
    L2NormalizeRows(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A recorded computation. Build it with the primitive methods, then call
/// [`Graph::backward`] on a scalar node.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += av * y;
            }
        }
    }
    out
}

/// a (m×k) · bᵀ where b is n×k.
fn matmul_t_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// aᵀ (k×m → m×k transposed) · b where a is k×m and b is k×n.
fn t_matmul_raw(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            for (x, y) in o.iter_mut().zip(br) {
                *x += av * y;
            }
        }
    }
    out
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) {
    match acc {
        Some(a) => {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
        None => *acc = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &str, msg: String) -> AutodiffError {
        AutodiffError::Shape(format!("node {} ({op}): {msg}", self.nodes.len()))
    }

    fn as_matrix(t: Tensor) -> Tensor {
        if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = dims(&t);
            Tensor::from_parts(vec![r, c], t.into_data())
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Self::as_matrix(t), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = Self::as_matrix(self.store.get(id).value.clone());
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_t_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<(), AutodiffError> {
        if dims(self.value(a)) != dims(self.value(b)) {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", dims(self.value(a)), dims(self.value(b))),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("add", a, b)?;
        let (r, c) = dims(self.value(a));
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let (rr, rc) = dims(self.value(row));
        if rr != 1 || rc != c {
            return Err(self.shape_err("add_row", format!("{r}x{c} + {rr}x{rc}")));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(c) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let (r, c) = dims(self.value(a));
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.push(Tensor::from_parts(vec![r, c], out), Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|x| x.tanh()).collect();
        self.push(Tensor::from_parts(vec![r, c], out), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        self.push(Tensor::from_parts(vec![r, c], out), Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims(self.value(a));
        let mut out = vec![0.0; r * c];
        for (src, dst) in self
            .value(a)
            .data()
            .chunks_exact(c)
            .zip(out.chunks_exact_mut(c))
        {
            softmax_row(src, dst);
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(a))
    }

    /// Fused softmax + cross-entropy averaged over rows, computed with
    /// log-sum-exp so saturated logits do not overflow.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let (r, c) = dims(self.value(logits));
        if targets.len() != r {
            return Err(self.shape_err(
                "softmax_cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::TargetOutOfRange { target: bad, classes: c });
        }
        let mut total = 0.0;
        for (row, &t) in self.value(logits).data().chunks_exact(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities against {0,1} targets.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]` before the log.
    pub fn binary_cross_entropy(
        &mut self,
        probs: NodeId,
        targets: &[f64],
    ) -> Result<NodeId, AutodiffError> {
        let n = self.value(probs).len();
        if targets.len() != n {
            return Err(self.shape_err(
                "binary_cross_entropy",
                format!("{} targets for {n} entries", targets.len()),
            ));
        }
        let total: f64 = self
            .value(probs)
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Centered FIR filter over the row (time) axis. `taps` is
    /// `filter_size x channels` with an odd filter size; tap `k` weights
    /// frame `t + k - filter_size/2`. Out-of-range frames contribute zero.
    pub fn seq_conv(&mut self, x: NodeId, taps: NodeId) -> Result<NodeId, AutodiffError> {
        let (t_len, c) = dims(self.value(x));
        let (k, tc) = dims(self.value(taps));
        if tc != c || k % 2 == 0 {
            return Err(self.shape_err(
                "seq_conv",
                format!("input {t_len}x{c}, taps {k}x{tc} (need odd taps, matching channels)"),
            ));
        }
        let half = (k / 2) as isize;
        let xv = self.value(x).data();
        let wv = self.value(taps).data();
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len as isize {
            let o = &mut out[t as usize * c..(t as usize + 1) * c];
            for j in 0..k as isize {
                let src = t + j - half;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xr = &xv[src as usize * c..(src as usize + 1) * c];
                let wr = &wv[j as usize * c..(j as usize + 1) * c];
                for ((ov, xv), wv) in o.iter_mut().zip(xr).zip(wr) {
                    *ov += xv * wv;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![t_len, c], out),
            Op::SeqConv { x, taps },
        ))
    }

    /// Row-wise layer normalization with learned `1 x cols` gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        let (r, c) = dims(self.value(x));
        if dims(self.value(gamma)) != (1, c) || dims(self.value(beta)) != (1, c) {
            return Err(self.shape_err("layer_norm", format!("gain/bias must be 1x{c}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(x).data().chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..c {
                dst[i] = (src[i] - mean) * inv * g[i] + b[i];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm { x, gamma, beta },
        ))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, AutodiffError> {
        let (v, d) = dims(self.value(table));
        if indices.is_empty() {
            return Err(self.shape_err("embedding", "no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(self.shape_err("embedding", format!("index {bad} outside table of {v}")));
        }
        let tv = self.value(table).data();
        let out = indices
            .iter()
            .flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Scales each row to unit l2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = dims(self.value(a));
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.push(Tensor::from_parts(vec![r, c], out), Op::L2NormalizeRows(a))
    }

    /// Reverse pass from a scalar node. Returns the loss value and the
    /// gradient of every parameter that reached the tape.
    pub fn backward(&self, loss: NodeId) -> Result<(f64, Gradients), AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut param_grads = Gradients::default();
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            let (r, c) = dims(out);
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => param_grads.add(*pid, g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let k = av.cols();
                    // dA = G · Bᵀ, dB = Aᵀ · G
                    let da = matmul_t_raw(g.data(), bv.data(), r, c, k);
                    let db = t_matmul_raw(av.data(), g.data(), r, k, c);
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, k], da));
                    add_into(&mut grads[b.0], Tensor::from_parts(vec![k, c], db));
                }
                Op::MatMulT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let k = av.cols();
                    // out = A Bᵀ: dA = G · B, dB = Gᵀ · A
                    let da = matmul_raw(g.data(), bv.data(), r, c, k);
                    let db = t_matmul_raw(g.data(), av.data(), r, c, k);
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, k], da));
                    add_into(&mut grads[b.0], Tensor::from_parts(vec![c, k], db));
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], g.clone());
                    add_into(&mut grads[b.0], g);
                }
                Op::AddRow(a, row) => {
                    let mut db = vec![0.0; c];
                    for chunk in g.data().chunks_exact(c) {
                        for (d, x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    add_into(&mut grads[row.0], Tensor::from_parts(vec![1, c], db));
                    add_into(&mut grads[a.0], g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, c], da));
                    add_into(&mut grads[b.0], Tensor::from_parts(vec![r, c], db));
                }
                Op::Scale(a, f) => {
                    let da = g.data().iter().map(|x| x * f).collect();
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, c], da));
                }
                Op::Tanh(a) => {
                    let da = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(x, y)| x * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, c], da));
                }
                Op::Sigmoid(a) => {
                    let da = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(x, y)| x * y * (1.0 - y))
                        .collect();
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, c], da));
                }
                Op::SoftmaxRows(a) => {
                    let mut da = vec![0.0; r * c];
                    for ((gr, yr), dr) in g
                        .data()
                        .chunks_exact(c)
                        .zip(out.data().chunks_exact(c))
                        .zip(da.chunks_exact_mut(c))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for i in 0..c {
                            dr[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, c], da));
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let lv = self.value(*logits);
                    let (lr, lc) = dims(lv);
                    let scale = g.item() / lr as f64;
                    let mut da = vec![0.0; lr * lc];
                    for ((row, dr), &t) in lv
                        .data()
                        .chunks_exact(lc)
                        .zip(da.chunks_exact_mut(lc))
                        .zip(targets)
                    {
                        softmax_row(row, dr);
                        dr[t] -= 1.0;
                        dr.iter_mut().for_each(|x| *x *= scale);
                    }
                    add_into(&mut grads[logits.0], Tensor::from_parts(vec![lr, lc], da));
                }
                Op::BinaryCrossEntropy { probs, targets } => {
                    let pv = self.value(*probs);
                    let (pr, pc) = dims(pv);
                    let scale = g.item() / pv.len() as f64;
                    let da = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &y)| {
                            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                                return 0.0;
                            }
                            scale * ((1.0 - y) / (1.0 - p) - y / p)
                        })
                        .collect();
                    add_into(&mut grads[probs.0], Tensor::from_parts(vec![pr, pc], da));
                }
                Op::SeqConv { x, taps } => {
                    let xv = self.value(*x).data();
                    let wv = self.value(*taps).data();
                    let k = self.value(*taps).rows();
                    let half = (k / 2) as isize;
                    let mut dx = vec![0.0; r * c];
                    let mut dw = vec![0.0; k * c];
                    for t in 0..r as isize {
                        let gr = &g.data()[t as usize * c..(t as usize + 1) * c];
                        for j in 0..k as isize {
                            let src = t + j - half;
                            if src < 0 || src >= r as isize {
                                continue;
                            }
                            let s = src as usize;
                            let ju = j as usize;
                            for ch in 0..c {
                                dx[s * c + ch] += gr[ch] * wv[ju * c + ch];
                                dw[ju * c + ch] += gr[ch] * xv[s * c + ch];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::from_parts(vec![r, c], dx));
                    add_into(&mut grads[taps.0], Tensor::from_parts(vec![k, c], dw));
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.value(*x).data();
                    let gv = self.value(*gamma).data();
                    let mut dx = vec![0.0; r * c];
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for row in 0..r {
                        let src = &xv[row * c..(row + 1) * c];
                        let gr = &g.data()[row * c..(row + 1) * c];
                        let mean = src.iter().sum::<f64>() / c as f64;
                        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = (0..c).map(|i| gr[i] * gv[i]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            dg[i] += gr[i] * xhat[i];
                            db[i] += gr[i];
                            dx[row * c + i] =
                                inv / c as f64 * (c as f64 * dxhat[i] - sum_d - xhat[i] * sum_dx);
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::from_parts(vec![r, c], dx));
                    add_into(&mut grads[gamma.0], Tensor::from_parts(vec![1, c], dg));
                    add_into(&mut grads[beta.0], Tensor::from_parts(vec![1, c], db));
                }
                Op::Embedding { table, indices } => {
                    let (v, d) = dims(self.value(*table));
                    let mut dt = vec![0.0; v * d];
                    for (row, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g.data()[row * d + j];
                        }
                    }
                    add_into(&mut grads[table.0], Tensor::from_parts(vec![v, d], dt));
                }
                Op::Sum(a) => {
                    let (ar, ac) = dims(self.value(*a));
                    let da = vec![g.item(); ar * ac];
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![ar, ac], da));
                }
                Op::Mean(a) => {
                    let (ar, ac) = dims(self.value(*a));
                    let da = vec![g.item() / (ar * ac) as f64; ar * ac];
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![ar, ac], da));
                }
                Op::L2NormalizeRows(a) => {
                    let av = self.value(*a).data();
                    let mut da = vec![0.0; r * c];
                    for row in 0..r {
                        let src = &av[row * c..(row + 1) * c];
                        let norm = src.iter().map(|x| x * x).sum::<f64>().sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let y = &out.data()[row * c..(row + 1) * c];
                        let gr = &g.data()[row * c..(row + 1) * c];
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            da[row * c + i] = (gr[i] - y[i] * dot) / norm;
                        }
                    }
                    add_into(&mut grads[a.0], Tensor::from_parts(vec![r, c], da));
                }
            }
        }
        Ok((lv.item(), param_grads))
    }
}

/// Parameter gradients produced by one reverse pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    fn add(&mut self, id: ParamId, g: Tensor) {
        match self.entries.iter_mut().find(|(p, _)| *p == id) {
            Some((_, acc)) => {
                for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                    *x += y;
                }
            }
            None => self.entries.push((id, g)),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(p, t)| (*p, t))
    }
}
