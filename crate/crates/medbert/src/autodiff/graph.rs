//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every op applied during a forward pass; calling
//! [`Graph::backward`] on a scalar loss walks the tape in reverse and
//! accumulates gradients into every reachable node that requires them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{mm_acc, mm_ta_acc, mm_tb_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine(NodeId, S, S),
    Matmul(NodeId, NodeId),
    MatmulTransB(NodeId, NodeId),
    Gather(NodeId, Vec<usize>),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    },
    Gelu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<S>,
    },
    MeanRows(NodeId, usize),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    AddN(Vec<NodeId>),
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
    },
    BceLogit {
        logit: NodeId,
        label: bool,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    train: bool,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Graph<S> {
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant (no gradient tracked).
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        id
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::Numerics(name.to_string()));
        }
        let requires_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn op_inputs(&self, op: &Op<S>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulTransB(a, b) => vec![*a, *b],
            Op::Affine(a, _, _)
            | Op::Gather(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Dropout { x: a, .. }
            | Op::MeanRows(a, _)
            | Op::SumAll(a)
            | Op::CrossEntropyRows { logits: a, .. }
            | Op::BceLogit { logit: a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(v) | Op::ConcatRows(v) | Op::AddN(v) => v.clone(),
        }
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].value.shape.clone(),
            rhs: self.nodes[b.0].value.shape.clone(),
        }
    }

    // ---- elementwise / structural ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(self.shape_err("add", a, b));
        }
        let data: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push("add", Tensor::new(shape, data), Op::Add(a, b))
    }

    /// `[n x m] + [m]` row broadcast.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let m = ta.cols();
        if tb.numel() != m {
            return Err(self.shape_err("add_bias", a, b));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(m) {
            for (x, &y) in row.iter_mut().zip(&tb.data) {
                *x = *x + y;
            }
        }
        let shape = ta.shape.clone();
        self.push("add_bias", Tensor::new(shape, data), Op::AddBias(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(self.shape_err("sub", a, b));
        }
        let data: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push("sub", Tensor::new(shape, data), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(self.shape_err("mul", a, b));
        }
        let data: Vec<S> = ta.data.iter().zip(&tb.data).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push("mul", Tensor::new(shape, data), Op::Mul(a, b))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: NodeId, scale: S, shift: S) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data.iter().map(|&v| scale * v + shift).collect();
        let shape = tx.shape.clone();
        self.push("affine", Tensor::new(shape, data), Op::Affine(x, scale, shift))
    }

    pub fn scale(&mut self, x: NodeId, scale: S) -> Result<NodeId> {
        self.affine(x, scale, S::zero())
    }

    /// `1 - x` elementwise (the GRU gate complement).
    pub fn one_minus(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -S::one(), S::one())
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (ta.rows(), ta.cols());
        let (kb, m) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut data = vec![S::zero(); n * m];
        mm_acc(&ta.data, &tb.data, &mut data, n, k, m);
        self.push("matmul", Tensor::new(vec![n, m], data), Op::Matmul(a, b))
    }

    /// `a @ b^T` for `a: [n x k]`, `b: [m x k]`.
    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (ta.rows(), ta.cols());
        let (m, kb) = (tb.rows(), tb.cols());
        if k != kb {
            return Err(self.shape_err("matmul_transb", a, b));
        }
        let mut data = vec![S::zero(); n * m];
        mm_tb_acc(&ta.data, &tb.data, &mut data, n, k, m);
        self.push(
            "matmul_transb",
            Tensor::new(vec![n, m], data),
            Op::MatmulTransB(a, b),
        )
    }

    /// Row gather; also serves as embedding lookup.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        let (n, m) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(Error::VocabRange { id: r, size: n });
            }
            data.extend_from_slice(&tt.data[r * m..(r + 1) * m]);
        }
        self.push(
            "gather",
            Tensor::new(vec![rows.len(), m], data),
            Op::Gather(table, rows.to_vec()),
        )
    }

    // ---- nonlinearities ----

    /// Row-wise softmax with max subtraction for stability. Entries at
    /// -1e9 (additive masking) underflow to exactly zero.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let m = tx.cols();
        let mut data = tx.data.clone();
        for row in data.chunks_mut(m) {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = tx.shape.clone();
        self.push("softmax", Tensor::new(shape, data), Op::Softmax(x))
    }

    /// Per-row layer norm with affine gain/bias (both `[cols]`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let m = tx.cols();
        if self.nodes[gain.0].value.numel() != m {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.nodes[bias.0].value.numel() != m {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let g = self.nodes[gain.0].value.data.clone();
        let b = self.nodes[bias.0].value.data.clone();
        let mut data = tx.data.clone();
        let inv_m = S::of_f64(1.0 / m as f64);
        for row in data.chunks_mut(m) {
            let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) * inv_m;
            let var = row
                .iter()
                .fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                * inv_m;
            let inv_std = S::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = tx.shape.clone();
        self.push(
            "layer_norm",
            Tensor::new(shape, data),
            Op::LayerNorm { x, gain, bias, eps },
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = tx.shape.clone();
        self.push("gelu", Tensor::new(shape, data), Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data.iter().map(|&v| v.tanh()).collect();
        let shape = tx.shape.clone();
        self.push("tanh", Tensor::new(shape, data), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data.iter().map(|&v| sigmoid_fwd(v)).collect();
        let shape = tx.shape.clone();
        self.push("sigmoid", Tensor::new(shape, data), Op::Sigmoid(x))
    }

    /// Inverted dropout: identity in eval mode; in train mode zeroes
    /// each element with probability `rate` and scales survivors by
    /// `1/(1-rate)`.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config("dropout_rate", format!("{rate} not in [0,1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of_f64(1.0 / (1.0 - rate));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<S> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let tx = &self.nodes[x.0].value;
        let data: Vec<S> = tx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = tx.shape.clone();
        self.push("dropout", Tensor::new(shape, data), Op::Dropout { x, mask })
    }

    // ---- reductions ----

    /// Mean over the first `n_rows` rows -> `[1 x cols]`. Rows past
    /// `n_rows` (padding) do not contribute.
    pub fn mean_rows(&mut self, x: NodeId, n_rows: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let m = tx.cols();
        if n_rows == 0 || n_rows > tx.rows() {
            return Err(Error::Contract(format!(
                "mean_rows over {n_rows} rows of a {}-row tensor",
                tx.rows()
            )));
        }
        let inv = S::of_f64(1.0 / n_rows as f64);
        let mut data = vec![S::zero(); m];
        for row in tx.data.chunks(m).take(n_rows) {
            for (acc, &v) in data.iter_mut().zip(row) {
                *acc = *acc + v * inv;
            }
        }
        self.push("mean_rows", Tensor::new(vec![1, m], data), Op::MeanRows(x, n_rows))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data.iter().fold(S::zero(), |a, &v| a + v);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = self.nodes[parts[0].0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != n {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = &self.nodes[p.0].value;
                data.extend_from_slice(&t.data[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![n, total], data),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let m = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.cols() != m {
                return Err(self.shape_err("concat_rows", parts[0], p));
            }
            n += t.rows();
            data.extend_from_slice(&t.data);
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![n, m], data),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let shape = self.nodes[parts[0].0].value.shape.clone();
        let mut data = vec![S::zero(); self.nodes[parts[0].0].value.numel()];
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape != shape {
                return Err(self.shape_err("add_n", parts[0], p));
            }
            for (acc, &v) in data.iter_mut().zip(&t.data) {
                *acc = *acc + v;
            }
        }
        self.push("add_n", Tensor::new(shape, data), Op::AddN(parts.to_vec()))
    }

    // ---- losses ----

    /// Mean softmax cross-entropy over rows of a logits matrix via
    /// log-sum-exp; one target class id per row.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].value;
        let (n, m) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(Error::Contract(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        let mut total = S::zero();
        for (row, &t) in tl.data.chunks(m).zip(targets) {
            if t >= m {
                return Err(Error::Range { index: t, limit: m });
            }
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = max
                + row
                    .iter()
                    .fold(S::zero(), |acc, &v| acc + (v - max).exp())
                    .ln();
            total = total + lse - row[t];
        }
        let mean = total * S::of_f64(1.0 / n as f64);
        self.push(
            "cross_entropy_rows",
            Tensor::scalar(mean),
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Numerically stable binary cross-entropy on a single logit.
    pub fn bce_logit(&mut self, logit: NodeId, label: bool) -> Result<NodeId> {
        let tl = &self.nodes[logit.0].value;
        if !tl.is_scalar() {
            return Err(Error::Contract(format!(
                "bce_logit expects a scalar, got shape {:?}",
                tl.shape
            )));
        }
        let l = tl.scalar_value();
        let y = if label { S::one() } else { S::zero() };
        // max(l,0) - l*y + ln(1 + exp(-|l|))
        let loss = l.max(S::zero()) - l * y + (S::one() + (-l.abs()).exp()).ln();
        self.push("bce_logit", Tensor::scalar(loss), Op::BceLogit { logit, label })
    }

    // ---- backward ----

    /// Populate gradients of everything reachable from a scalar loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.as_ref().unwrap().clone();
            self.propagate(i, &op, &g)?;
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: NodeId, update: impl FnOnce(&mut [S])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let n = self.nodes[id.0].value.numel();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![S::zero(); n]);
        update(grad);
    }

    fn propagate(&mut self, out: usize, op: &Op<S>, g: &[S]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_grad(*a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + d;
                    }
                });
                self.acc_grad(*b, |gb| {
                    for (x, &d) in gb.iter_mut().zip(g) {
                        *x = *x + d;
                    }
                });
            }
            Op::AddBias(a, b) => {
                let m = self.nodes[b.0].value.numel();
                self.acc_grad(*a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + d;
                    }
                });
                self.acc_grad(*b, |gb| {
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % m] = gb[i % m] + d;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc_grad(*a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + d;
                    }
                });
                self.acc_grad(*b, |gb| {
                    for (x, &d) in gb.iter_mut().zip(g) {
                        *x = *x - d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let vb = self.nodes[b.0].value.data.clone();
                let va = self.nodes[a.0].value.data.clone();
                self.acc_grad(*a, |ga| {
                    for ((x, &d), &y) in ga.iter_mut().zip(g).zip(&vb) {
                        *x = *x + d * y;
                    }
                });
                self.acc_grad(*b, |gb| {
                    for ((x, &d), &y) in gb.iter_mut().zip(g).zip(&va) {
                        *x = *x + d * y;
                    }
                });
            }
            Op::Affine(a, scale, _) => {
                let s = *scale;
                self.acc_grad(*a, |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x = *x + d * s;
                    }
                });
            }
            Op::Matmul(a, b) => {
                // C = A@B; dA = dC@B^T; dB = A^T@dC
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                self.acc_grad(*a, |ga| mm_tb_acc(g, &tb.data, ga, n, m, k));
                self.acc_grad(*b, |gb| mm_ta_acc(&ta.data, g, gb, k, n, m));
            }
            Op::MatmulTransB(a, b) => {
                // C = A@B^T; dA = dC@B; dB = dC^T@A
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                let (n, k, m) = (ta.rows(), ta.cols(), tb.rows());
                self.acc_grad(*a, |ga| mm_acc(g, &tb.data, ga, n, m, k));
                self.acc_grad(*b, |gb| mm_ta_acc(g, &ta.data, gb, m, n, k));
            }
            Op::Gather(table, rows) => {
                let m = self.nodes[table.0].value.cols();
                self.acc_grad(*table, |gt| {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..m {
                            gt[r * m + j] = gt[r * m + j] + g[i * m + j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = self.nodes[out].value.clone();
                let m = y.cols();
                self.acc_grad(*a, |ga| {
                    for (r, (yrow, grow)) in y.data.chunks(m).zip(g.chunks(m)).enumerate() {
                        let dot = yrow
                            .iter()
                            .zip(grow)
                            .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                        for j in 0..m {
                            ga[r * m + j] = ga[r * m + j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let tx = self.nodes[x.0].value.clone();
                let tg = self.nodes[gain.0].value.data.clone();
                let m = tx.cols();
                let inv_m = S::of_f64(1.0 / m as f64);
                // recompute per-row normalization
                let mut xhat = tx.data.clone();
                let mut inv_stds = Vec::with_capacity(tx.rows());
                for row in xhat.chunks_mut(m) {
                    let mean = row.iter().fold(S::zero(), |acc, &v| acc + v) * inv_m;
                    let var = row
                        .iter()
                        .fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                        * inv_m;
                    let inv_std = S::one() / (var + *eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * inv_std;
                    }
                    inv_stds.push(inv_std);
                }
                self.acc_grad(*bias, |gb| {
                    for (i, &d) in g.iter().enumerate() {
                        gb[i % m] = gb[i % m] + d;
                    }
                });
                let xhat_for_gain = xhat.clone();
                self.acc_grad(*gain, |gg| {
                    for (i, &d) in g.iter().enumerate() {
                        gg[i % m] = gg[i % m] + d * xhat_for_gain[i];
                    }
                });
                self.acc_grad(*x, |gx| {
                    for (r, (xh_row, g_row)) in
                        xhat.chunks(m).zip(g.chunks(m)).enumerate()
                    {
                        // dxhat = g * gain
                        let dxhat: Vec<S> =
                            g_row.iter().zip(&tg).map(|(&d, &gv)| d * gv).collect();
                        let sum_dxhat = dxhat.iter().fold(S::zero(), |a, &v| a + v);
                        let sum_dxhat_xhat = dxhat
                            .iter()
                            .zip(xh_row)
                            .fold(S::zero(), |a, (&d, &xh)| a + d * xh);
                        let inv_std = inv_stds[r];
                        for j in 0..m {
                            let term = dxhat[j]
                                - sum_dxhat * inv_m
                                - xh_row[j] * sum_dxhat_xhat * inv_m;
                            gx[r * m + j] = gx[r * m + j] + term * inv_std;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let vx = self.nodes[a.0].value.data.clone();
                self.acc_grad(*a, |ga| {
                    for ((x, &d), &v) in ga.iter_mut().zip(g).zip(&vx) {
                        *x = *x + d * gelu_grad(v);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = self.nodes[out].value.data.clone();
                self.acc_grad(*a, |ga| {
                    for ((x, &d), &yv) in ga.iter_mut().zip(g).zip(&y) {
                        *x = *x + d * (S::one() - yv * yv);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[out].value.data.clone();
                self.acc_grad(*a, |ga| {
                    for ((x, &d), &yv) in ga.iter_mut().zip(g).zip(&y) {
                        *x = *x + d * yv * (S::one() - yv);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc_grad(*x, |gx| {
                    for ((v, &d), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *v = *v + d * m;
                    }
                });
            }
            Op::MeanRows(a, n_rows) => {
                let m = self.nodes[a.0].value.cols();
                let inv = S::of_f64(1.0 / *n_rows as f64);
                self.acc_grad(*a, |ga| {
                    for r in 0..*n_rows {
                        for j in 0..m {
                            ga[r * m + j] = ga[r * m + j] + g[j] * inv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let d = g[0];
                self.acc_grad(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x = *x + d;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[out].value.rows();
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.nodes[p.0].value.cols()).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    self.acc_grad(p, |gp| {
                        for i in 0..n {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    self.acc_grad(p, |gp| {
                        for (x, &d) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x = *x + d;
                        }
                    });
                    offset += len;
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    self.acc_grad(p, |gp| {
                        for (x, &d) in gp.iter_mut().zip(g) {
                            *x = *x + d;
                        }
                    });
                }
            }
            Op::CrossEntropyRows { logits, targets } => {
                let tl = self.nodes[logits.0].value.clone();
                let (n, m) = (tl.rows(), tl.cols());
                let inv_n = S::of_f64(1.0 / n as f64);
                let d = g[0];
                self.acc_grad(*logits, |gl| {
                    for (r, (row, &t)) in tl.data.chunks(m).zip(targets).enumerate() {
                        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                        let mut sum = S::zero();
                        let probs: Vec<S> = row
                            .iter()
                            .map(|&v| {
                                let e = (v - max).exp();
                                sum = sum + e;
                                e
                            })
                            .collect();
                        for j in 0..m {
                            let p = probs[j] / sum;
                            let onehot = if j == t { S::one() } else { S::zero() };
                            gl[r * m + j] = gl[r * m + j] + d * inv_n * (p - onehot);
                        }
                    }
                });
            }
            Op::BceLogit { logit, label } => {
                let l = self.nodes[logit.0].value.scalar_value();
                let y = if *label { S::one() } else { S::zero() };
                let d = g[0];
                self.acc_grad(*logit, |gl| {
                    gl[0] = gl[0] + d * (sigmoid_fwd(l) - y);
                });
            }
        }
        Ok(())
    }
}

fn sigmoid_fwd<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

// tanh-approximation gelu (the BERT variant)
fn gelu_fwd<S: Scalar>(v: S) -> S {
    let c = S::of_f64(0.7978845608028654); // sqrt(2/pi)
    let k = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    let inner = c * (v + k * v * v * v);
    half * v * (S::one() + inner.tanh())
}

fn gelu_grad<S: Scalar>(v: S) -> S {
    let c = S::of_f64(0.7978845608028654);
    let k = S::of_f64(0.044715);
    let half = S::of_f64(0.5);
    let three = S::of_f64(3.0);
    let inner = c * (v + k * v * v * v);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * v * sech2 * c * (S::one() + three * k * v * v)
}
