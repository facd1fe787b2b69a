//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and enough cached
//! state for its vector-Jacobian product. Nodes know whether any trainable
//! leaf feeds them; backward skips every node that does not, so frozen
//! subgraphs cost nothing and never produce gradients.

use std::borrow::Cow;

use super::kernels::{gemm, layernorm_row, log_softmax, softmax_in_place};
use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::par;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One independent attention problem inside a ragged batch: queries are rows
/// `q_start..q_start+q_len`, keys/values rows `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Block structure of a fused multi-head attention call.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` of a segment may only see keys `0..=i` of that segment.
    pub causal: bool,
    /// Per key row: `false` excludes the key (padding).
    pub key_mask: Option<Vec<bool>>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Var, Var),
    Lerp {
        a: Var,
        r: Var,
        lam: Var,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<Vec<f64>>,
    },
    Retrieve {
        q: Var,
        keys: Var,
        values: Var,
        temperature: f64,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<u32>>,
        eps: f64,
        probs: Vec<f64>,
    },
    SymKl {
        a: Var,
        b: Var,
        rows: Vec<bool>,
        la: Vec<f64>,
        lb: Vec<f64>,
    },
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
    trainable: bool,
}

/// Gradients of trainable leaves after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` for constants, frozen leaves and
    /// leaves the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Borrow an existing tensor as a leaf.
    pub fn param(&mut self, t: &'a Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Whether a gradient would flow into `v` during backward.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = shape2(self.value(a));
        let (n, k2) = shape2(self.value(b));
        if k != k2 {
            return Err(dim_err!("matmul_bt inner dimensions {m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (1, k),
            out.data_mut(),
            false,
        );
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err!("{what}: shapes {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Add a bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(dim_err!(
                "add_row: bias length {} vs {c} columns",
                self.value(bias).len()
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v += c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if c == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err!("layernorm gain/bias vs width {d}"));
        }
        let mut xhat = self.value(x).clone();
        let mut inv_std = Vec::with_capacity(xhat.rows());
        for row in xhat.data_mut().chunks_mut(d) {
            inv_std.push(layernorm_row(row));
        }
        let mut out = xhat.clone();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: xhat.into_data(),
            inv_std,
        };
        Ok(self.push(out, op, &[x, gain, bias]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca) = shape2(self.value(a));
        let (n2, cb) = shape2(self.value(b));
        if n != n2 {
            return Err(dim_err!("concat_cols: {n} vs {n2} rows"));
        }
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(self.value(a).row(i));
            data.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(vec![n, ca + cb], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Per-row convex combination `lam ⊙ a + (1 − lam) ⊙ r`, `lam` is n×1.
    pub fn lerp(&mut self, a: Var, r: Var, lam: Var) -> Result<Var> {
        let (n, d) = shape2(self.value(a));
        if self.value(r).shape() != self.value(a).shape() || self.value(lam).len() != n {
            return Err(dim_err!("lerp: anchor {n}x{d}, retrieved {:?}, gate {:?}",
                self.value(r).shape(), self.value(lam).shape()));
        }
        let mut out = Tensor::zeros(&[n, d]);
        {
            let (av, rv, lv) = (self.value(a), self.value(r), self.value(lam).data());
            for i in 0..n {
                let l = lv[i];
                let o = out.row_mut(i);
                for ((o, x), y) in o.iter_mut().zip(av.row(i)).zip(rv.row(i)) {
                    *o = l * x + (1.0 - l) * y;
                }
            }
        }
        Ok(self.push(out, Op::Lerp { a, r, lam }, &[a, r, lam]))
    }

    /// Rows of `table` selected by id.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let v = t.rows();
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(dim_err!("gather: id {bad} out of range for {v} rows"));
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let out = t.select_rows(&idx);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(out, op, &[table]))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.value(x).rows();
        if idx.iter().any(|&i| i >= n) {
            return Err(dim_err!("select_rows: index out of range for {n} rows"));
        }
        let out = self.value(x).select_rows(idx);
        let op = Op::SelectRows {
            x,
            idx: idx.to_vec(),
        };
        Ok(self.push(out, op, &[x]))
    }

    /// Fused scaled dot-product multi-head attention over a ragged batch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (nq, d) = shape2(self.value(q));
        let (nk, dk) = shape2(self.value(k));
        if dk != d || self.value(v).shape() != self.value(k).shape() {
            return Err(dim_err!("attention: q {nq}x{d}, k {nk}x{dk}, v {:?}", self.value(v).shape()));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(dim_err!("attention: width {d} not divisible by {} heads", layout.heads));
        }
        if let Some(m) = &layout.key_mask {
            if m.len() != nk {
                return Err(dim_err!("attention: key mask length {} vs {nk} keys", m.len()));
            }
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(dim_err!("attention: segment {s:?} out of range"));
            }
        }
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let per_seg = par::map(&layout.segments, |s| attn_segment_fwd(qv, kv, vv, &layout, s));
        let mut out = Tensor::zeros(&[nq, d]);
        let mut probs = Vec::with_capacity(per_seg.len());
        for (s, (rows, p)) in layout.segments.iter().zip(per_seg) {
            out.data_mut()[s.q_start * d..(s.q_start + s.q_len) * d].copy_from_slice(&rows);
            probs.push(p);
        }
        let op = Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        };
        Ok(self.push(out, op, &[q, k, v]))
    }

    /// `softmax(q · keysᵀ / T) · values`, one distribution per query row.
    pub fn retrieve(&mut self, q: Var, keys: Var, values: Var, temperature: f64) -> Result<Var> {
        let (n, d) = shape2(self.value(q));
        let (m, dk) = shape2(self.value(keys));
        if dk != d || self.value(values).rows() != m {
            return Err(dim_err!("retrieve: query width {d}, keys {m}x{dk}, values {:?}",
                self.value(values).shape()));
        }
        if !(temperature > 0.0) {
            return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
        }
        if m == 0 {
            return Err(Error::Contract("retrieve over an empty memory".into()));
        }
        let dv = self.value(values).cols();
        let mut probs = vec![0.0; n * m];
        gemm(n, d, m, self.value(q).data(), (d, 1), self.value(keys).data(), (1, d), &mut probs, false);
        let inv_t = 1.0 / temperature;
        par::for_each_chunk_mut(&mut probs, m * 64, |_, chunk| {
            for row in chunk.chunks_mut(m) {
                row.iter_mut().for_each(|s| *s *= inv_t);
                softmax_in_place(row);
            }
        });
        let mut out = Tensor::zeros(&[n, dv]);
        gemm(n, m, dv, &probs, (m, 1), self.value(values).data(), (dv, 1), out.data_mut(), false);
        let op = Op::Retrieve {
            q,
            keys,
            values,
            temperature,
            probs,
        };
        Ok(self.push(out, op, &[q, keys, values]))
    }

    /// Row-major `[n×N]` retrieval distribution cached by a [`Tape::retrieve`] node.
    pub fn retrieval_weights(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Retrieve { keys, probs, .. } => {
                let m = self.value(*keys).rows();
                Tensor::new(vec![probs.len() / m, m], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Summed label-smoothed negative log-likelihood. Rows whose target is
    /// `None` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>], eps: f64) -> Result<Var> {
        let (n, vsz) = shape2(self.value(logits));
        if targets.len() != n {
            return Err(dim_err!("cross_entropy: {} targets for {n} rows", targets.len()));
        }
        if targets.iter().flatten().any(|&t| t as usize >= vsz) {
            return Err(dim_err!("cross_entropy: target id out of range for vocab {vsz}"));
        }
        let mut logp = vec![0.0; n * vsz];
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut logp[i * vsz..(i + 1) * vsz];
            log_softmax(self.value(logits).row(i), row);
            if let Some(t) = t {
                let smooth = row.iter().sum::<f64>() / vsz as f64;
                total += -(1.0 - eps) * row[*t as usize] - eps * smooth;
            }
        }
        logp.iter_mut().for_each(|v| *v = v.exp());
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            eps,
            probs: logp,
        };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    /// Summed symmetric KL `½(KL(p‖q) + KL(q‖p))` between row softmaxes of two
    /// logit matrices, over rows with `rows[i] == true`.
    pub fn sym_kl(&mut self, a: Var, b: Var, rows: &[bool]) -> Result<Var> {
        let (n, vsz) = shape2(self.value(a));
        if self.value(b).shape() != self.value(a).shape() || rows.len() != n {
            return Err(dim_err!("sym_kl: shapes {:?}/{:?}, {} row flags",
                self.value(a).shape(), self.value(b).shape(), rows.len()));
        }
        let mut la = vec![0.0; n * vsz];
        let mut lb = vec![0.0; n * vsz];
        let mut total = 0.0;
        for i in 0..n {
            let ra = &mut la[i * vsz..(i + 1) * vsz];
            log_softmax(self.value(a).row(i), ra);
            let rb = &mut lb[i * vsz..(i + 1) * vsz];
            log_softmax(self.value(b).row(i), rb);
            if rows[i] {
                let (ra, rb) = (&la[i * vsz..(i + 1) * vsz], &lb[i * vsz..(i + 1) * vsz]);
                total += 0.5
                    * ra.iter()
                        .zip(rb)
                        .map(|(x, y)| (x.exp() - y.exp()) * (x - y))
                        .sum::<f64>();
            }
        }
        let op = Op::SymKl {
            a,
            b,
            rows: rows.to_vec(),
            la,
            lb,
        };
        Ok(self.push(Tensor::scalar(total), op, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Multiply elementwise by a precomputed mask (already scaled).
    pub fn dropout(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(dim_err!("dropout mask length"));
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(o, m)| *o *= m);
        Ok(self.push(out, Op::Dropout { x, mask }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.trainable {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = val(*b).cols();
                if wants(*a) {
                    // dA = dC · Bᵀ
                    let slot = slot(grads, *a, val(*a));
                    gemm(m, n, k, gd, (n, 1), val(*b).data(), (1, n), slot, true);
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    let slot = slot(grads, *b, val(*b));
                    gemm(k, m, n, val(*a).data(), (1, k), gd, (n, 1), slot, true);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = shape2(val(*a));
                let n = val(*b).rows();
                if wants(*a) {
                    // dA = dC · B
                    let slot = slot(grads, *a, val(*a));
                    gemm(m, n, k, gd, (n, 1), val(*b).data(), (k, 1), slot, true);
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    let slot = slot(grads, *b, val(*b));
                    gemm(n, m, k, gd, (1, n), val(*a).data(), (k, 1), slot, true);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if wants(x) {
                        axpy(slot(grads, x, val(x)), gd, 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    axpy(slot(grads, *a, val(*a)), gd, 1.0);
                }
                if wants(*b) {
                    axpy(slot(grads, *b, val(*b)), gd, -1.0);
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    axpy(slot(grads, *x, val(*x)), gd, 1.0);
                }
                if wants(*bias) {
                    let c = val(*bias).len();
                    let s = slot(grads, *bias, val(*bias));
                    for row in gd.chunks(c) {
                        axpy(s, row, 1.0);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    axpy(slot(grads, *x, val(*x)), gd, *c);
                }
            }
            Op::AddScalar(x) => {
                if wants(*x) {
                    axpy(slot(grads, *x, val(*x)), gd, 1.0);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let out = node.value.data();
                    let s = slot(grads, *x, val(*x));
                    for ((s, g), o) in s.iter_mut().zip(gd).zip(out) {
                        if *o > 0.0 {
                            *s += g;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let out = node.value.data();
                    let s = slot(grads, *x, val(*x));
                    for ((s, g), y) in s.iter_mut().zip(gd).zip(out) {
                        *s += g * y * (1.0 - y);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let c = node.value.cols();
                    let s = slot(grads, *x, val(*x));
                    for ((srow, grow), prow) in s.chunks_mut(c).zip(gd.chunks(c)).zip(node.value.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(prow).map(|(g, p)| g * p).sum();
                        for j in 0..c {
                            srow[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gv = val(*gain).data();
                if wants(*x) {
                    let s = slot(grads, *x, val(*x));
                    let mut dxh = vec![0.0; d];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let grow = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = grow[j] * gv[j];
                        }
                        let sum: f64 = dxh.iter().sum();
                        let dot: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        let srow = &mut s[r * d..(r + 1) * d];
                        for j in 0..d {
                            srow[j] += inv / df * (df * dxh[j] - sum - xh[j] * dot);
                        }
                    }
                }
                if wants(*gain) {
                    let s = slot(grads, *gain, val(*gain));
                    for (grow, xh) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * xh[j];
                        }
                    }
                }
                if wants(*bias) {
                    let s = slot(grads, *bias, val(*bias));
                    for grow in gd.chunks(d) {
                        axpy(s, grow, 1.0);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                let cb = val(*b).cols();
                let w = ca + cb;
                if wants(*a) {
                    let s = slot(grads, *a, val(*a));
                    for (srow, grow) in s.chunks_mut(ca.max(1)).zip(gd.chunks(w)) {
                        axpy(srow, &grow[..ca], 1.0);
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, val(*b));
                    for (srow, grow) in s.chunks_mut(cb.max(1)).zip(gd.chunks(w)) {
                        axpy(srow, &grow[ca..], 1.0);
                    }
                }
            }
            Op::Lerp { a, r, lam } => {
                let d = node.value.cols();
                let lv = val(*lam).data();
                if wants(*a) {
                    let s = slot(grads, *a, val(*a));
                    for (i, (srow, grow)) in s.chunks_mut(d).zip(gd.chunks(d)).enumerate() {
                        axpy(srow, grow, lv[i]);
                    }
                }
                if wants(*r) {
                    let s = slot(grads, *r, val(*r));
                    for (i, (srow, grow)) in s.chunks_mut(d).zip(gd.chunks(d)).enumerate() {
                        axpy(srow, grow, 1.0 - lv[i]);
                    }
                }
                if wants(*lam) {
                    let (av, rv) = (val(*a), val(*r));
                    let s = slot(grads, *lam, val(*lam));
                    for (i, grow) in gd.chunks(d).enumerate() {
                        s[i] += grow
                            .iter()
                            .zip(av.row(i).iter().zip(rv.row(i)))
                            .map(|(g, (x, y))| g * (x - y))
                            .sum::<f64>();
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = val(*table).cols();
                    let s = slot(grads, *table, val(*table));
                    for (i, &id) in ids.iter().enumerate() {
                        let id = id as usize;
                        axpy(&mut s[id * d..(id + 1) * d], &gd[i * d..(i + 1) * d], 1.0);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if wants(*x) {
                    let d = val(*x).cols();
                    let s = slot(grads, *x, val(*x));
                    for (i, &r) in idx.iter().enumerate() {
                        axpy(&mut s[r * d..(r + 1) * d], &gd[i * d..(i + 1) * d], 1.0);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.cols();
                let idx: Vec<usize> = (0..layout.segments.len()).collect();
                let parts = par::map(&idx, |&si| {
                    attn_segment_bwd(qv, kv, vv, g, layout, &layout.segments[si], &probs[si])
                });
                if wants(*q) {
                    let s = slot(grads, *q, qv);
                    for (seg, (dq, _, _)) in layout.segments.iter().zip(&parts) {
                        axpy(&mut s[seg.q_start * d..(seg.q_start + seg.q_len) * d], dq, 1.0);
                    }
                }
                if wants(*k) {
                    let s = slot(grads, *k, kv);
                    for (seg, (_, dk, _)) in layout.segments.iter().zip(&parts) {
                        axpy(&mut s[seg.k_start * d..(seg.k_start + seg.k_len) * d], dk, 1.0);
                    }
                }
                if wants(*v) {
                    let s = slot(grads, *v, vv);
                    for (seg, (_, _, dv)) in layout.segments.iter().zip(&parts) {
                        axpy(&mut s[seg.k_start * d..(seg.k_start + seg.k_len) * d], dv, 1.0);
                    }
                }
            }
            Op::Retrieve {
                q,
                keys,
                values,
                temperature,
                probs,
            } => {
                let (n, d) = shape2(val(*q));
                let m = val(*keys).rows();
                let dv = val(*values).cols();
                if wants(*values) {
                    // dV = Pᵀ · dO
                    let s = slot(grads, *values, val(*values));
                    gemm(m, n, dv, probs, (1, m), gd, (dv, 1), s, true);
                }
                if wants(*q) || wants(*keys) {
                    // dP = dO · Vᵀ, then through the row softmax and 1/T.
                    let mut ds = vec![0.0; n * m];
                    gemm(n, dv, m, gd, (dv, 1), val(*values).data(), (1, dv), &mut ds, false);
                    let inv_t = 1.0 / temperature;
                    for (drow, prow) in ds.chunks_mut(m).zip(probs.chunks(m)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (dv_, p) in drow.iter_mut().zip(prow) {
                            *dv_ = p * (*dv_ - dot) * inv_t;
                        }
                    }
                    if wants(*q) {
                        let s = slot(grads, *q, val(*q));
                        gemm(n, m, d, &ds, (m, 1), val(*keys).data(), (d, 1), s, true);
                    }
                    if wants(*keys) {
                        let s = slot(grads, *keys, val(*keys));
                        gemm(m, n, d, &ds, (1, m), val(*q).data(), (d, 1), s, true);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                eps,
                probs,
            } => {
                if wants(*logits) {
                    let vsz = val(*logits).cols();
                    let up = gd[0];
                    let s = slot(grads, *logits, val(*logits));
                    let uniform = eps / vsz as f64;
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let srow = &mut s[i * vsz..(i + 1) * vsz];
                        let prow = &probs[i * vsz..(i + 1) * vsz];
                        for j in 0..vsz {
                            let target = uniform + if j == *t as usize { 1.0 - eps } else { 0.0 };
                            srow[j] += up * (prow[j] - target);
                        }
                    }
                }
            }
            Op::SymKl { a, b, rows, la, lb } => {
                let vsz = val(*a).cols();
                let up = gd[0];
                for (x, lx, ly) in [(*a, la, lb), (*b, lb, la)] {
                    if !wants(x) {
                        continue;
                    }
                    let s = slot(grads, x, val(x));
                    for (i, &on) in rows.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let r = i * vsz..(i + 1) * vsz;
                        let (lxr, lyr) = (&lx[r.clone()], &ly[r.clone()]);
                        let kl: f64 = lxr.iter().zip(lyr).map(|(p, q)| p.exp() * (p - q)).sum();
                        let srow = &mut s[r];
                        for j in 0..vsz {
                            let (p, q) = (lxr[j].exp(), lyr[j].exp());
                            srow[j] += up * 0.5 * (p * (lxr[j] - lyr[j] - kl) + p - q);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let up = gd[0];
                    slot(grads, *x, val(*x)).iter_mut().for_each(|s| *s += up);
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    let s = slot(grads, *x, val(*x));
                    for ((s, g), m) in s.iter_mut().zip(gd).zip(mask) {
                        *s += g * m;
                    }
                }
            }
        }
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(like.shape()))
        .data_mut()
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn key_allowed(layout: &AttnLayout, seg: &Segment, i: usize, j: usize) -> bool {
    if layout.causal && j > i {
        return false;
    }
    layout
        .key_mask
        .as_ref()
        .is_none_or(|m| m[seg.k_start + j])
}

/// Returns (output rows, probabilities laid out head-major).
fn attn_segment_fwd(q: &Tensor, k: &Tensor, v: &Tensor, layout: &AttnLayout, s: &Segment) -> (Vec<f64>, Vec<f64>) {
    let d = q.cols();
    let h = layout.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nk) = (s.q_len, s.k_len);
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; h * nq * nk];
    for head in 0..h {
        let c0 = head * dh;
        for i in 0..nq {
            let qi = &q.row(s.q_start + i)[c0..c0 + dh];
            let prow = &mut probs[(head * nq + i) * nk..(head * nq + i + 1) * nk];
            let mut max = f64::NEG_INFINITY;
            for j in 0..nk {
                if key_allowed(layout, s, i, j) {
                    let kj = &k.row(s.k_start + j)[c0..c0 + dh];
                    let sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    prow[j] = sc;
                    max = max.max(sc);
                } else {
                    prow[j] = f64::NEG_INFINITY;
                }
            }
            if max == f64::NEG_INFINITY {
                prow.iter_mut().for_each(|p| *p = 0.0);
                continue;
            }
            let mut sum = 0.0;
            for p in prow.iter_mut() {
                *p = (*p - max).exp();
                sum += *p;
            }
            prow.iter_mut().for_each(|p| *p /= sum);
            let orow = &mut out[i * d + c0..i * d + c0 + dh];
            for (j, p) in prow.iter().enumerate() {
                if *p != 0.0 {
                    let vj = &v.row(s.k_start + j)[c0..c0 + dh];
                    axpy(orow, vj, *p);
                }
            }
        }
    }
    (out, probs)
}

/// Returns (dQ rows, dK rows, dV rows) local to the segment.
fn attn_segment_bwd(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    layout: &AttnLayout,
    s: &Segment,
    probs: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d = q.cols();
    let h = layout.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nk) = (s.q_len, s.k_len);
    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nk];
    for head in 0..h {
        let c0 = head * dh;
        for i in 0..nq {
            let gi = &g.row(s.q_start + i)[c0..c0 + dh];
            let prow = &probs[(head * nq + i) * nk..(head * nq + i + 1) * nk];
            let mut dot = 0.0;
            for j in 0..nk {
                let p = prow[j];
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &v.row(s.k_start + j)[c0..c0 + dh];
                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += p * dp[j];
                axpy(&mut dv[j * d + c0..j * d + c0 + dh], gi, p);
            }
            let qi = &q.row(s.q_start + i)[c0..c0 + dh];
            for j in 0..nk {
                let p = prow[j];
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - dot) * scale;
                let kj = &k.row(s.k_start + j)[c0..c0 + dh];
                axpy(&mut dq[i * d + c0..i * d + c0 + dh], kj, ds);
                axpy(&mut dk[j * d + c0..j * d + c0 + dh], qi, ds);
            }
        }
    }
    (dq, dk, dv)
}
