use crate::error::{Result, SilqError};
use crate::quant::{self, QuantizerSpec, StepSize, Timing};

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fill value for masked attention scores; finite so every tensor stays finite.
const MASKED: f32 = -1e9;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Value, Value),
    MatMulNt(Value, Value),
    Add(Value, Value),
    Mul(Value, Value),
    Scale(Value, f32),
    Silu(Value),
    Rsqrt(Value),
    Softmax {
        x: Value,
        axis: usize,
    },
    CausalMask {
        x: Value,
        offset: usize,
    },
    RmsNorm {
        x: Value,
        gain: Value,
        inv_rms: Vec<f32>,
    },
    Sum(Value),
    Embedding {
        table: Value,
        ids: Vec<usize>,
    },
    Rope {
        x: Value,
        positions: Vec<usize>,
        head_dim: usize,
        theta: f32,
    },
    Block {
        x: Value,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Value>),
    ConcatCols(Vec<Value>),
    FakeQuant {
        x: Value,
        step: Option<Value>,
        spec: QuantizerSpec,
        scales: StepSize,
        grad_scale: bool,
    },
    CrossEntropy {
        logits: Value,
        targets: Tensor,
        row_weights: Vec<f32>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation graph. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SilqError::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(SilqError::dim(op, format!("expected a matrix, got {other:?}"))),
    }
}

/// Broadcast kind for binary elementwise ops: scalar on either side or none.
#[derive(Clone, Copy)]
enum Bcast {
    None,
    LeftScalar,
    RightScalar,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::None)
    } else if a.len() == 1 {
        Ok(Bcast::LeftScalar)
    } else if b.len() == 1 {
        Ok(Bcast::RightScalar)
    } else {
        Err(SilqError::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn rope_angles(pos: usize, head_dim: usize, theta: f32) -> Vec<(f32, f32)> {
    let half = head_dim / 2;
    (0..half)
        .map(|i| {
            let freq = f64::from(theta).powf(-2.0 * i as f64 / head_dim as f64);
            let ang = pos as f64 * freq;
            (ang.cos() as f32, ang.sin() as f32)
        })
        .collect()
}

// Rotates each head segment of each row; `sign = -1` applies the inverse.
fn rope_apply(x: &Tensor, positions: &[usize], head_dim: usize, theta: f32, sign: f32) -> Tensor {
    let mut out = x.clone();
    let cols = x.cols();
    let half = head_dim / 2;
    for (r, &pos) in positions.iter().enumerate() {
        let angles = rope_angles(pos, head_dim, theta);
        let row = out.row_mut(r);
        for h in 0..cols / head_dim {
            let seg = &mut row[h * head_dim..(h + 1) * head_dim];
            for (i, &(c, s)) in angles.iter().enumerate() {
                let s = s * sign;
                let (a, b) = (seg[i], seg[i + half]);
                seg[i] = a * c - b * s;
                seg[i + half] = a * s + b * c;
            }
        }
    }
    out
}

/// Row-wise probabilities `softmax(logits / temperature)`, computed in `f64`
/// so each row sums to 1 within `f32` resolution.
pub(crate) fn softmax_rows_f64(logits: &Tensor, temperature: f32) -> Tensor {
    let mut out = logits.clone();
    let t = f64::from(temperature);
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v) / t));
        let exps: Vec<f64> = row.iter().map(|&v| (f64::from(v) / t - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
            *o = (e / z) as f32;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Value {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn needs(&self, inputs: &[Value]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Value {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Value {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Value {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` when backward never reached `v`.
    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(SilqError::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`; with `b` a `[out, in]` weight this is a linear layer.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = matrix_dims("matmul_nt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(SilqError::dim("matmul_nt", format!("[{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulNt(a, b)))
    }

    fn binary(&mut self, name: &'static str, a: Value, b: Value, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Value> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = match broadcast(name, ta, tb)? {
            Bcast::None => {
                let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(ta.shape().to_vec(), data)?
            }
            Bcast::LeftScalar => {
                let x = ta.data()[0];
                tb.map(|y| f(x, y))
            }
            Bcast::RightScalar => {
                let y = tb.data()[0];
                ta.map(|x| f(x, y))
            }
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Value, c: f32) -> Value {
        let out = self.value(a).map(|x| x * c);
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Silu(a))
    }

    pub fn rsqrt(&mut self, a: Value) -> Value {
        let out = self.value(a).map(|x| 1.0 / x.sqrt());
        let rg = self.needs(&[a]);
        self.push(out, rg, Op::Rsqrt(a))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Value, axis: usize) -> Result<Value> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(SilqError::dim("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = t.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).fold(f32::NEG_INFINITY, |m, j| m.max(data[at(j)]));
                let mut z = 0.0f32;
                for j in 0..n {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    data[at(j)] /= z;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// Masks scores `[q, offset + q]` so query `i` sees keys `0..=offset + i`.
    pub fn causal_mask(&mut self, x: Value, offset: usize) -> Result<Value> {
        let (q, k) = matrix_dims("causal_mask", self.value(x))?;
        if k != offset + q {
            return Err(SilqError::dim(
                "causal_mask",
                format!("{q} queries over {k} keys with offset {offset}"),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..q {
            for v in &mut out.row_mut(i)[offset + i + 1..] {
                *v = MASKED;
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, rg, Op::CausalMask { x, offset }))
    }

    /// `x / sqrt(mean(x²) + eps) · gain` over the last dimension.
    pub fn rmsnorm(&mut self, x: Value, gain: Value, eps: f32) -> Result<Value> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.len() != d {
            return Err(SilqError::dim("rmsnorm", format!("gain {} for width {d}", tg.len())));
        }
        let mut out = tx.clone();
        let mut inv_rms = Vec::with_capacity(tx.rows());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(tg.data()) {
                *o = v * inv * g;
            }
        }
        let rg = self.needs(&[x, gain]);
        Ok(self.push(out, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn sum(&mut self, a: Value) -> Value {
        let s = self.value(a).data().iter().sum::<f32>();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Gathers rows of `table` (`[vocab, d]`) for each id.
    pub fn embedding(&mut self, table: Value, ids: &[usize]) -> Result<Value> {
        let t = self.value(table);
        let (vocab, d) = matrix_dims("embedding", t)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(SilqError::Input(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position embedding on every `head_dim` segment of each row;
    /// `positions[r]` is the absolute position of row `r`.
    pub fn rope(&mut self, x: Value, positions: &[usize], head_dim: usize, theta: f32) -> Result<Value> {
        let t = self.value(x);
        if positions.len() != t.rows() || head_dim % 2 != 0 || t.cols() % head_dim != 0 {
            return Err(SilqError::dim(
                "rope",
                format!(
                    "{:?} with {} positions, head_dim {head_dim}",
                    t.shape(),
                    positions.len()
                ),
            ));
        }
        let out = rope_apply(t, positions, head_dim, theta, 1.0);
        let rg = self.needs(&[x]);
        Ok(self.push(
            out,
            rg,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
                theta,
            },
        ))
    }

    /// Copies the `rows × cols` block starting at `(row0, col0)`.
    pub fn block(&mut self, x: Value, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Value> {
        let t = self.value(x);
        let (m, n) = matrix_dims("block", t)?;
        if row0 + rows > m || col0 + cols > n || rows == 0 || cols == 0 {
            return Err(SilqError::dim(
                "block",
                format!("[{row0}+{rows}, {col0}+{cols}] out of [{m}x{n}]"),
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            data.extend_from_slice(&t.row(r)[col0..col0 + cols]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, rg, Op::Block { x, row0, col0 }))
    }

    pub fn concat_rows(&mut self, parts: &[Value]) -> Result<Value> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, n) = matrix_dims("concat_rows", self.value(p))?;
            if n != cols {
                return Err(SilqError::dim("concat_rows", format!("width {n} vs {cols}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += m;
        }
        let rg = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, n) = matrix_dims("concat_cols", self.value(p))?;
            if m != rows {
                return Err(SilqError::dim("concat_cols", format!("height {m} vs {rows}")));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], data)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Fake quantization with STE data gradient and LSQ step gradient.
    ///
    /// `step` holds the static scale(s); pass `None` for a dynamic site, whose
    /// scales are derived from `x` and treated as constants.
    pub fn fake_quant(
        &mut self,
        x: Value,
        step: Option<Value>,
        spec: QuantizerSpec,
        grad_scale: bool,
    ) -> Result<Value> {
        let scales = match (step, spec.timing()) {
            (Some(s), Timing::Static) => StepSize::new(self.value(s).data().to_vec()),
            (None, Timing::Dynamic) => quant::compute_dynamic_scale(self.value(x), &spec)?,
            _ => {
                return Err(SilqError::Usage(
                    "static sites need a step value, dynamic sites must not have one".into(),
                ))
            }
        };
        let out = quant::quantize_fake(self.value(x), &scales, &spec)?;
        let rg = self.needs(&[x]) || step.is_some_and(|s| self.requires_grad(s));
        Ok(self.push(
            out,
            rg,
            Op::FakeQuant {
                x,
                step,
                spec,
                scales,
                grad_scale,
            },
        ))
    }

    /// Mean soft-label cross entropy `-Σ_v t·log softmax(z)` over rows.
    pub fn cross_entropy_soft(&mut self, logits: Value, targets: &Tensor) -> Result<Value> {
        let rows = self.value(logits).rows();
        self.cross_entropy_weighted(logits, targets, &vec![1.0; rows])
    }

    /// Weighted mean of per-row soft cross entropy; rows with weight 0 are
    /// skipped entirely (their targets are not validated).
    pub fn cross_entropy_weighted(&mut self, logits: Value, targets: &Tensor, row_weights: &[f32]) -> Result<Value> {
        let z = self.value(logits);
        same_shape("cross_entropy", z, targets)?;
        if row_weights.len() != z.rows() {
            return Err(SilqError::dim("cross_entropy", "one weight per row required"));
        }
        let total_w: f64 = row_weights.iter().map(|&w| f64::from(w)).sum();
        if total_w <= 0.0 {
            return Err(SilqError::Input("cross entropy over zero total row weight".into()));
        }
        let mut probs = Tensor::zeros(z.shape());
        let mut loss = 0.0f64;
        for (r, &w) in row_weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let t = targets.row(r);
            let mass: f64 = t.iter().map(|&v| f64::from(v)).sum();
            if (mass - 1.0).abs() > 1e-6 || t.iter().any(|&v| v < 0.0) {
                return Err(SilqError::Input(format!(
                    "target row {r} is not a distribution (sums to {mass})"
                )));
            }
            let row = z.row(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let lse = f64::from(max) + row.iter().map(|&v| f64::from(v - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0f64;
            for (j, (&tv, &zv)) in t.iter().zip(row).enumerate() {
                let logp = f64::from(zv) - lse;
                probs.row_mut(r)[j] = logp.exp() as f32;
                if tv > 0.0 {
                    row_loss -= f64::from(tv) * logp;
                }
            }
            loss += f64::from(w) * row_loss;
        }
        let out = Tensor::scalar((loss / total_w) as f32);
        let rg = self.needs(&[logits]);
        let norm: Vec<f32> = row_weights.iter().map(|&w| (f64::from(w) / total_w) as f32).collect();
        Ok(self.push(
            out,
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
                row_weights: norm,
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(SilqError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            match &mut self.grads[idx] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut send = |v: Value, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let mut ga = vec![0.0; m * k];
                matmul_nt(g.data(), tb.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_tn(ta.data(), g.data(), &mut gb, m, k, n);
                send(*a, Tensor::new(vec![m, k], ga)?);
                send(*b, Tensor::new(vec![k, n], gb)?);
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nn(g.data(), tb.data(), &mut ga, m, n, k);
                    send(*a, Tensor::new(vec![m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_tn(g.data(), ta.data(), &mut gb, m, n, k);
                    send(*b, Tensor::new(vec![n, k], gb)?);
                }
            }
            Op::Add(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match broadcast("add", ta, tb)? {
                    Bcast::None => {
                        send(*a, g.clone());
                        send(*b, g.clone());
                    }
                    Bcast::LeftScalar => {
                        send(*a, Tensor::scalar(g.data().iter().sum()));
                        send(*b, g.clone());
                    }
                    Bcast::RightScalar => {
                        send(*a, g.clone());
                        send(*b, Tensor::scalar(g.data().iter().sum()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match broadcast("mul", ta, tb)? {
                    Bcast::None => {
                        let ga = zip_map(g, tb, |gv, y| gv * y);
                        let gb = zip_map(g, ta, |gv, x| gv * x);
                        send(*a, ga);
                        send(*b, gb);
                    }
                    Bcast::LeftScalar => {
                        let x = ta.data()[0];
                        let gs = g.data().iter().zip(tb.data()).map(|(gv, y)| gv * y).sum();
                        send(*a, Tensor::scalar(gs));
                        send(*b, g.map(|gv| gv * x));
                    }
                    Bcast::RightScalar => {
                        let y = tb.data()[0];
                        let gs = g.data().iter().zip(ta.data()).map(|(gv, x)| gv * x).sum();
                        send(*a, g.map(|gv| gv * y));
                        send(*b, Tensor::scalar(gs));
                    }
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|gv| gv * c)),
            Op::Silu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                send(*a, ga);
            }
            Op::Rsqrt(a) => {
                let ga = zip_map(g, &node.value, |gv, y| -0.5 * gv * y * y * y);
                send(*a, ga);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut gx = Tensor::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dotp: f32 = (0..n).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            out[at(j)] = yd[at(j)] * (gd[at(j)] - dotp);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::CausalMask { x, offset } => {
                let mut gx = g.clone();
                for i in 0..gx.rows() {
                    for v in &mut gx.row_mut(i)[offset + i + 1..] {
                        *v = 0.0;
                    }
                }
                send(*x, gx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                let mut ggain = vec![0.0f32; d];
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let (xr, gr) = (tx.row(r), g.row(r));
                    let proj: f32 = (0..d).map(|j| gr[j] * tg.data()[j] * xr[j]).sum();
                    let coef = inv * inv * inv * proj / d as f32;
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * gr[j] * tg.data()[j] - coef * xr[j];
                        ggain[j] += gr[j] * xr[j] * inv;
                    }
                }
                send(*x, gx);
                send(*gain, Tensor::new(tg.shape().to_vec(), ggain)?);
            }
            Op::Sum(a) => {
                send(*a, Tensor::full(self.value(*a).shape(), g.data()[0]));
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                send(*table, gt);
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                theta,
            } => send(*x, rope_apply(g, positions, *head_dim, *theta, -1.0)),
            Op::Block { x, row0, col0 } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                let cols = g.cols();
                for r in 0..g.rows() {
                    gx.row_mut(row0 + r)[*col0..col0 + cols].copy_from_slice(g.row(r));
                }
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let part = g.data()[start..start + len].to_vec();
                    send(p, Tensor::new(self.value(p).shape().to_vec(), part)?);
                    start += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col0 = 0;
                for &p in parts {
                    let width = self.value(p).cols();
                    let mut part = Vec::with_capacity(g.rows() * width);
                    for r in 0..g.rows() {
                        part.extend_from_slice(&g.row(r)[col0..col0 + width]);
                    }
                    send(p, Tensor::new(self.value(p).shape().to_vec(), part)?);
                    col0 += width;
                }
            }
            Op::FakeQuant {
                x,
                step,
                spec,
                scales,
                grad_scale,
            } => {
                let tx = self.value(*x);
                if self.requires_grad(*x) {
                    send(*x, quant::backward_ste(tx, scales, spec, g)?);
                }
                if let Some(s) = step.filter(|s| self.requires_grad(*s)) {
                    let gs = quant::backward_lsq_step(tx, scales, spec, g, *grad_scale)?;
                    send(s, Tensor::new(self.value(s).shape().to_vec(), gs)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            } => {
                let scale = g.data()[0];
                let mut gz = Tensor::zeros(probs.shape());
                for (r, &w) in row_weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = w * scale;
                    for ((o, &p), &t) in gz.row_mut(r).iter_mut().zip(probs.row(r)).zip(targets.row(r)) {
                        *o = c * (p - t);
                    }
                }
                send(*logits, gz);
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes already checked")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
