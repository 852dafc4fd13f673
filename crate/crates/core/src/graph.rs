//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op in execution order, so the tape is already a
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each node exactly once. A node's gradient is summed over all of its
//! consumers before the node itself is visited.
//!
//! GELU uses the tanh approximation
//! `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Precision, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

/// Result of [`Graph::backward`]. Only nodes with `requires_grad` hold a buffer.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes that received a gradient buffer.
    pub fn buffer_count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of all recorded ops in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input. Values are rounded to the graph's precision.
    pub fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        self.precision.round_slice(t.data_mut());
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn push(&mut self, op: Op, mut value: Tensor, inputs: &[Var]) -> Result<Var> {
        self.precision.round_slice(value.data_mut());
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite output from {} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    /// `a · bᵀ`, the layout used for `x·Wᵀ` with tokens as rows.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (n, k2) = tb.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt inner dimensions differ: {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMulNT(a, b), out, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(Op::Transpose(a), out, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    /// Scalar broadcast multiply.
    pub fn scale(&mut self, a: Var, gamma: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * gamma);
        self.push(Op::Scale(a, gamma), out, &[a])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = last_dim(tx);
        if tb.len() != c {
            return Err(Error::dim(format!(
                "add_row: bias of length {} for rows of width {c}",
                tb.len()
            )));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(Op::AddRow(x, bias), out, &[x, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out, &[a])
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = self.value(x);
        let d = last_dim(tx);
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(Error::dim(format!(
                "layer_norm: gain/bias lengths {}/{} for width {d}",
                tg.len(),
                tb.len()
            )));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            out,
            &[x, gain, bias],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = last_dim(ta);
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(a), out, &[a])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, c) = tl.dims2()?;
        if labels.len() != b {
            return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = tl.data().to_vec();
        let mut per_row = Vec::with_capacity(b);
        for (row, &label) in probs.chunks_mut(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            per_row.push(lse - row[label]);
            softmax_in_place(row);
        }
        // Shifted mean: exact when every row has the same loss.
        let first = per_row[0];
        let shift = per_row.iter().map(|l| l - first).sum::<f64>() / b as f64;
        let out = Tensor::scalar(first + shift);
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            out,
            &[logits],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("slice_cols {start}+{len} out of {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], out)?;
        self.push(Op::SliceCols { x, start }, out, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::dim(format!("slice_rows {start}+{len} out of {r}")));
        }
        let out = Tensor::new(vec![len, c], tx.data()[start * c..(start + len) * c].to_vec())?;
        self.push(Op::SliceRows { x, start }, out, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let r = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim(format!("concat_cols: {pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], out)?;
        self.push(Op::ConcatCols(parts.to_vec()), out, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let c = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::dim(format!("concat_rows: {pc} cols vs {c}")));
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], out)?;
        self.push(Op::ConcatRows(parts.to_vec()), out, parts)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(Op::Reshape(x), out, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), out, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        let prec = self.precision;

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = grads[i].as_mut() {
                    prec.round_slice(g);
                }
                continue;
            }
            // Intermediate buffers are dropped once propagated.
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            prec.round_slice(&mut g);
            let send = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2()?;
                    let n = tb.dims2()?.1;
                    if self.requires_grad(*a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_nt(&g, tb.data(), &mut da, m, n, k);
                        send(*a, da, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_tn_acc(ta.data(), &g, &mut db, m, k, n);
                        send(*b, db, &mut grads);
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2()?;
                    let n = tb.dims2()?.0;
                    if self.requires_grad(*a) {
                        // C = A·Bᵀ: dA = dC · B
                        let mut da = vec![0.0; m * k];
                        kernels::matmul(&g, tb.data(), &mut da, m, n, k);
                        send(*a, da, &mut grads);
                    }
                    if self.requires_grad(*b) {
                        // dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        kernels::matmul_tn_acc(&g, ta.data(), &mut db, m, n, k);
                        send(*b, db, &mut grads);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = node.value.dims2()?;
                    let gt = Tensor::new(vec![r, c], g)?.transpose()?;
                    send(*a, gt.into_data(), &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect(), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.requires_grad(*a) {
                        send(*a, g.iter().zip(tb.data()).map(|(x, y)| x * y).collect(), &mut grads);
                    }
                    if self.requires_grad(*b) {
                        send(*b, g.iter().zip(ta.data()).map(|(x, y)| x * y).collect(), &mut grads);
                    }
                }
                Op::Scale(a, gamma) => {
                    send(*a, g.iter().map(|x| x * gamma).collect(), &mut grads);
                }
                Op::AddRow(x, bias) => {
                    if self.requires_grad(*bias) {
                        let c = last_dim(&node.value);
                        let mut gb = vec![0.0; c];
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                        }
                        send(*bias, gb, &mut grads);
                    }
                    send(*x, g, &mut grads);
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    send(
                        *a,
                        g.iter().zip(ta.data()).map(|(d, &x)| d * gelu_grad(x)).collect(),
                        &mut grads,
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = last_dim(&node.value);
                    let tg = self.value(*gain);
                    if self.requires_grad(*gain) {
                        let mut gg = vec![0.0; d];
                        for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                        send(*gain, gg, &mut grads);
                    }
                    if self.requires_grad(*bias) {
                        let mut gb = vec![0.0; d];
                        for grow in g.chunks(d) {
                            gb.iter_mut().zip(grow).for_each(|(a, r)| *a += r);
                        }
                        send(*bias, gb, &mut grads);
                    }
                    if self.requires_grad(*x) {
                        let mut gx = vec![0.0; g.len()];
                        for (r, s) in rstd.iter().enumerate() {
                            let grow = &g[r * d..(r + 1) * d];
                            let hrow = &xhat[r * d..(r + 1) * d];
                            let dh: Vec<f64> =
                                grow.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dhh =
                                dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] = s * (dh[j] - mean_dh - hrow[j] * mean_dhh);
                            }
                        }
                        send(*x, gx, &mut grads);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let c = last_dim(&node.value);
                    let y = node.value.data();
                    let mut gx = vec![0.0; g.len()];
                    for ((grow, yrow), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            out[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    send(*a, gx, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut gl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        gl[r * c + label] -= 1.0;
                    }
                    gl.iter_mut().for_each(|v| *v *= scale);
                    send(*logits, gl, &mut grads);
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.value(*x).dims2()?;
                    let len = node.value.dims2()?.1;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    send(*x, gx, &mut grads);
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.value(*x).dims2()?;
                    let mut gx = vec![0.0; r * c];
                    gx[start * c..start * c + g.len()].copy_from_slice(&g);
                    send(*x, gx, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = node.value.dims2()?;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).dims2()?.1;
                        if self.requires_grad(p) {
                            let mut gp = Vec::with_capacity(r * w);
                            for i in 0..r {
                                gp.extend_from_slice(
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                            send(p, gp, &mut grads);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.requires_grad(p) {
                            send(p, g[offset..offset + n].to_vec(), &mut grads);
                        }
                        offset += n;
                    }
                }
                Op::Reshape(x) => send(*x, g, &mut grads),
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    send(*x, vec![g[0]; n], &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
