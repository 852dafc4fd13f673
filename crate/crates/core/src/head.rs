//! Linear classifier `y = W z` on backbone features.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kv::KvMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `c×n`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl LinearHead {
    /// Zero-initialized head; with a zero head every class scores the same.
    pub fn zeros(classes: usize, features: usize, use_bias: bool) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("head needs >= 2 classes, got {classes}")));
        }
        if features == 0 {
            return Err(Error::config("head needs a non-zero feature width"));
        }
        Ok(LinearHead {
            weight: Tensor::zeros(&[classes, features]),
            bias: use_bias.then(|| Tensor::zeros(&[classes])),
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn bind(&self, g: &mut Graph, with_grad: bool) -> HeadVars {
        HeadVars {
            weight: g.leaf(self.weight.clone(), with_grad),
            bias: self.bias.as_ref().map(|b| g.leaf(b.clone(), with_grad)),
        }
    }

    /// Logits for `z` of shape `[n]` (returns `[c]`) or `[B, n]` (returns `[B, c]`).
    pub fn forward(&self, g: &mut Graph, vars: &HeadVars, z: Var) -> Result<Var> {
        let shape = g.value(z).shape().to_vec();
        let n = self.features();
        let (vector, width) = match shape.as_slice() {
            &[len] => (true, len),
            &[_, len] => (false, len),
            _ => return Err(Error::dim(format!("features must be rank 1 or 2, got {shape:?}"))),
        };
        if width != n {
            return Err(Error::dim(format!(
                "feature width {width} does not match head width {n}"
            )));
        }
        let zm = if vector { g.reshape(z, vec![1, n])? } else { z };
        let mut y = g.matmul_nt(zm, vars.weight)?;
        if let Some(b) = vars.bias {
            y = g.add_row(y, b)?;
        }
        if vector {
            y = g.reshape(y, vec![self.classes()])?;
        }
        Ok(y)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = KvMap::new();
        meta.set("kind", "head");
        meta.set("head.classes", self.classes());
        meta.set("head.features", self.features());
        meta.set("head.bias", self.bias.is_some());
        let mut ck = Checkpoint::new(meta);
        ck.push("head.W", self.weight.clone());
        if let Some(b) = &self.bias {
            ck.push("head.b", b.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let weight = ck.require("head.W")?.clone();
        let (c, n) = weight.dims2()?;
        let bias = ck.get("head.b").cloned();
        if let Some(b) = &bias {
            if b.shape() != [c] {
                return Err(Error::dim(format!("head.b has shape {:?}", b.shape())));
            }
        }
        if c < 2 || n == 0 {
            return Err(Error::config(format!("invalid head shape {c}x{n}")));
        }
        Ok(LinearHead { weight, bias })
    }
}

/// Argmax with ties going to the lowest index.
pub fn predict_top1(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::dim("empty logits"));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of rows of a `B×c` logit matrix whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
    }
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        if predict_top1(logits.row(i))? == l {
            hits += 1;
        }
    }
    Ok(hits as f64 / b as f64)
}
