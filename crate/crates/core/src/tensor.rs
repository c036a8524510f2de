//! Tape-based reverse-mode automatic differentiation over 2D f64 arrays.
//!
//! Every value on the tape is an `Array2<f64>`; vectors are 1 x D rows and
//! scalars are 1 x 1. The op set is exactly what the model needs: matmul,
//! residual arithmetic, GELU/sigmoid, layer norm, masked multi-head
//! attention, pooling, gathers, and the loss heads. Masked attention uses
//! exact exclusion: disallowed entries never enter the softmax.

use std::sync::Arc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::params::ParamStore;

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op {
    Leaf { param: Option<String> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<f64>, istd: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, mask: Arc<AttentionMask>, attn: Vec<Array2<f64>> },
    MeanRows(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    ConcatCols(NodeId, NodeId),
    GatherRows { x: NodeId, indices: Vec<usize> },
    PatchToCells { x: NodeId, side: usize, patch: usize, classes: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, probs: Array2<f64>, wsum: f64 },
    BceWithLogit { logit: NodeId, target: f64 },
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A single forward computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value[[0, 0]]
    }

    /// A constant with no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf { param: None })
    }

    /// A named parameter leaf; `backward` routes its gradient to the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let value = store.value(name).clone();
        self.push(value, Op::Leaf { param: Some(name.to_string()) })
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.constant(Array2::zeros((rows, cols)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    /// Broadcast-add a 1 x D row to every row of an N x D matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let r = self.nodes[row].value.row(0).to_owned();
        let v = &self.nodes[x].value + &r;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|t| {
            0.5 * t * (1.0 + (GELU_C * (t + GELU_A * t * t * t)).tanh())
        });
        self.push(v, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    /// Pre-norm layer normalization with learned gain/bias (1 x D each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (n, d) = xv.dim();
        let mut xhat = Array2::zeros((n, d));
        let mut istd = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            istd.push(is);
            for j in 0..d {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let g = self.nodes[gain].value.row(0).to_owned();
        let b = self.nodes[bias].value.row(0).to_owned();
        let v = &xhat * &g + &b;
        self.push(v, Op::LayerNorm { x, gain, bias, xhat, istd })
    }

    /// Multi-head attention with exact mask exclusion. `q`, `k`, `v` are
    /// S x D post-projection activations; the mask is S x S.
    pub fn masked_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Arc<AttentionMask>,
    ) -> Result<NodeId> {
        let (s, d) = self.nodes[q].value.dim();
        if mask.len() != s {
            return Err(Error::ShapeMismatch(format!("mask {} vs sequence {s}", mask.len())));
        }
        if d % heads != 0 {
            return Err(Error::ShapeMismatch(format!("{d} dims across {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((s, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = self.nodes[q].value.slice(ndarray::s![.., cols.clone()]).to_owned();
            let kh = self.nodes[k].value.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = self.nodes[v].value.slice(ndarray::s![.., cols.clone()]).to_owned();
            let mut a = Array2::zeros((s, s));
            for i in 0..s {
                let allowed = mask.row(i);
                let mut scores = Vec::with_capacity(allowed.len());
                let mut max = f64::NEG_INFINITY;
                for &j in allowed {
                    let sc = qh.row(i).dot(&kh.row(j)) * scale;
                    max = max.max(sc);
                    scores.push(sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                for (&j, &e) in allowed.iter().zip(scores.iter()) {
                    a[[i, j]] = e / z;
                }
            }
            let oh = a.dot(&vh);
            out.slice_mut(ndarray::s![.., cols]).assign(&oh);
            attn.push(a);
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads, mask, attn }))
    }

    /// Per-head attention matrices of an attention node (S x S, zero at
    /// disallowed entries). Used by the visualization export.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[Array2<f64>]> {
        match &self.nodes[id].op {
            Op::Attention { attn, .. } => Some(attn),
            _ => None,
        }
    }

    /// The mask an attention node was computed under.
    pub fn attention_mask(&self, id: NodeId) -> Option<&AttentionMask> {
        match &self.nodes[id].op {
            Op::Attention { mask, .. } => Some(mask),
            _ => None,
        }
    }

    /// Mean over rows: N x D -> 1 x D.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.nodes[x].value.mean_axis(Axis(0)).unwrap();
        let v = m.insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&id| self.nodes[id].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x].value.slice(ndarray::s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a].value.view(), self.nodes[b].value.view()],
        )
        .unwrap();
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Row-gather (embedding lookup): out row i = x row indices[i].
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let xv = &self.nodes[x].value;
        let mut v = Array2::zeros((indices.len(), xv.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&xv.row(ix));
        }
        self.push(v, Op::GatherRows { x, indices: indices.to_vec() })
    }

    /// Rearrange per-patch logits (L x p^2*classes, patches row-major on a
    /// `side` x `side` lattice) into per-cell logits ((side*p)^2 x classes).
    pub fn patch_to_cells(&mut self, x: NodeId, side: usize, patch: usize, classes: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        let canvas = side * patch;
        let mut v = Array2::zeros((canvas * canvas, classes));
        for pr in 0..side {
            for pc in 0..side {
                let token = pr * side + pc;
                for dr in 0..patch {
                    for dc in 0..patch {
                        let cell = (pr * patch + dr) * canvas + pc * patch + dc;
                        let base = (dr * patch + dc) * classes;
                        for kk in 0..classes {
                            v[[cell, kk]] = xv[[token, base + kk]];
                        }
                    }
                }
            }
        }
        self.push(v, Op::PatchToCells { x, side, patch, classes })
    }

    /// Weighted-mean cross-entropy over rows of an N x C logit matrix.
    /// Zero-weight rows contribute nothing; an all-zero weight vector gives
    /// exactly zero loss.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let (n, c) = lv.dim();
        assert_eq!(targets.len(), n);
        assert_eq!(weights.len(), n);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::ClassOutOfRange(t, c));
        }
        let mut probs = Array2::zeros((n, c));
        let mut loss = 0.0;
        let wsum: f64 = weights.iter().sum();
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[[i, j]] = e;
                z += e;
            }
            for j in 0..c {
                probs[[i, j]] /= z;
            }
            if weights[i] != 0.0 {
                loss += weights[i] * (z.ln() + max - row[targets[i]]);
            }
        }
        let value = if wsum > 0.0 { loss / wsum } else { 0.0 };
        Ok(self.push(
            Array2::from_elem((1, 1), value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, wsum },
        ))
    }

    /// Binary cross-entropy of a 1 x 1 pre-sigmoid score against a hard label.
    pub fn bce_with_logit(&mut self, logit: NodeId, target: f64) -> NodeId {
        let z = self.nodes[logit].value[[0, 0]];
        let loss = z.max(0.0) - z * target + (1.0 + (-z.abs()).exp()).ln();
        self.push(Array2::from_elem((1, 1), loss), Op::BceWithLogit { logit, target })
    }

    /// Elementwise weighted sum of same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut v: Array2<f64> = Array2::zeros(self.nodes[terms[0].0].value.dim());
        for &(id, w) in terms {
            v.scaled_add(w, &self.nodes[id].value);
        }
        self.push(v, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse-mode sweep from a scalar `loss` node. Parameter gradients
    /// accumulate into the store (repeated calls add up).
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::ones(self.nodes[loss].value.dim()));
        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let acc = |grads: &mut Vec<Option<Array2<f64>>>, target: NodeId, delta: Array2<f64>| {
                match &mut grads[target] {
                    Some(t) => *t += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        store.accumulate_grad(name, &g);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g.mapv(|t| -t));
                }
                Op::Hadamard(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = &g * &self.nodes[b].value;
                    let db = &g * &self.nodes[a].value;
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    acc(&mut grads, a, g.mapv(|t| t * c));
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, x, g);
                    acc(&mut grads, row, dr);
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let dx = (&self.nodes[x].value).mapv(|t| {
                        let u = GELU_C * (t + GELU_A * t * t * t);
                        let th = u.tanh();
                        0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * t * t)
                    }) * &g;
                    acc(&mut grads, x, dx);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let dx = self.nodes[id].value.mapv(|s| s * (1.0 - s)) * &g;
                    acc(&mut grads, x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, istd } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let (n, d) = g.dim();
                    let gv = self.nodes[gain].value.row(0).to_owned();
                    let mut dx = Array2::zeros((n, d));
                    let mut dgain = Array2::zeros((1, d));
                    let mut dbias = Array2::zeros((1, d));
                    for i in 0..n {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let dxh = g[[i, j]] * gv[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[[i, j]];
                            dgain[[0, j]] += g[[i, j]] * xhat[[i, j]];
                            dbias[[0, j]] += g[[i, j]];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let dxh = g[[i, j]] * gv[j];
                            dx[[i, j]] = istd[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
                        }
                    }
                    acc(&mut grads, x, dx);
                    acc(&mut grads, gain, dgain);
                    acc(&mut grads, bias, dbias);
                }
                Op::Attention { q, k, v, heads, attn, .. } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let (s, d) = g.dim();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros((s, d));
                    let mut dk = Array2::zeros((s, d));
                    let mut dv = Array2::zeros((s, d));
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let a = &attn[h];
                        let go = g.slice(ndarray::s![.., cols.clone()]).to_owned();
                        let qh = self.nodes[q].value.slice(ndarray::s![.., cols.clone()]).to_owned();
                        let kh = self.nodes[k].value.slice(ndarray::s![.., cols.clone()]).to_owned();
                        let vh = self.nodes[v].value.slice(ndarray::s![.., cols.clone()]).to_owned();
                        dv.slice_mut(ndarray::s![.., cols.clone()]).assign(&a.t().dot(&go));
                        let da = go.dot(&vh.t());
                        // softmax backward: ds = a * (da - rowsum(a * da))
                        let mut ds = Array2::zeros((s, s));
                        for i in 0..s {
                            let dot: f64 = (0..s).map(|j| a[[i, j]] * da[[i, j]]).sum();
                            for j in 0..s {
                                ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                            }
                        }
                        dq.slice_mut(ndarray::s![.., cols.clone()])
                            .assign(&ds.dot(&kh).mapv(|t| t * scale));
                        dk.slice_mut(ndarray::s![.., cols])
                            .assign(&ds.t().dot(&qh).mapv(|t| t * scale));
                    }
                    acc(&mut grads, q, dq);
                    acc(&mut grads, k, dk);
                    acc(&mut grads, v, dv);
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let n = self.nodes[x].value.nrows() as f64;
                    let row = g.row(0).to_owned();
                    let dx = Array2::from_shape_fn(self.nodes[x].value.dim(), |(_, j)| row[j] / n);
                    acc(&mut grads, x, dx);
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut start = 0;
                    for part in parts {
                        let n = self.nodes[part].value.nrows();
                        let dp = g.slice(ndarray::s![start..start + n, ..]).to_owned();
                        acc(&mut grads, part, dp);
                        start += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let mut dx: Array2<f64> = Array2::zeros(self.nodes[x].value.dim());
                    dx.slice_mut(ndarray::s![start..start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, x, dx);
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a].value.ncols();
                    let da = g.slice(ndarray::s![.., ..ca]).to_owned();
                    let db = g.slice(ndarray::s![.., ca..]).to_owned();
                    acc(&mut grads, a, da);
                    acc(&mut grads, b, db);
                }
                Op::GatherRows { x, indices } => {
                    let (x, indices) = (*x, indices.clone());
                    let mut dx: Array2<f64> = Array2::zeros(self.nodes[x].value.dim());
                    for (i, ix) in indices.into_iter().enumerate() {
                        let mut row = dx.row_mut(ix);
                        row += &g.row(i);
                    }
                    acc(&mut grads, x, dx);
                }
                Op::PatchToCells { x, side, patch, classes } => {
                    let (x, side, patch, classes) = (*x, *side, *patch, *classes);
                    let canvas = side * patch;
                    let mut dx: Array2<f64> = Array2::zeros(self.nodes[x].value.dim());
                    for pr in 0..side {
                        for pc in 0..side {
                            let token = pr * side + pc;
                            for dr in 0..patch {
                                for dc in 0..patch {
                                    let cell = (pr * patch + dr) * canvas + pc * patch + dc;
                                    let base = (dr * patch + dc) * classes;
                                    for kk in 0..classes {
                                        dx[[token, base + kk]] += g[[cell, kk]];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, x, dx);
                }
                Op::CrossEntropy { logits, targets, weights, probs, wsum } => {
                    let (logits, wsum) = (*logits, *wsum);
                    if wsum > 0.0 {
                        let scale = g[[0, 0]] / wsum;
                        let mut dl = probs.clone();
                        let (n, _) = dl.dim();
                        for i in 0..n {
                            let w = weights[i];
                            if w == 0.0 {
                                dl.row_mut(i).fill(0.0);
                                continue;
                            }
                            dl[[i, targets[i]]] -= 1.0;
                            dl.row_mut(i).mapv_inplace(|t| t * w * scale);
                        }
                        acc(&mut grads, logits, dl);
                    }
                }
                Op::BceWithLogit { logit, target } => {
                    let (logit, target) = (*logit, *target);
                    let z = self.nodes[logit].value[[0, 0]];
                    let dz = (sigmoid(z) - target) * g[[0, 0]];
                    acc(&mut grads, logit, Array2::from_elem((1, 1), dz));
                }
                Op::WeightedSum(terms) => {
                    let terms = terms.clone();
                    for (t, w) in terms {
                        acc(&mut grads, t, g.mapv(|x| x * w));
                    }
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
