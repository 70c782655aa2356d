//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! already topologically sorted; [`Graph::backward`] walks it once in reverse.
//! One graph covers one forward/backward cycle. Gradients of leaves are read
//! out afterwards and accumulated by the caller (see
//! [`crate::model::ModelParams::accumulate`]).

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{self, LayerNormCache, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulConst(usize, Tensor),
    MaskedFill(usize, Vec<bool>),
    SoftmaxRows(usize),
    Sigmoid(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cache: LayerNormCache,
    },
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    OffsetExpand {
        src: usize,
        len: usize,
        causal: bool,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Tensor,
        scale: f64,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradient of the last [`Graph::backward`] target with respect to `v`.
    /// `None` when `v` does not require a gradient or was not reached.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    /// Back-propagates from a scalar `loss` through every recorded operation.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut push = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&delta).expect("gradient shape"),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                &Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        push(a, tensor::matmul_nt(&g, vb)?);
                    }
                    if nodes[b].requires_grad {
                        push(b, tensor::matmul_tn(va, &g)?);
                    }
                }
                &Op::MatMulNt(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    if nodes[a].requires_grad {
                        push(a, tensor::matmul(&g, vb)?);
                    }
                    if nodes[b].requires_grad {
                        push(b, tensor::matmul_tn(&g, va)?);
                    }
                }
                &Op::Transpose(a) => push(a, g.transpose()?),
                &Op::Add(a, b) => {
                    push(b, g.clone());
                    push(a, g);
                }
                &Op::Sub(a, b) => {
                    push(b, g.map(|x| -x));
                    push(a, g);
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a].value, &nodes[b].value);
                    push(a, g.zip_map(vb, "mul", |x, y| x * y)?);
                    push(b, g.zip_map(va, "mul", |x, y| x * y)?);
                }
                &Op::Scale(a, k) => push(a, g.map(|x| x * k)),
                &Op::AddRow(a, bias) => {
                    let n = nodes[bias].value.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, x) in gb.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    push(bias, Tensor::new(&[n], gb)?);
                    push(a, g);
                }
                Op::MulConst(a, c) => push(*a, g.zip_map(c, "mul_const", |x, y| x * y)?),
                Op::MaskedFill(a, mask) => {
                    let mut ga = g;
                    for (x, &m) in ga.data_mut().iter_mut().zip(mask) {
                        if m {
                            *x = 0.0;
                        }
                    }
                    push(*a, ga);
                }
                &Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut ga = g;
                    for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for (gx, yx) in grow.iter_mut().zip(yrow) {
                            *gx = yx * (*gx - dot);
                        }
                    }
                    push(a, ga);
                }
                &Op::Sigmoid(a) => {
                    push(a, g.zip_map(&node.value, "sigmoid", |gx, s| gx * s * (1.0 - s))?);
                }
                &Op::Gelu(a) => {
                    let x = &nodes[a].value;
                    push(a, g.zip_map(x, "gelu", |gx, xv| gx * tensor::gelu_grad_scalar(xv))?);
                }
                Op::LayerNorm { x, gain, bias, cache } => {
                    let gv = &nodes[*gain].value;
                    let d = gv.numel();
                    let xhat = &cache.normalized;
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    let mut dx = vec![0.0; g.numel()];
                    for (r, ((grow, xrow), dxrow)) in g
                        .data()
                        .chunks(d)
                        .zip(xhat.data().chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for k in 0..d {
                            dgain[k] += grow[k] * xrow[k];
                            dbias[k] += grow[k];
                            let dxhat = grow[k] * gv.data()[k];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xrow[k];
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let rstd = cache.rstd[r];
                        for k in 0..d {
                            let dxhat = grow[k] * gv.data()[k];
                            dxrow[k] = rstd * (dxhat - mean_dxhat - xrow[k] * mean_dxhat_xhat);
                        }
                    }
                    push(*gain, Tensor::new(&[d], dgain)?);
                    push(*bias, Tensor::new(&[d], dbias)?);
                    push(*x, Tensor::new(g.shape(), dx)?);
                }
                &Op::SliceCols(a, start) => {
                    let (r, c) = nodes[a].value.dims2("slice_cols")?;
                    let w = g.shape()[1];
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        ga[i * c + start..i * c + start + w].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                    push(a, Tensor::new(&[r, c], ga)?);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = nodes[p].value.shape()[1];
                        push(p, g.slice_cols(start, start + w)?);
                        start += w;
                    }
                }
                Op::Gather { table, ids } => {
                    let shape = nodes[*table].value.shape().to_vec();
                    let d = shape[1];
                    let mut gt = Tensor::zeros(&shape);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                        for (acc, x) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *acc += x;
                        }
                    }
                    push(*table, gt);
                }
                &Op::OffsetExpand { src, len, causal } => {
                    let n = nodes[src].value.numel();
                    let mut ga = vec![0.0; n];
                    for i in 0..len {
                        for j in 0..len {
                            if causal && j > i {
                                continue;
                            }
                            ga[i.abs_diff(j)] += g.data()[i * len + j];
                        }
                    }
                    push(src, Tensor::new(&[n], ga)?);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    ignore_index,
                    probs,
                    scale,
                } => {
                    let upstream = g.item() * scale;
                    let v = probs.shape()[1];
                    let mut gl = probs.clone();
                    for (row, &t) in gl.data_mut().chunks_mut(v).zip(targets) {
                        if t == *ignore_index {
                            row.iter_mut().for_each(|x| *x = 0.0);
                            continue;
                        }
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= upstream);
                    }
                    push(*logits, gl);
                }
                &Op::Sum(a) => {
                    let s = g.item();
                    push(a, Tensor::full(nodes[a].value.shape(), s));
                }
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value_of(self.id).clone()
    }

    pub fn value_ref(&self) -> Ref<'g, Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.value_of(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(&[self.id])
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.grad(*self)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "operands belong to different graphs"
        );
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        let rg = self.graph.requires(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        self.same_graph(other);
        let rg = self.graph.requires(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul(&self.value_ref(), &other.value_ref())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = tensor::matmul_nt(&self.value_ref(), &other.value_ref())?;
        Ok(self.binary(other, v, Op::MatMulNt(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'g>> {
        let v = self.value_ref().transpose()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.value_ref().zip_map(&other.value_ref(), "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.value_ref().zip_map(&other.value_ref(), "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let v = self.value_ref().zip_map(&other.value_ref(), "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(&self, k: f64) -> Var<'g> {
        let v = self.value_ref().map(|x| x * k);
        self.unary(v, Op::Scale(self.id, k))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let x = self.value_ref();
        let b = bias.value_ref();
        let (_, n) = x.dims2("add_row")?;
        if b.shape() != [n] {
            return Err(Error::shape("add_row", x.shape(), b.shape()));
        }
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(n) {
            for (a, c) in row.iter_mut().zip(b.data()) {
                *a += c;
            }
        }
        drop((x, b));
        Ok(self.binary(bias, v, Op::AddRow(self.id, bias.id)))
    }

    /// Elementwise product with a constant (no gradient flows to `c`).
    pub fn mul_const(&self, c: Tensor) -> Result<Var<'g>> {
        let v = self.value_ref().zip_map(&c, "mul_const", |a, b| a * b)?;
        Ok(self.unary(v, Op::MulConst(self.id, c)))
    }

    /// Replaces entries where `mask` is true by `fill`; those entries pass no gradient.
    pub fn masked_fill(&self, mask: Vec<bool>, fill: f64) -> Result<Var<'g>> {
        let mut v = self.value();
        if mask.len() != v.numel() {
            return Err(Error::shape("masked_fill", v.shape(), &[mask.len()]));
        }
        for (x, &m) in v.data_mut().iter_mut().zip(&mask) {
            if m {
                *x = fill;
            }
        }
        Ok(self.unary(v, Op::MaskedFill(self.id, mask)))
    }

    pub fn softmax_rows(&self) -> Result<Var<'g>> {
        let v = tensor::softmax_rows(&self.value_ref())?;
        Ok(self.unary(v, Op::SoftmaxRows(self.id)))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = tensor::sigmoid(&self.value_ref());
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn gelu(&self) -> Var<'g> {
        let v = self.value_ref().map(tensor::gelu_scalar);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn layer_norm(&self, gain: &Var<'g>, bias: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (v, cache) = tensor::layer_norm(&self.value_ref(), &gain.value_ref(), &bias.value_ref(), eps)?;
        let rg = self.graph.requires(&[self.id, gain.id, bias.id]);
        Ok(self.graph.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                cache,
            },
            rg,
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'g>> {
        let v = self.value_ref().slice_cols(start, end)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one part"))?;
        let graph = first.graph;
        let (rows, _) = first.value_ref().dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.same_graph(p);
            let (r, c) = p.value_ref().dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", &first.shape(), &p.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value_ref().row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.requires(&ids);
        Ok(graph.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(ids), rg))
    }

    /// Row lookup: `out[r] = self[ids[r]]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'g>> {
        let table = self.value_ref();
        let (n, d) = table.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: id,
                    bound: n,
                });
            }
            data.extend_from_slice(table.row(id));
        }
        drop(table);
        let v = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.unary(
            v,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Expands a per-offset vector into a `len×len` matrix with
    /// `out[i][j] = self[|i − j|]`. With `causal`, entries above the diagonal are 0.
    pub fn offset_expand(&self, len: usize, causal: bool) -> Result<Var<'g>> {
        let src = self.value_ref();
        if src.rank() != 1 || (len > 0 && src.numel() < len) {
            return Err(Error::shape("offset_expand", src.shape(), &[len]));
        }
        let mut data = vec![0.0; len * len];
        for i in 0..len {
            for j in 0..len {
                if !(causal && j > i) {
                    data[i * len + j] = src.data()[i.abs_diff(j)];
                }
            }
        }
        drop(src);
        Ok(self.unary(
            Tensor::new(&[len, len], data)?,
            Op::OffsetExpand {
                src: self.id,
                len,
                causal,
            },
        ))
    }

    /// Mean next-token cross-entropy over rows whose target is not `ignore_index`
    /// (0 when every row is ignored).
    pub fn cross_entropy(&self, targets: &[usize], ignore_index: usize) -> Result<Var<'g>> {
        let counted = targets.iter().filter(|&&t| t != ignore_index).count();
        let scale = if counted == 0 { 0.0 } else { 1.0 / counted as f64 };
        self.cross_entropy_scaled(targets, ignore_index, scale)
    }

    /// `scale · Σ` of per-row cross-entropy; lets callers normalize over a whole batch.
    pub fn cross_entropy_scaled(&self, targets: &[usize], ignore_index: usize, scale: f64) -> Result<Var<'g>> {
        let (sum, _, probs) = tensor::cross_entropy_sum(&self.value_ref(), targets, ignore_index)?;
        Ok(self.unary(
            Tensor::scalar(sum * scale),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                scale,
            },
        ))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value_ref().sum());
        self.unary(v, Op::Sum(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic_gradients() {
        let g = Graph::new();
        let w = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let loss = w.sum();
        g.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[1.0, 1.0, 1.0]);

        let g = Graph::new();
        let w = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let loss = w.mul(&w).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let w = g.leaf(Tensor::full(&[2], 3.0));
        let c = g.constant(Tensor::full(&[2], 5.0));
        let loss = w.mul(&c).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[5.0, 5.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(w·w + w) → 2w + 1
        let g = Graph::new();
        let w = g.leaf(Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let loss = w.mul(&w).unwrap().add(&w).unwrap().sum();
        g.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let g = Graph::new();
        let table = g.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            table.gather_rows(&[0, 4]),
            Err(Error::Index { index: 4, bound: 4, .. })
        ));
    }
}
