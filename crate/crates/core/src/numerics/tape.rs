use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::backend::{Backend, Param};
use super::kernels::Unary;
use super::tensor::{DType, Tensor};
use crate::error::{invalid, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Unary(Unary, usize),
    RmsNorm(usize, usize, f64),
    LayerNorm(usize, usize, usize, f64),
    CrossEntropy(usize, usize),
    Depthwise(usize, usize, usize),
    Conv2d(usize, usize, usize, (usize, usize), (usize, usize)),
    ChannelsToRows(usize),
    Concat(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ReverseRows(usize),
    Reshape(usize),
    Outer(usize, usize),
    MulRows(usize, usize),
    MatVec(usize, usize),
    Gather(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Single-owner recording of a forward computation. Nodes are appended in
/// evaluation order, which is a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, usize>,
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
    /// Number of recorded nodes the reverse sweep processed.
    pub visited: usize,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.by_name.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.by_name.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.by_name.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    /// Accumulates `other` into `self` (summing tensors present in both).
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (k, v) in &other.by_name {
            match self.by_name.get_mut(k) {
                Some(acc) => *acc = acc.add(v)?,
                None => {
                    self.by_name.insert(k.clone(), v.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) -> Result<()> {
        for v in self.by_name.values_mut() {
            *v = v.scale(c)?;
        }
        Ok(())
    }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value_of(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn v(&self, x: &Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    /// Reverse sweep from a scalar `loss`. Each recorded node that lies on a
    /// gradient path is processed exactly once, in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.v(&loss);
        if lv.numel() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_f64(lv.shape(), vec![1.0], lv.dtype())?);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            out.visited += 1;
            let acc = |grads: &mut Vec<Option<Tensor>>, j: usize, t: Tensor| -> Result<()> {
                if !self.nodes[j].needs_grad {
                    return Ok(());
                }
                grads[j] = Some(match grads[j].take() {
                    None => t,
                    Some(prev) => prev.add(&t)?,
                });
                Ok(())
            };
            let val = |j: usize| -> &Tensor { &self.nodes[j].value };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => {
                    out.by_name.insert(name.clone(), g);
                }
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        acc(&mut grads, *a, g.gemm(val(*b), false, true)?)?;
                    }
                    if self.nodes[*b].needs_grad {
                        acc(&mut grads, *b, val(*a).gemm(&g, true, false)?)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone())?;
                    acc(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scale(-1.0)?)?;
                    acc(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, g.mul(val(*b))?)?;
                    acc(&mut grads, *b, g.mul(val(*a))?)?;
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.scale(*c)?)?,
                Op::AddBias(x, b) => {
                    acc(&mut grads, *b, g.sum_rows())?;
                    acc(&mut grads, *x, g)?;
                }
                Op::Unary(kind, x) => {
                    let dx = Tensor::unary_backward(*kind, &g, val(*x), &node.value)?;
                    acc(&mut grads, *x, dx)?;
                }
                Op::RmsNorm(x, gamma, eps) => {
                    let (dx, dg) = Tensor::rms_norm_backward(&g, val(*x), val(*gamma), *eps)?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *gamma, dg)?;
                }
                Op::LayerNorm(x, gamma, beta, eps) => {
                    let (dx, dg, db) = Tensor::layer_norm_backward(&g, val(*x), val(*gamma), *eps)?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *gamma, dg)?;
                    acc(&mut grads, *beta, db)?;
                }
                Op::CrossEntropy(x, t) => {
                    acc(&mut grads, *x, Tensor::cross_entropy_backward(&g, val(*x), *t)?)?;
                }
                Op::Depthwise(xe, w, b) => {
                    let (dx, dw, db) = Tensor::depthwise_backward(&g, val(*xe), val(*w))?;
                    acc(&mut grads, *xe, dx)?;
                    acc(&mut grads, *w, dw)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::Conv2d(x, w, b, stride, pad) => {
                    let (dx, dw, db) = Tensor::conv2d_backward(&g, val(*x), val(*w), val(*b), *stride, *pad)?;
                    acc(&mut grads, *x, dx)?;
                    acc(&mut grads, *w, dw)?;
                    acc(&mut grads, *b, db)?;
                }
                Op::ChannelsToRows(x) => {
                    let s = val(*x).shape();
                    acc(&mut grads, *x, Tensor::rows_to_channels(&g, s[0], s[1], s[2]))?;
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pv = val(p);
                        let rows = if pv.shape().len() == 1 { 1 } else { pv.shape()[0] };
                        let piece = g.slice_rows(start, rows)?.reshape(pv.shape())?;
                        acc(&mut grads, p, piece)?;
                        start += rows;
                    }
                }
                Op::SliceRows(x, start) => {
                    let rows = val(*x).shape()[0];
                    acc(&mut grads, *x, g.pad_rows(*start, rows))?;
                }
                Op::SliceCols(x, start) => {
                    let cols = val(*x).shape()[1];
                    acc(&mut grads, *x, g.pad_cols(*start, cols))?;
                }
                Op::ReverseRows(x) => acc(&mut grads, *x, g.reverse_rows()?)?,
                Op::Reshape(x) => {
                    let s = val(*x).shape().to_vec();
                    acc(&mut grads, *x, g.reshape(&s)?)?;
                }
                Op::Outer(u, v) => {
                    acc(&mut grads, *u, g.matvec(val(*v))?)?;
                    let gv = g.gemm(&val(*u).reshape(&[val(*u).numel(), 1])?, true, false)?;
                    acc(&mut grads, *v, gv.reshape(&[val(*v).numel()])?)?;
                }
                Op::MulRows(m, v) => {
                    acc(&mut grads, *m, g.mul_rows(val(*v))?)?;
                    acc(&mut grads, *v, g.row_dots(val(*m))?)?;
                }
                Op::MatVec(m, v) => {
                    acc(&mut grads, *m, g.outer(val(*v))?)?;
                    let n = g.numel();
                    let gv = val(*m).gemm(&g.reshape(&[n, 1])?, true, false)?;
                    acc(&mut grads, *v, gv.reshape(&[val(*v).numel()])?)?;
                }
                Op::Gather(table, ids) => {
                    let rows = val(*table).shape()[0];
                    acc(&mut grads, *table, Tensor::scatter_rows(&g, ids, rows))?;
                }
            }
        }
        Ok(out)
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::AddBias(a, b) | Op::RmsNorm(a, b, _) | Op::Outer(a, b) | Op::MulRows(a, b) | Op::MatVec(a, b) => {
            vec![*a, *b]
        }
        Op::LayerNorm(a, b, c, _) | Op::Depthwise(a, b, c) | Op::Conv2d(a, b, c, _, _) => vec![*a, *b, *c],
        Op::Scale(a, _)
        | Op::Unary(_, a)
        | Op::CrossEntropy(a, _)
        | Op::ChannelsToRows(a)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::ReverseRows(a)
        | Op::Reshape(a)
        | Op::Gather(a, _) => vec![*a],
        Op::Concat(ps) => ps.clone(),
    }
}

impl Backend for Tape {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.v(v)
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, p: &Param) -> Var {
        if let Some(&id) = self.params.get(p.name()) {
            return Var(id);
        }
        self.nodes.push(Node {
            value: p.arc().clone(),
            op: Op::Param(p.name().to_string()),
            needs_grad: true,
        });
        let id = self.nodes.len() - 1;
        self.params.insert(p.name().to_string(), id);
        Var(id)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.v(a).matmul(self.v(b))?;
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.v(a).add(self.v(b))?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }
    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.v(a).sub(self.v(b))?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }
    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = self.v(a).mul(self.v(b))?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }
    fn scale(&mut self, a: &Var, c: f64) -> Result<Var> {
        let t = self.v(a).scale(c)?;
        Ok(self.push(t, Op::Scale(a.0, c)))
    }
    fn add_bias(&mut self, x: &Var, b: &Var) -> Result<Var> {
        let t = self.v(x).add_bias(self.v(b))?;
        Ok(self.push(t, Op::AddBias(x.0, b.0)))
    }
    fn unary(&mut self, kind: Unary, x: &Var) -> Result<Var> {
        let t = self.v(x).unary(kind)?;
        Ok(self.push(t, Op::Unary(kind, x.0)))
    }
    fn rms_norm(&mut self, x: &Var, gamma: &Var, eps: f64) -> Result<Var> {
        let t = self.v(x).rms_norm(self.v(gamma), eps)?;
        Ok(self.push(t, Op::RmsNorm(x.0, gamma.0, eps)))
    }
    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let t = self.v(x).layer_norm(self.v(gamma), self.v(beta), eps)?;
        Ok(self.push(t, Op::LayerNorm(x.0, gamma.0, beta.0, eps)))
    }
    fn cross_entropy(&mut self, logits: &Var, target: usize) -> Result<Var> {
        let t = self.v(logits).cross_entropy(target)?;
        Ok(self.push(t, Op::CrossEntropy(logits.0, target)))
    }
    fn depthwise_valid(&mut self, xe: &Var, w: &Var, bias: &Var) -> Result<Var> {
        let t = self.v(xe).depthwise_valid(self.v(w), self.v(bias))?;
        Ok(self.push(t, Op::Depthwise(xe.0, w.0, bias.0)))
    }
    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let t = self.v(x).conv2d(self.v(w), self.v(b), stride, pad)?;
        Ok(self.push(t, Op::Conv2d(x.0, w.0, b.0, stride, pad)))
    }
    fn channels_to_rows(&mut self, x: &Var) -> Result<Var> {
        let t = self.v(x).channels_to_rows()?;
        Ok(self.push(t, Op::ChannelsToRows(x.0)))
    }
    fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| self.v(p)).collect();
        let t = Tensor::concat_rows(&refs)?;
        Ok(self.push(t, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }
    fn slice_rows(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let t = self.v(x).slice_rows(start, len)?;
        Ok(self.push(t, Op::SliceRows(x.0, start)))
    }
    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let t = self.v(x).slice_cols(start, len)?;
        Ok(self.push(t, Op::SliceCols(x.0, start)))
    }
    fn reverse_rows(&mut self, x: &Var) -> Result<Var> {
        let t = self.v(x).reverse_rows()?;
        Ok(self.push(t, Op::ReverseRows(x.0)))
    }
    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let t = self.v(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x.0)))
    }
    fn outer(&mut self, u: &Var, v: &Var) -> Result<Var> {
        let t = self.v(u).outer(self.v(v))?;
        Ok(self.push(t, Op::Outer(u.0, v.0)))
    }
    fn mul_rows(&mut self, m: &Var, v: &Var) -> Result<Var> {
        let t = self.v(m).mul_rows(self.v(v))?;
        Ok(self.push(t, Op::MulRows(m.0, v.0)))
    }
    fn matvec(&mut self, m: &Var, v: &Var) -> Result<Var> {
        let t = self.v(m).matvec(self.v(v))?;
        Ok(self.push(t, Op::MatVec(m.0, v.0)))
    }
    fn gather_rows(&mut self, table: &Var, ids: &[usize]) -> Result<Var> {
        let t = self.v(table).gather_rows(ids)?;
        Ok(self.push(t, Op::Gather(table.0, ids.to_vec())))
    }
}

/// Sum of scalar vars (left fold), or a zero scalar when empty.
pub fn sum_scalars<B: Backend>(b: &mut B, xs: &[B::Var], dtype: DType) -> Result<B::Var> {
    let mut it = xs.iter();
    let Some(first) = it.next() else {
        return Ok(b.constant(Tensor::scalar(0.0, dtype)));
    };
    let mut acc = first.clone();
    for x in it {
        acc = b.add(&acc, x)?;
    }
    Ok(acc)
}
