use std::sync::Arc;

use super::kernels::Unary;
use super::tensor::Tensor;
use crate::error::Result;

/// A named, shareable learned tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param {
            name: name.into(),
            value: Arc::new(value),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn arc(&self) -> &Arc<Tensor> {
        &self.value
    }

    pub fn set(&mut self, t: Tensor) {
        self.value = Arc::new(t);
    }

    /// Copy-on-write access to the tensor.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

/// The operation set every model forward is written against. [`Eager`]
/// evaluates immediately; [`super::Tape`] additionally records the graph for
/// reverse-mode differentiation. Both call the same kernels, so results are
/// bit-identical between the two.
pub trait Backend {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor;
    fn constant(&mut self, t: Tensor) -> Self::Var;
    fn param(&mut self, p: &Param) -> Self::Var;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var>;
    fn add_bias(&mut self, x: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn unary(&mut self, kind: Unary, x: &Self::Var) -> Result<Self::Var>;
    fn rms_norm(&mut self, x: &Self::Var, gamma: &Self::Var, eps: f64) -> Result<Self::Var>;
    fn layer_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: f64) -> Result<Self::Var>;
    fn cross_entropy(&mut self, logits: &Self::Var, target: usize) -> Result<Self::Var>;
    fn depthwise_valid(&mut self, xe: &Self::Var, w: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn conv2d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: &Self::Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self::Var>;
    fn channels_to_rows(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn slice_rows(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn slice_cols(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var>;
    fn reverse_rows(&mut self, x: &Self::Var) -> Result<Self::Var>;
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var>;
    fn outer(&mut self, u: &Self::Var, v: &Self::Var) -> Result<Self::Var>;
    fn mul_rows(&mut self, m: &Self::Var, v: &Self::Var) -> Result<Self::Var>;
    fn matvec(&mut self, m: &Self::Var, v: &Self::Var) -> Result<Self::Var>;
    fn gather_rows(&mut self, table: &Self::Var, ids: &[usize]) -> Result<Self::Var>;

    fn relu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.unary(Unary::Relu, x)
    }
    fn silu(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.unary(Unary::Silu, x)
    }
    fn softplus(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.unary(Unary::Softplus, x)
    }
    fn exp(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.unary(Unary::Exp, x)
    }
    fn neg(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.unary(Unary::Neg, x)
    }

    /// `x[.., din] · w[din, dout]` for a vector or a row batch.
    fn linear(&mut self, x: &Self::Var, w: &Self::Var) -> Result<Self::Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() == 1 {
            let x2 = self.reshape(x, &[1, shape[0]])?;
            let y = self.matmul(&x2, w)?;
            let n = self.value(&y).shape()[1];
            self.reshape(&y, &[n])
        } else {
            self.matmul(x, w)
        }
    }

    /// Row `t` of a `[T, d]` tensor as a `[d]` vector.
    fn row(&mut self, x: &Self::Var, t: usize) -> Result<Self::Var> {
        let d = self.value(x).shape()[1];
        let r = self.slice_rows(x, t, 1)?;
        self.reshape(&r, &[d])
    }
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

macro_rules! eager {
    ($e:expr) => {
        Ok(Arc::new($e?))
    };
}

impl Backend for Eager {
    type Var = Arc<Tensor>;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor {
        v
    }
    fn constant(&mut self, t: Tensor) -> Self::Var {
        Arc::new(t)
    }
    fn param(&mut self, p: &Param) -> Self::Var {
        p.arc().clone()
    }
    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        eager!(a.matmul(b))
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        eager!(a.add(b))
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        eager!(a.sub(b))
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        eager!(a.mul(b))
    }
    fn scale(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var> {
        eager!(a.scale(c))
    }
    fn add_bias(&mut self, x: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        eager!(x.add_bias(b))
    }
    fn unary(&mut self, kind: Unary, x: &Self::Var) -> Result<Self::Var> {
        eager!(x.unary(kind))
    }
    fn rms_norm(&mut self, x: &Self::Var, gamma: &Self::Var, eps: f64) -> Result<Self::Var> {
        eager!(x.rms_norm(gamma, eps))
    }
    fn layer_norm(&mut self, x: &Self::Var, gamma: &Self::Var, beta: &Self::Var, eps: f64) -> Result<Self::Var> {
        eager!(x.layer_norm(gamma, beta, eps))
    }
    fn cross_entropy(&mut self, logits: &Self::Var, target: usize) -> Result<Self::Var> {
        eager!(logits.cross_entropy(target))
    }
    fn depthwise_valid(&mut self, xe: &Self::Var, w: &Self::Var, bias: &Self::Var) -> Result<Self::Var> {
        eager!(xe.depthwise_valid(w, bias))
    }
    fn conv2d(
        &mut self,
        x: &Self::Var,
        w: &Self::Var,
        b: &Self::Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self::Var> {
        eager!(x.conv2d(w, b, stride, pad))
    }
    fn channels_to_rows(&mut self, x: &Self::Var) -> Result<Self::Var> {
        eager!(x.channels_to_rows())
    }
    fn concat_rows(&mut self, parts: &[Self::Var]) -> Result<Self::Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        eager!(Tensor::concat_rows(&refs))
    }
    fn slice_rows(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        eager!(x.slice_rows(start, len))
    }
    fn slice_cols(&mut self, x: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        eager!(x.slice_cols(start, len))
    }
    fn reverse_rows(&mut self, x: &Self::Var) -> Result<Self::Var> {
        eager!(x.reverse_rows())
    }
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        eager!(x.reshape(shape))
    }
    fn outer(&mut self, u: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        eager!(u.outer(v))
    }
    fn mul_rows(&mut self, m: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        eager!(m.mul_rows(v))
    }
    fn matvec(&mut self, m: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        eager!(m.matvec(v))
    }
    fn gather_rows(&mut self, table: &Self::Var, ids: &[usize]) -> Result<Self::Var> {
        eager!(table.gather_rows(ids))
    }
}
