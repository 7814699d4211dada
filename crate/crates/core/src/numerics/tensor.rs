use serde::{Deserialize, Serialize};

use super::kernels::{self as k, Conv2dGeom, Scalar, Unary};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "F32" => Ok(DType::F32),
            "f64" | "F64" => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Storage {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Dense row-major tensor whose element type is chosen at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    storage: Storage,
}

macro_rules! map1 {
    ($x:expr, $v:ident => $body:expr) => {
        match &$x.storage {
            Storage::F32($v) => Storage::F32($body),
            Storage::F64($v) => Storage::F64($body),
        }
    };
}

macro_rules! map2 {
    ($op:expr, $a:expr, $b:expr, ($u:ident, $v:ident) => $body:expr) => {
        match (&$a.storage, &$b.storage) {
            (Storage::F32($u), Storage::F32($v)) => Storage::F32($body),
            (Storage::F64($u), Storage::F64($v)) => Storage::F64($body),
            _ => return Err(Error::DType { op: $op }),
        }
    };
}

macro_rules! map3 {
    ($op:expr, $a:expr, $b:expr, $c:expr, ($u:ident, $v:ident, $w:ident) => $body:expr) => {
        match (&$a.storage, &$b.storage, &$c.storage) {
            (Storage::F32($u), Storage::F32($v), Storage::F32($w)) => Storage::F32($body),
            (Storage::F64($u), Storage::F64($v), Storage::F64($w)) => Storage::F64($body),
            _ => return Err(Error::DType { op: $op }),
        }
    };
}

macro_rules! split3 {
    ($op:expr, $a:expr, $b:expr, $c:expr, ($u:ident, $v:ident, $w:ident) => $body:expr) => {
        match (&$a.storage, &$b.storage, &$c.storage) {
            (Storage::F32($u), Storage::F32($v), Storage::F32($w)) => {
                let (p, q, r) = $body;
                (Storage::F32(p), Storage::F32(q), Storage::F32(r))
            }
            (Storage::F64($u), Storage::F64($v), Storage::F64($w)) => {
                let (p, q, r) = $body;
                (Storage::F64(p), Storage::F64(q), Storage::F64(r))
            }
            _ => return Err(Error::DType { op: $op }),
        }
    };
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn raw(shape: Vec<usize>, storage: Storage) -> Self {
        Tensor { shape, storage }
    }

    fn checked(op: &'static str, shape: Vec<usize>, storage: Storage) -> Result<Self> {
        let t = Tensor { shape, storage };
        if t.all_finite() {
            Ok(t)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = numel_of(shape);
        let storage = match dtype {
            DType::F32 => Storage::F32(vec![0.0; n]),
            DType::F64 => Storage::F64(vec![0.0; n]),
        };
        Tensor::raw(shape.to_vec(), storage)
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape, self.dtype())
    }

    /// Builds a tensor of the requested dtype from f64 values.
    pub fn from_f64(shape: &[usize], data: Vec<f64>, dtype: DType) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(shape_err(
                "from_f64",
                format!("shape {shape:?} needs {} values, got {}", numel_of(shape), data.len()),
            ));
        }
        let storage = match dtype {
            DType::F64 => Storage::F64(data),
            DType::F32 => Storage::F32(data.into_iter().map(|v| v as f32).collect()),
        };
        Tensor::checked("from_f64", shape.to_vec(), storage)
    }

    pub fn from_f32(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(shape_err("from_f32", format!("shape {shape:?} vs {} values", data.len())));
        }
        Tensor::checked("from_f32", shape.to_vec(), Storage::F32(data))
    }

    pub fn scalar(v: f64, dtype: DType) -> Self {
        Tensor::from_f64(&[], vec![v], dtype).expect("finite scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        match &self.storage {
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    pub fn dtype(&self) -> DType {
        match &self.storage {
            Storage::F32(_) => DType::F32,
            Storage::F64(_) => DType::F64,
        }
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    /// Payload size in bytes.
    pub fn nbytes(&self) -> usize {
        self.numel() * self.dtype().size_bytes()
    }

    pub fn all_finite(&self) -> bool {
        match &self.storage {
            Storage::F32(v) => v.iter().all(|x| x.is_finite()),
            Storage::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match &self.storage {
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.get(0)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.storage {
            Storage::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Storage::F64(v) => v.clone(),
        }
    }

    pub fn as_f64_slice(&self) -> Option<&[f64]> {
        match &self.storage {
            Storage::F64(v) => Some(v),
            Storage::F32(_) => None,
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        if dtype == self.dtype() {
            return self.clone();
        }
        let storage = match (&self.storage, dtype) {
            (Storage::F64(v), DType::F32) => Storage::F32(v.iter().map(|&x| x as f32).collect()),
            (Storage::F32(v), DType::F64) => Storage::F64(v.iter().map(|&x| x as f64).collect()),
            _ => unreachable!(),
        };
        Tensor::raw(self.shape.clone(), storage)
    }

    /// Returns a copy with one element overwritten (used by finite differences).
    pub fn with_value(&self, i: usize, v: f64) -> Tensor {
        let mut t = self.clone();
        match &mut t.storage {
            Storage::F32(d) => d[i] = v as f32,
            Storage::F64(d) => d[i] = v,
        }
        t
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.storage {
            Storage::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Storage::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(shape: &[usize], dtype: DType, bytes: &[u8]) -> Result<Self> {
        let n = numel_of(shape);
        if bytes.len() != n * dtype.size_bytes() {
            return Err(Error::Format(format!(
                "tensor of shape {shape:?} ({}) needs {} bytes, got {}",
                dtype.name(),
                n * dtype.size_bytes(),
                bytes.len()
            )));
        }
        let storage = match dtype {
            DType::F32 => Storage::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => Storage::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Tensor::raw(shape.to_vec(), storage))
    }

    /// Trailing-dimension view: `[d]` is treated as `[1, d]`.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let d = *self.shape.last().unwrap();
                (self.numel() / d.max(1), d)
            }
        }
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(shape_err(op, format!("expected rank {rank}, got shape {:?}", self.shape)));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Tensor::raw(shape.to_vec(), self.storage.clone()))
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        self.gemm(b, false, false)
    }

    /// General product with optional transposition of either stored operand.
    pub fn gemm(&self, b: &Tensor, a_t: bool, b_t: bool) -> Result<Tensor> {
        self.expect_rank("matmul", 2)?;
        b.expect_rank("matmul", 2)?;
        let (m, ka) = if a_t { (self.shape[1], self.shape[0]) } else { (self.shape[0], self.shape[1]) };
        let (kb, n) = if b_t { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
        if ka != kb {
            return Err(shape_err("matmul", format!("{:?} x {:?}", self.shape, b.shape)));
        }
        let s = map2!("matmul", self, b, (x, y) => k::gemm(x, y, m, ka, n, a_t, b_t));
        Tensor::checked("matmul", vec![m, n], s)
    }

    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        self.same_shape("add", b)?;
        let s = map2!("add", self, b, (x, y) => x.iter().zip(y).map(|(&p, &q)| p + q).collect());
        Tensor::checked("add", self.shape.clone(), s)
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor> {
        self.same_shape("sub", b)?;
        let s = map2!("sub", self, b, (x, y) => x.iter().zip(y).map(|(&p, &q)| p - q).collect());
        Tensor::checked("sub", self.shape.clone(), s)
    }

    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        self.same_shape("mul", b)?;
        let s = map2!("mul", self, b, (x, y) => x.iter().zip(y).map(|(&p, &q)| p * q).collect());
        Tensor::checked("mul", self.shape.clone(), s)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        fn go<T: Scalar>(x: &[T], c: f64) -> Vec<T> {
            let c = T::from_f64(c);
            x.iter().map(|&v| v * c).collect()
        }
        let s = map1!(self, x => go(x, c));
        Tensor::checked("scale", self.shape.clone(), s)
    }

    /// Adds `b[d]` to every row of `self[.., d]`.
    pub fn add_bias(&self, b: &Tensor) -> Result<Tensor> {
        let (_, d) = self.rows_cols();
        if b.shape != [d] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", self.shape, b.shape)));
        }
        let s = map2!("add_bias", self, b, (x, y) =>
            x.chunks(d).flat_map(|r| r.iter().zip(y).map(|(&p, &q)| p + q)).collect());
        Tensor::checked("add_bias", self.shape.clone(), s)
    }

    /// Column sums of a `[.., d]` tensor.
    pub fn sum_rows(&self) -> Tensor {
        fn go<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
            let mut out = vec![T::zero(); d];
            for r in x.chunks(d) {
                for (o, &v) in out.iter_mut().zip(r) {
                    *o = *o + v;
                }
            }
            out
        }
        let (_, d) = self.rows_cols();
        Tensor::raw(vec![d], map1!(self, x => go(x, d)))
    }

    pub fn unary(&self, kind: Unary) -> Result<Tensor> {
        let s = map1!(self, x => k::unary_fwd(kind, x));
        Tensor::checked("unary", self.shape.clone(), s)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(Unary::Relu)
    }
    pub fn silu(&self) -> Result<Tensor> {
        self.unary(Unary::Silu)
    }
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Unary::Softplus)
    }
    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Unary::Exp)
    }
    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Unary::Sigmoid)
    }

    pub(crate) fn unary_backward(kind: Unary, g: &Tensor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let s = map3!("unary_backward", g, x, y, (a, b, c) => k::unary_bwd(kind, a, b, c));
        Ok(Tensor::raw(x.shape.clone(), s))
    }

    pub fn rms_norm(&self, gamma: &Tensor, eps: f64) -> Result<Tensor> {
        let (_, d) = self.rows_cols();
        if gamma.shape != [d] {
            return Err(shape_err("rms_norm", format!("{:?} with gamma {:?}", self.shape, gamma.shape)));
        }
        if eps < 0.0 {
            return Err(Error::Invalid("rms_norm eps must be non-negative".into()));
        }
        let s = map2!("rms_norm", self, gamma, (x, g) => k::rms_norm_fwd(x, g, d, eps));
        Tensor::checked("rms_norm", self.shape.clone(), s)
    }

    pub(crate) fn rms_norm_backward(g: &Tensor, x: &Tensor, gamma: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
        let (_, d) = x.rows_cols();
        let (dx, dg) = match (&g.storage, &x.storage, &gamma.storage) {
            (Storage::F32(a), Storage::F32(b), Storage::F32(c)) => {
                let (p, q) = k::rms_norm_bwd(a, b, c, d, eps);
                (Storage::F32(p), Storage::F32(q))
            }
            (Storage::F64(a), Storage::F64(b), Storage::F64(c)) => {
                let (p, q) = k::rms_norm_bwd(a, b, c, d, eps);
                (Storage::F64(p), Storage::F64(q))
            }
            _ => return Err(Error::DType { op: "rms_norm_backward" }),
        };
        Ok((Tensor::raw(x.shape.clone(), dx), Tensor::raw(vec![d], dg)))
    }

    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (_, d) = self.rows_cols();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(shape_err("layer_norm", format!("{:?} with gamma {:?}", self.shape, gamma.shape)));
        }
        let s = map3!("layer_norm", self, gamma, beta, (x, g, b) => k::layer_norm_fwd(x, g, b, d, eps));
        Tensor::checked("layer_norm", self.shape.clone(), s)
    }

    pub(crate) fn layer_norm_backward(
        g: &Tensor,
        x: &Tensor,
        gamma: &Tensor,
        eps: f64,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (_, d) = x.rows_cols();
        let (dx, dg, db) = split3!("layer_norm_backward", g, x, gamma, (a, b, c) => k::layer_norm_bwd(a, b, c, d, eps));
        Ok((Tensor::raw(x.shape.clone(), dx), Tensor::raw(vec![d], dg), Tensor::raw(vec![d], db)))
    }

    /// `-log softmax(self)[target]` for a logit vector.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor> {
        self.expect_rank("cross_entropy", 1)?;
        let v = self.shape[0];
        if target >= v {
            return Err(Error::Index { op: "cross_entropy", index: target, len: v });
        }
        let s = map1!(self, x => vec![k::cross_entropy_fwd(x, target)]);
        Tensor::checked("cross_entropy", vec![], s)
    }

    pub(crate) fn cross_entropy_backward(g: &Tensor, logits: &Tensor, target: usize) -> Result<Tensor> {
        let s = map2!("cross_entropy_backward", g, logits, (a, l) => k::cross_entropy_bwd(a[0], l, target));
        Ok(Tensor::raw(logits.shape.clone(), s))
    }

    /// Depthwise convolution over rows of an already-extended input.
    pub fn depthwise_valid(&self, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.expect_rank("depthwise_conv", 2)?;
        w.expect_rank("depthwise_conv", 2)?;
        let (rows, d) = (self.shape[0], self.shape[1]);
        let kk = w.shape[0];
        if w.shape[1] != d || bias.shape != [d] {
            return Err(shape_err(
                "depthwise_conv",
                format!("input {:?}, kernel {:?}, bias {:?}", self.shape, w.shape, bias.shape),
            ));
        }
        if kk == 0 || rows + 1 < kk {
            return Err(shape_err("depthwise_conv", format!("{rows} rows for kernel {kk}")));
        }
        let t = rows + 1 - kk;
        let s = map3!("depthwise_conv", self, w, bias, (x, ww, b) => k::depthwise_fwd(x, ww, b, t, kk, d));
        Tensor::checked("depthwise_conv", vec![t, d], s)
    }

    pub(crate) fn depthwise_backward(g: &Tensor, xe: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (t, d) = (g.shape[0], g.shape[1]);
        let kk = w.shape[0];
        let (dx, dw, db) = split3!("depthwise_backward", g, xe, w, (a, b, c) => k::depthwise_bwd(a, b, c, t, kk, d));
        Ok((
            Tensor::raw(xe.shape.clone(), dx),
            Tensor::raw(w.shape.clone(), dw),
            Tensor::raw(vec![d], db),
        ))
    }

    pub fn conv2d(&self, w: &Tensor, b: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Tensor> {
        let geom = conv_geom(self, w, b, stride, pad)?;
        let s = map3!("conv2d", self, w, b, (x, ww, bb) => k::conv2d_fwd(x, ww, bb, &geom));
        Tensor::checked("conv2d", vec![geom.c_out, geom.out_h(), geom.out_w()], s)
    }

    pub(crate) fn conv2d_backward(
        g: &Tensor,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let geom = conv_geom(x, w, b, stride, pad)?;
        let (dx, dw, db) = split3!("conv2d_backward", g, x, w, (a, p, q) => k::conv2d_bwd(a, p, q, &geom));
        Ok((
            Tensor::raw(x.shape.clone(), dx),
            Tensor::raw(w.shape.clone(), dw),
            Tensor::raw(b.shape.clone(), db),
        ))
    }

    /// `[C, H, W] -> [H, C*W]` with `out[h, c*W + w] = x[c, h, w]`.
    pub fn channels_to_rows(&self) -> Result<Tensor> {
        self.expect_rank("channels_to_rows", 3)?;
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        fn go<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = Vec::with_capacity(x.len());
            for hh in 0..h {
                for cc in 0..c {
                    out.extend_from_slice(&x[(cc * h + hh) * w..(cc * h + hh + 1) * w]);
                }
            }
            out
        }
        Ok(Tensor::raw(vec![h, c * w], map1!(self, x => go(x, c, h, w))))
    }

    pub(crate) fn rows_to_channels(g: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
        fn go<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
            let mut out = vec![T::zero(); g.len()];
            for hh in 0..h {
                for cc in 0..c {
                    let src = &g[hh * c * w + cc * w..hh * c * w + (cc + 1) * w];
                    out[(cc * h + hh) * w..(cc * h + hh + 1) * w].copy_from_slice(src);
                }
            }
            out
        }
        Tensor::raw(vec![c, h, w], map1!(g, x => go(x, c, h, w)))
    }

    /// Stacks `[r_i, d]` (or `[d]`) tensors along rows.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, d) = first.rows_cols();
        let dtype = first.dtype();
        let mut rows = 0;
        for p in parts {
            let (r, pd) = p.rows_cols();
            if pd != d || p.shape.is_empty() {
                return Err(shape_err("concat_rows", format!("{:?} vs width {d}", p.shape)));
            }
            if p.dtype() != dtype {
                return Err(Error::DType { op: "concat_rows" });
            }
            rows += r;
        }
        let storage = match dtype {
            DType::F32 => Storage::F32(
                parts
                    .iter()
                    .flat_map(|p| match &p.storage {
                        Storage::F32(v) => v.iter().copied(),
                        _ => unreachable!(),
                    })
                    .collect(),
            ),
            DType::F64 => Storage::F64(
                parts
                    .iter()
                    .flat_map(|p| match &p.storage {
                        Storage::F64(v) => v.iter().copied(),
                        _ => unreachable!(),
                    })
                    .collect(),
            ),
        };
        Ok(Tensor::raw(vec![rows, d], storage))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        self.expect_rank("slice_rows", 2)?;
        let d = self.shape[1];
        if start + len > self.shape[0] {
            return Err(Error::Index { op: "slice_rows", index: start + len, len: self.shape[0] });
        }
        let s = map1!(self, x => x[start * d..(start + len) * d].to_vec());
        Ok(Tensor::raw(vec![len, d], s))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        self.expect_rank("slice_cols", 2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        if start + len > c {
            return Err(Error::Index { op: "slice_cols", index: start + len, len: c });
        }
        let s = map1!(self, x => x.chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect());
        Ok(Tensor::raw(vec![r, len], s))
    }

    /// Embeds `self[r, len]` into zeros of width `cols` at column `start`.
    pub(crate) fn pad_cols(&self, start: usize, cols: usize) -> Tensor {
        fn go<T: Scalar>(x: &[T], len: usize, start: usize, cols: usize) -> Vec<T> {
            let r = x.len() / len.max(1);
            let mut out = vec![T::zero(); r * cols];
            for (i, row) in x.chunks(len).enumerate() {
                out[i * cols + start..i * cols + start + len].copy_from_slice(row);
            }
            out
        }
        let len = self.shape[1];
        Tensor::raw(vec![self.shape[0], cols], map1!(self, x => go(x, len, start, cols)))
    }

    /// Embeds `self[len, d]` into zeros with `rows` rows at row `start`.
    pub(crate) fn pad_rows(&self, start: usize, rows: usize) -> Tensor {
        fn go<T: Scalar>(x: &[T], d: usize, start: usize, rows: usize) -> Vec<T> {
            let mut out = vec![T::zero(); rows * d];
            out[start * d..start * d + x.len()].copy_from_slice(x);
            out
        }
        let d = self.shape[1];
        Tensor::raw(vec![rows, d], map1!(self, x => go(x, d, start, rows)))
    }

    pub fn reverse_rows(&self) -> Result<Tensor> {
        self.expect_rank("reverse_rows", 2)?;
        let d = self.shape[1];
        let s = map1!(self, x => x.chunks(d).rev().flat_map(|r| r.iter().copied()).collect());
        Ok(Tensor::raw(self.shape.clone(), s))
    }

    /// `u[m] ⊗ v[n] -> [m, n]`.
    pub fn outer(&self, v: &Tensor) -> Result<Tensor> {
        self.expect_rank("outer", 1)?;
        v.expect_rank("outer", 1)?;
        let (m, n) = (self.shape[0], v.shape[0]);
        let s = map2!("outer", self, v, (a, b) =>
            a.iter().flat_map(|&p| b.iter().map(move |&q| p * q)).collect());
        Tensor::checked("outer", vec![m, n], s)
    }

    /// Scales row `i` of `self[m, n]` by `v[i]`.
    pub fn mul_rows(&self, v: &Tensor) -> Result<Tensor> {
        self.expect_rank("mul_rows", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        if v.shape != [m] {
            return Err(shape_err("mul_rows", format!("{:?} by {:?}", self.shape, v.shape)));
        }
        let s = map2!("mul_rows", self, v, (a, b) =>
            a.chunks(n).zip(b).flat_map(|(row, &s)| row.iter().map(move |&x| x * s)).collect());
        Tensor::checked("mul_rows", vec![m, n], s)
    }

    /// `self[m, n] · v[n] -> [m]`.
    pub fn matvec(&self, v: &Tensor) -> Result<Tensor> {
        self.expect_rank("matvec", 2)?;
        let (m, n) = (self.shape[0], self.shape[1]);
        if v.shape != [n] {
            return Err(shape_err("matvec", format!("{:?} by {:?}", self.shape, v.shape)));
        }
        fn go<T: Scalar>(a: &[T], b: &[T], n: usize) -> Vec<T> {
            a.chunks(n)
                .map(|row| row.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + p * q))
                .collect()
        }
        let s = map2!("matvec", self, v, (a, b) => go(a, b, n));
        Tensor::checked("matvec", vec![m], s)
    }

    /// Row-wise dot products of two `[m, n]` tensors -> `[m]`.
    pub(crate) fn row_dots(&self, other: &Tensor) -> Result<Tensor> {
        let n = self.shape[1];
        fn go<T: Scalar>(a: &[T], b: &[T], n: usize) -> Vec<T> {
            a.chunks(n)
                .zip(b.chunks(n))
                .map(|(p, q)| p.iter().zip(q).fold(T::zero(), |acc, (&x, &y)| acc + x * y))
                .collect()
        }
        let s = map2!("row_dots", self, other, (a, b) => go(a, b, n));
        Ok(Tensor::raw(vec![self.shape[0]], s))
    }

    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        self.expect_rank("gather_rows", 2)?;
        let (v, d) = (self.shape[0], self.shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index { op: "gather_rows", index: bad, len: v });
        }
        let s = map1!(self, x => ids.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect());
        Ok(Tensor::raw(vec![ids.len(), d], s))
    }

    pub(crate) fn scatter_rows(g: &Tensor, ids: &[usize], rows: usize) -> Tensor {
        fn go<T: Scalar>(g: &[T], ids: &[usize], rows: usize, d: usize) -> Vec<T> {
            let mut out = vec![T::zero(); rows * d];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..d {
                    out[i * d + c] = out[i * d + c] + g[r * d + c];
                }
            }
            out
        }
        let d = g.shape[1];
        Tensor::raw(vec![rows, d], map1!(g, x => go(x, ids, rows, d)))
    }

    /// Index of the maximum element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        let mut bv = f64::NEG_INFINITY;
        for i in 0..self.numel() {
            let v = self.get(i);
            if v > bv {
                bv = v;
                best = i;
            }
        }
        best
    }

    pub fn max_abs(&self) -> f64 {
        (0..self.numel()).map(|i| self.get(i).abs()).fold(0.0, f64::max)
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: (usize, usize), pad: (usize, usize)) -> Result<Conv2dGeom> {
    x.expect_rank("conv2d", 3)?;
    w.expect_rank("conv2d", 4)?;
    if w.shape[1] != x.shape[0] || b.shape != [w.shape[0]] || stride.0 == 0 || stride.1 == 0 {
        return Err(shape_err("conv2d", format!("input {:?}, kernel {:?}", x.shape, w.shape)));
    }
    let g = Conv2dGeom {
        c_in: x.shape[0],
        h: x.shape[1],
        w: x.shape[2],
        c_out: w.shape[0],
        kh: w.shape[2],
        kw: w.shape[3],
        sh: stride.0,
        sw: stride.1,
        ph: pad.0,
        pw: pad.1,
    };
    if g.h + 2 * g.ph < g.kh || g.w + 2 * g.pw < g.kw {
        return Err(shape_err("conv2d", "input smaller than kernel"));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_numel_agree() {
        let t = Tensor::zeros(&[3, 4], DType::F32);
        assert_eq!(t.numel(), 12);
        assert_eq!(t.nbytes(), 48);
        assert!(Tensor::from_f64(&[2, 2], vec![1.0; 3], DType::F64).is_err());
    }

    #[test]
    fn non_finite_results_are_errors() {
        let t = Tensor::from_f64(&[1], vec![1000.0], DType::F64).unwrap();
        assert!(matches!(t.exp(), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let a = Tensor::zeros(&[2], DType::F32);
        let b = Tensor::zeros(&[2], DType::F64);
        assert!(matches!(a.add(&b), Err(Error::DType { .. })));
    }

    #[test]
    fn le_bytes_round_trip() {
        let t = Tensor::from_f64(&[2, 3], vec![1.5, -2.0, 3.25, 0.0, 1e-30, 7.0], DType::F32).unwrap();
        let back = Tensor::from_le_bytes(&[2, 3], DType::F32, &t.to_le_bytes()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let t = Tensor::from_f64(&[4], vec![1.0, 3.0, 3.0, 0.0], DType::F64).unwrap();
        assert_eq!(t.argmax(), 1);
    }

    #[test]
    fn channels_to_rows_round_trip() {
        let x = Tensor::from_f64(&[2, 3, 2], (0..12).map(|v| v as f64).collect(), DType::F64).unwrap();
        let r = x.channels_to_rows().unwrap();
        assert_eq!(r.shape(), &[3, 4]);
        // row 1 = [x[0,1,:], x[1,1,:]] = [2,3,8,9]
        assert_eq!(r.slice_rows(1, 1).unwrap().to_f64_vec(), vec![2.0, 3.0, 8.0, 9.0]);
        assert_eq!(Tensor::rows_to_channels(&r, 2, 3, 2), x);
    }
}
