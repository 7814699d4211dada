//! Speech adapter: groups of `k` encoder frames are concatenated and mapped
//! into the language-model embedding space by a bias-free two-layer MLP.

use crate::error::{invalid, shape_err, Result};
use crate::impl_module;
use crate::init::{self, Rng};
use crate::numerics::{Backend, DType, Eager, Param, Tensor};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterWeights {
    pub k: usize,
    pub w1: Param,
    pub w2: Param,
}

impl_module!(AdapterWeights { w1, w2 });

/// Adapter output spliced into the prompt: `[T_s, d_lm]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechEmbeddings {
    pub s: Tensor,
}

impl SpeechEmbeddings {
    pub fn len(&self) -> usize {
        self.s.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl AdapterWeights {
    /// `d_hidden` defaults to `d_lm` when `None`.
    pub fn init(k: usize, d_model: usize, d_hidden: Option<usize>, d_lm: usize, dtype: DType, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(invalid("adapter k must be at least 1"));
        }
        let dh = d_hidden.unwrap_or(d_lm);
        Ok(AdapterWeights {
            k,
            w1: Param::new("adapter.w1.weight", init::linear(rng, k * d_model, dh, dtype)),
            w2: Param::new("adapter.w2.weight", init::linear(rng, dh, d_lm, dtype)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w1.value().shape()[0] / self.k
    }

    pub fn d_lm(&self) -> usize {
        self.w2.value().shape()[1]
    }

    /// Smallest encoder length producing one output row.
    pub fn min_frames(&self) -> usize {
        self.k
    }
}

/// Row `i` is frames `[i·k, i·k+k)` side by side; trailing `T_c mod k` frames are dropped.
pub fn downsample_concat_vars<B: Backend>(b: &mut B, h: &B::Var, k: usize) -> Result<B::Var> {
    let shape = b.value(h).shape().to_vec();
    if shape.len() != 2 {
        return Err(shape_err("downsample_concat", format!("expected [T, d], got {shape:?}")));
    }
    if k == 0 {
        return Err(invalid("downsample factor must be at least 1"));
    }
    let (t, d) = (shape[0], shape[1]);
    if t < k {
        return Err(invalid(format!("{t} encoder frames cannot fill one group of {k}")));
    }
    let ts = t / k;
    let kept = b.slice_rows(h, 0, ts * k)?;
    // row-major [ts*k, d] is byte-identical to [ts, k*d]
    b.reshape(&kept, &[ts, k * d])
}

pub fn downsample_concat(h: &Tensor, k: usize) -> Result<Tensor> {
    let mut b = Eager;
    let hv = b.constant(h.clone());
    Ok((*downsample_concat_vars(&mut b, &hv, k)?).clone())
}

pub fn adapter_vars<B: Backend>(b: &mut B, h: &B::Var, w: &AdapterWeights) -> Result<B::Var> {
    let d = b.value(h).shape().get(1).copied().unwrap_or(0);
    if d != w.d_model() {
        return Err(shape_err("adapter", format!("encoder width {d}, adapter expects {}", w.d_model())));
    }
    let g = downsample_concat_vars(b, h, w.k)?;
    let w1 = b.param(&w.w1);
    let w2 = b.param(&w.w2);
    let z = b.matmul(&g, &w1)?;
    let z = b.relu(&z)?;
    b.matmul(&z, &w2)
}

pub fn adapter_forward(h: &Tensor, w: &AdapterWeights) -> Result<SpeechEmbeddings> {
    let mut b = Eager;
    let hv = b.constant(h.clone());
    Ok(SpeechEmbeddings {
        s: (*adapter_vars(&mut b, &hv, w)?).clone(),
    })
}
