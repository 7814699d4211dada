//! Selective state-space recurrence over a fixed-size hidden state.
//!
//! Per step, with input `x_t[d_inner]`:
//!
//! ```text
//! delta = softplus(x_t · W_delta + b_delta)        [d_inner]
//! B     = x_t · W_B,  C = x_t · W_C                [d_state]
//! a_bar = exp(delta ⊙ A),  b_bar = delta ⊗ B       [d_inner, d_state]
//! h'    = a_bar ⊙ h + b_bar ⊙ x_t
//! y_t   = h' · C + D ⊙ x_t
//! ```
//!
//! `A = -exp(a_log)` is diagonal per channel and strictly negative, so every
//! entry of `a_bar` lies in `(0, 1)` whenever `delta > 0`.

use rand::RngExt;

use crate::error::{shape_err, Result};
use crate::impl_module;
use crate::init::{self, Rng};
use crate::numerics::{Backend, DType, Eager, Param, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams {
    pub a_log: Param,
    pub w_delta: Param,
    pub b_delta: Param,
    pub w_b: Param,
    pub w_c: Param,
    /// Direct feedthrough `D`; `None` gives the bare recurrence.
    pub d_skip: Option<Param>,
}

impl_module!(SsmParams { a_log, w_delta, b_delta, w_b, w_c, d_skip });

impl SsmParams {
    pub fn init(prefix: &str, d_inner: usize, d_state: usize, use_skip: bool, dtype: DType, rng: &mut Rng) -> Self {
        let a_log: Vec<f64> = (0..d_inner)
            .flat_map(|_| (1..=d_state).map(|n| (n as f64).ln()))
            .collect();
        // softplus^-1 of a log-uniform step in [1e-3, 1e-1]
        let b_delta: Vec<f64> = (0..d_inner)
            .map(|_| {
                let u: f64 = rng.random_range(0.0..1.0);
                let dt = (u * (0.1f64.ln() - 0.001f64.ln()) + 0.001f64.ln()).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        SsmParams {
            a_log: Param::new(format!("{prefix}.a_log"), Tensor::from_f64(&[d_inner, d_state], a_log, dtype).unwrap()),
            w_delta: Param::new(
                format!("{prefix}.delta_proj.weight"),
                init::linear(rng, d_inner, d_inner, dtype).scale(0.1).unwrap(),
            ),
            b_delta: Param::new(format!("{prefix}.delta_proj.bias"), Tensor::from_f64(&[d_inner], b_delta, dtype).unwrap()),
            w_b: Param::new(format!("{prefix}.b_proj.weight"), init::linear(rng, d_inner, d_state, dtype)),
            w_c: Param::new(format!("{prefix}.c_proj.weight"), init::linear(rng, d_inner, d_state, dtype)),
            d_skip: use_skip.then(|| Param::new(format!("{prefix}.d_skip"), init::full(&[d_inner], 1.0, dtype))),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.value().shape()[0]
    }

    pub fn d_state(&self) -> usize {
        self.a_log.value().shape()[1]
    }

    pub fn dtype(&self) -> DType {
        self.a_log.value().dtype()
    }

    /// Lifts the parameters onto a backend, computing `A = -exp(a_log)` once.
    pub fn lift<B: Backend>(&self, b: &mut B) -> Result<SsmVars<B::Var>> {
        let a_log = b.param(&self.a_log);
        let e = b.exp(&a_log)?;
        Ok(SsmVars {
            a: b.neg(&e)?,
            w_delta: b.param(&self.w_delta),
            b_delta: b.param(&self.b_delta),
            w_b: b.param(&self.w_b),
            w_c: b.param(&self.w_c),
            d_skip: self.d_skip.as_ref().map(|p| b.param(p)),
        })
    }
}

/// Backend handles for [`SsmParams`].
#[derive(Debug, Clone)]
pub struct SsmVars<V> {
    pub a: V,
    pub w_delta: V,
    pub b_delta: V,
    pub w_b: V,
    pub w_c: V,
    pub d_skip: Option<V>,
}

/// The recurrent state `h_t`. Its size is fixed by `(d_inner, d_state, dtype)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub h: Tensor,
}

impl SsmState {
    pub fn zeros(d_inner: usize, d_state: usize, dtype: DType) -> Self {
        SsmState {
            h: Tensor::zeros(&[d_inner, d_state], dtype),
        }
    }

    pub fn nbytes(&self) -> usize {
        self.h.nbytes()
    }
}

/// Left context of a causal convolution: the last `K-1` input frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvState {
    frames: Tensor,
}

impl ConvState {
    pub fn zeros(kernel: usize, channels: usize, dtype: DType) -> Self {
        ConvState {
            frames: Tensor::zeros(&[kernel.saturating_sub(1), channels], dtype),
        }
    }

    pub fn from_frames(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 {
            return Err(shape_err("conv_state", format!("expected [K-1, d], got {:?}", frames.shape())));
        }
        Ok(ConvState { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn capacity(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn nbytes(&self) -> usize {
        self.frames.nbytes()
    }
}

pub fn selective_projections_vars<B: Backend>(
    b: &mut B,
    p: &SsmVars<B::Var>,
    x_t: &B::Var,
) -> Result<(B::Var, B::Var, B::Var)> {
    let pre = b.linear(x_t, &p.w_delta)?;
    let pre = b.add(&pre, &p.b_delta)?;
    let delta = b.softplus(&pre)?;
    let bm = b.linear(x_t, &p.w_b)?;
    let cm = b.linear(x_t, &p.w_c)?;
    Ok((delta, bm, cm))
}

/// Zero-order hold for `A`, Euler step for `B`.
pub fn discretize_vars<B: Backend>(b: &mut B, a: &B::Var, bm: &B::Var, delta: &B::Var) -> Result<(B::Var, B::Var)> {
    let da = b.mul_rows(a, delta)?;
    let a_bar = b.exp(&da)?;
    let b_bar = b.outer(delta, bm)?;
    Ok((a_bar, b_bar))
}

/// `h' = a_bar ⊙ h + b_bar ⊙ x`, `y = h' · C (+ D ⊙ x)`.
pub fn recurrence_vars<B: Backend>(
    b: &mut B,
    h: &B::Var,
    a_bar: &B::Var,
    b_bar: &B::Var,
    x_t: &B::Var,
    c: &B::Var,
    d_skip: Option<&B::Var>,
) -> Result<(B::Var, B::Var)> {
    let decay = b.mul(a_bar, h)?;
    let drive = b.mul_rows(b_bar, x_t)?;
    let h_next = b.add(&decay, &drive)?;
    let mut y = b.matvec(&h_next, c)?;
    if let Some(d) = d_skip {
        let skip = b.mul(d, x_t)?;
        y = b.add(&y, &skip)?;
    }
    Ok((h_next, y))
}

pub fn ssm_step_vars<B: Backend>(b: &mut B, p: &SsmVars<B::Var>, h: &B::Var, x_t: &B::Var) -> Result<(B::Var, B::Var)> {
    let (delta, bm, cm) = selective_projections_vars(b, p, x_t)?;
    let (a_bar, b_bar) = discretize_vars(b, &p.a, &bm, &delta)?;
    recurrence_vars(b, h, &a_bar, &b_bar, x_t, &cm, p.d_skip.as_ref())
}

/// Folds [`ssm_step_vars`] over the rows of `xs[T, d_inner]`.
pub fn selective_scan_vars<B: Backend>(
    b: &mut B,
    p: &SsmVars<B::Var>,
    xs: &B::Var,
    h0: &B::Var,
) -> Result<(B::Var, B::Var)> {
    let shape = b.value(xs).shape().to_vec();
    let hs = b.value(h0).shape().to_vec();
    if shape.len() != 2 || shape[0] == 0 || hs[0] != shape[1] || b.value(&p.a).shape() != hs.as_slice() {
        return Err(shape_err(
            "selective_scan",
            format!("inputs {shape:?}, state {hs:?}, A {:?}", b.value(&p.a).shape()),
        ));
    }
    let mut h = h0.clone();
    let mut ys = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let x_t = b.row(xs, t)?;
        let (hn, y) = ssm_step_vars(b, p, &h, &x_t)?;
        h = hn;
        ys.push(y);
    }
    let y = b.concat_rows(&ys)?;
    Ok((y, h))
}

fn check_state(p: &SsmParams, state: &SsmState) -> Result<()> {
    if state.h.shape() != [p.d_inner(), p.d_state()] {
        return Err(shape_err(
            "ssm",
            format!("state {:?} vs params [{}, {}]", state.h.shape(), p.d_inner(), p.d_state()),
        ));
    }
    Ok(())
}

/// Returns `(delta, B, C)` for one input vector.
pub fn selective_projections(x_t: &Tensor, p: &SsmParams) -> Result<(Tensor, Tensor, Tensor)> {
    let mut b = Eager;
    let vars = p.lift(&mut b)?;
    let x = b.constant(x_t.clone());
    let (d, bm, cm) = selective_projections_vars(&mut b, &vars, &x)?;
    Ok(((*d).clone(), (*bm).clone(), (*cm).clone()))
}

/// Returns `(a_bar, b_bar)` from `a_log`, `B` and `delta`.
pub fn discretize(a_log: &Tensor, bm: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut b = Eager;
    let al = b.constant(a_log.clone());
    let e = b.exp(&al)?;
    let a = b.neg(&e)?;
    let (bv, dv) = (b.constant(bm.clone()), b.constant(delta.clone()));
    let (ab, bb) = discretize_vars(&mut b, &a, &bv, &dv)?;
    Ok(((*ab).clone(), (*bb).clone()))
}

/// One recurrence step; the input state is left untouched.
pub fn ssm_step(state: &SsmState, x_t: &Tensor, p: &SsmParams) -> Result<(SsmState, Tensor)> {
    check_state(p, state)?;
    if x_t.shape() != [p.d_inner()] {
        return Err(shape_err("ssm_step", format!("input {:?}, d_inner {}", x_t.shape(), p.d_inner())));
    }
    let mut b = Eager;
    let vars = p.lift(&mut b)?;
    let h = b.constant(state.h.clone());
    let x = b.constant(x_t.clone());
    let (h, y) = ssm_step_vars(&mut b, &vars, &h, &x)?;
    Ok((SsmState { h: (*h).clone() }, (*y).clone()))
}

pub fn selective_scan(xs: &Tensor, p: &SsmParams, state: &SsmState) -> Result<(Tensor, SsmState)> {
    check_state(p, state)?;
    let mut b = Eager;
    let vars = p.lift(&mut b)?;
    let h = b.constant(state.h.clone());
    let x = b.constant(xs.clone());
    let (y, h) = selective_scan_vars(&mut b, &vars, &x, &h)?;
    Ok(((*y).clone(), SsmState { h: (*h).clone() }))
}
