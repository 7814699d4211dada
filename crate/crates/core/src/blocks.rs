//! Composite layers: the causal Mamba block used by the language model, the
//! bidirectional Mamba mixer, the ConMamba encoder block, the convolutional
//! frontend, and the encoder stack built from them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::impl_module;
use crate::init::{self, Rng};
use crate::numerics::{causal_conv, Backend, DType, Eager, Param, Tensor};
use crate::ssm::{selective_scan_vars, ConvState, SsmParams, SsmState, SsmVars};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub use_skip: bool,
}

impl MambaConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        MambaConfig {
            d_model,
            d_state,
            expand: 2,
            conv_kernel: 4,
            use_skip: true,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }
}

/// The gated SSM path: input projection, causal conv, scan, gate, output
/// projection. No normalization and no residual.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaMixer {
    pub in_proj: Param,
    pub conv_w: Param,
    pub conv_b: Param,
    pub ssm: SsmParams,
    pub out_proj: Param,
}

impl_module!(MambaMixer { in_proj, conv_w, conv_b, ssm, out_proj });

#[derive(Debug, Clone)]
pub struct MixerVars<V> {
    pub in_proj: V,
    pub conv_w: V,
    pub conv_b: V,
    pub ssm: SsmVars<V>,
    pub out_proj: V,
}

impl MambaMixer {
    pub fn init(prefix: &str, cfg: &MambaConfig, dtype: DType, rng: &mut Rng) -> Self {
        let di = cfg.d_inner();
        let k = cfg.conv_kernel;
        MambaMixer {
            in_proj: Param::new(format!("{prefix}.in_proj.weight"), init::linear(rng, cfg.d_model, 2 * di, dtype)),
            conv_w: Param::new(format!("{prefix}.conv1d.weight"), init::uniform(rng, &[k, di], 1.0 / (k as f64).sqrt(), dtype)),
            conv_b: Param::new(format!("{prefix}.conv1d.bias"), Tensor::zeros(&[di], dtype)),
            ssm: SsmParams::init(&format!("{prefix}.ssm"), di, cfg.d_state, cfg.use_skip, dtype, rng),
            out_proj: Param::new(format!("{prefix}.out_proj.weight"), init::linear(rng, di, cfg.d_model, dtype)),
        }
    }

    pub fn d_model(&self) -> usize {
        self.in_proj.value().shape()[0]
    }

    pub fn d_inner(&self) -> usize {
        self.ssm.d_inner()
    }

    pub fn kernel(&self) -> usize {
        self.conv_w.value().shape()[0]
    }

    pub fn lift<B: Backend>(&self, b: &mut B) -> Result<MixerVars<B::Var>> {
        Ok(MixerVars {
            in_proj: b.param(&self.in_proj),
            conv_w: b.param(&self.conv_w),
            conv_b: b.param(&self.conv_b),
            ssm: self.ssm.lift(b)?,
            out_proj: b.param(&self.out_proj),
        })
    }

    pub fn zero_state(&self) -> LayerState {
        let dtype = self.in_proj.value().dtype();
        LayerState {
            conv: ConvState::zeros(self.kernel(), self.d_inner(), dtype),
            ssm: SsmState::zeros(self.d_inner(), self.ssm.d_state(), dtype),
        }
    }
}

/// Streaming state of one Mamba layer: conv left context plus SSM state.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub conv: ConvState,
    pub ssm: SsmState,
}

impl LayerState {
    pub fn nbytes(&self) -> usize {
        self.conv.nbytes() + self.ssm.nbytes()
    }
}

/// Runs the mixer over `x[T, d_model]` from the given conv context and SSM
/// state; returns `(y, conv_ctx', h')`.
pub fn mixer_vars<B: Backend>(
    b: &mut B,
    w: &MixerVars<B::Var>,
    x: &B::Var,
    conv_ctx: &B::Var,
    h0: &B::Var,
) -> Result<(B::Var, B::Var, B::Var)> {
    let di = b.value(&w.conv_w).shape()[1];
    let proj = b.matmul(x, &w.in_proj)?;
    let xs = b.slice_cols(&proj, 0, di)?;
    let z = b.slice_cols(&proj, di, di)?;
    let (c, ctx) = causal_conv(b, &xs, &w.conv_w, &w.conv_b, conv_ctx)?;
    let u = b.silu(&c)?;
    let (ys, h) = selective_scan_vars(b, &w.ssm, &u, h0)?;
    let gate = b.silu(&z)?;
    let g = b.mul(&ys, &gate)?;
    let y = b.matmul(&g, &w.out_proj)?;
    Ok((y, ctx, h))
}

/// Pre-norm residual Mamba block (language-model side).
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockWeights {
    pub norm: Param,
    pub mixer: MambaMixer,
}

impl_module!(MambaBlockWeights { norm, mixer });

#[derive(Debug, Clone)]
pub struct BlockVars<V> {
    pub norm: V,
    pub mixer: MixerVars<V>,
}

impl MambaBlockWeights {
    pub fn init(prefix: &str, cfg: &MambaConfig, dtype: DType, rng: &mut Rng) -> Self {
        MambaBlockWeights {
            norm: Param::new(format!("{prefix}.norm.weight"), init::full(&[cfg.d_model], 1.0, dtype)),
            mixer: MambaMixer::init(prefix, cfg, dtype, rng),
        }
    }

    pub fn lift<B: Backend>(&self, b: &mut B) -> Result<BlockVars<B::Var>> {
        Ok(BlockVars {
            norm: b.param(&self.norm),
            mixer: self.mixer.lift(b)?,
        })
    }

    pub fn zero_state(&self) -> LayerState {
        self.mixer.zero_state()
    }
}

/// `x + mixer(rms_norm(x))`, threading the layer state.
pub fn mamba_block_vars<B: Backend>(
    b: &mut B,
    w: &BlockVars<B::Var>,
    x: &B::Var,
    conv_ctx: &B::Var,
    h0: &B::Var,
) -> Result<(B::Var, B::Var, B::Var)> {
    let n = b.rms_norm(x, &w.norm, NORM_EPS)?;
    let (y, ctx, h) = mixer_vars(b, &w.mixer, &n, conv_ctx, h0)?;
    let out = b.add(x, &y)?;
    Ok((out, ctx, h))
}

pub fn mamba_block_forward(x_seq: &Tensor, w: &MambaBlockWeights, state: &LayerState) -> Result<(Tensor, LayerState)> {
    let expect = w.zero_state();
    if state.conv.frames().shape() != expect.conv.frames().shape() || state.ssm.h.shape() != expect.ssm.h.shape() {
        return Err(shape_err("mamba_block", "layer state does not match block weights"));
    }
    if x_seq.shape().len() != 2 || x_seq.shape()[1] != w.mixer.d_model() {
        return Err(shape_err("mamba_block", format!("input {:?}, d_model {}", x_seq.shape(), w.mixer.d_model())));
    }
    let mut b = Eager;
    let vars = w.lift(&mut b)?;
    let x = b.constant(x_seq.clone());
    let ctx = b.constant(state.conv.frames().clone());
    let h = b.constant(state.ssm.h.clone());
    let (y, ctx, h) = mamba_block_vars(&mut b, &vars, &x, &ctx, &h)?;
    Ok((
        (*y).clone(),
        LayerState {
            conv: ConvState::from_frames((*ctx).clone())?,
            ssm: SsmState { h: (*h).clone() },
        },
    ))
}

/// Mixer pass over a complete segment from zero state.
fn mixer_from_zero<B: Backend>(b: &mut B, w: &MixerVars<B::Var>, x: &B::Var) -> Result<B::Var> {
    let dtype = b.value(x).dtype();
    let k = b.value(&w.conv_w).shape()[0];
    let di = b.value(&w.conv_w).shape()[1];
    let ds = b.value(&w.ssm.a).shape()[1];
    let ctx = b.constant(Tensor::zeros(&[k - 1, di], dtype));
    let h = b.constant(Tensor::zeros(&[di, ds], dtype));
    Ok(mixer_vars(b, w, x, &ctx, &h)?.0)
}

/// `(fwd(x) + reverse(bwd(reverse(x)))) / 2`.
pub fn bidirectional_vars<B: Backend>(
    b: &mut B,
    fwd: &MixerVars<B::Var>,
    bwd: &MixerVars<B::Var>,
    x: &B::Var,
) -> Result<B::Var> {
    let yf = mixer_from_zero(b, fwd, x)?;
    let xr = b.reverse_rows(x)?;
    let yb = mixer_from_zero(b, bwd, &xr)?;
    let yb = b.reverse_rows(&yb)?;
    let s = b.add(&yf, &yb)?;
    b.scale(&s, 0.5)
}

pub fn bidirectional_mamba_forward(x_seq: &Tensor, w_fwd: &MambaMixer, w_bwd: &MambaMixer) -> Result<Tensor> {
    let mut b = Eager;
    let f = w_fwd.lift(&mut b)?;
    let r = w_bwd.lift(&mut b)?;
    let x = b.constant(x_seq.clone());
    Ok((*bidirectional_vars(&mut b, &f, &r, &x)?).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Param,
    pub beta: Param,
}

impl_module!(LayerNormWeights { gamma, beta });

impl LayerNormWeights {
    pub fn init(prefix: &str, d: usize, dtype: DType) -> Self {
        LayerNormWeights {
            gamma: Param::new(format!("{prefix}.weight"), init::full(&[d], 1.0, dtype)),
            beta: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[d], dtype)),
        }
    }

    fn apply<B: Backend>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let g = b.param(&self.gamma);
        let bb = b.param(&self.beta);
        b.layer_norm(x, &g, &bb, NORM_EPS)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub weight: Param,
    pub bias: Param,
}

impl_module!(LinearWeights { weight, bias });

impl LinearWeights {
    pub fn init(prefix: &str, din: usize, dout: usize, dtype: DType, rng: &mut Rng) -> Self {
        LinearWeights {
            weight: Param::new(format!("{prefix}.weight"), init::linear(rng, din, dout, dtype)),
            bias: Param::new(format!("{prefix}.bias"), Tensor::zeros(&[dout], dtype)),
        }
    }

    fn apply<B: Backend>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let w = b.param(&self.weight);
        let bias = b.param(&self.bias);
        let y = b.matmul(x, &w)?;
        b.add_bias(&y, &bias)
    }
}

/// Pre-norm position-wise feedforward: LN, linear, SiLU, linear.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub norm: LayerNormWeights,
    pub up: LinearWeights,
    pub down: LinearWeights,
}

impl_module!(FeedForward { norm, up, down });

impl FeedForward {
    pub fn init(prefix: &str, d: usize, hidden: usize, dtype: DType, rng: &mut Rng) -> Self {
        FeedForward {
            norm: LayerNormWeights::init(&format!("{prefix}.norm"), d, dtype),
            up: LinearWeights::init(&format!("{prefix}.up"), d, hidden, dtype, rng),
            down: LinearWeights::init(&format!("{prefix}.down"), hidden, d, dtype, rng),
        }
    }

    pub fn apply<B: Backend>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let n = self.norm.apply(b, x)?;
        let h = self.up.apply(b, &n)?;
        let h = b.silu(&h)?;
        self.down.apply(b, &h)
    }
}

/// Pre-norm convolution module: LN, pointwise to `2d`, GLU, depthwise
/// (non-causal, zero padded), SiLU, pointwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvModule {
    pub norm: LayerNormWeights,
    pub pw_in: LinearWeights,
    pub dw_w: Param,
    pub dw_b: Param,
    pub pw_out: LinearWeights,
}

impl_module!(ConvModule { norm, pw_in, dw_w, dw_b, pw_out });

impl ConvModule {
    pub fn init(prefix: &str, d: usize, kernel: usize, dtype: DType, rng: &mut Rng) -> Self {
        ConvModule {
            norm: LayerNormWeights::init(&format!("{prefix}.norm"), d, dtype),
            pw_in: LinearWeights::init(&format!("{prefix}.pointwise_in"), d, 2 * d, dtype, rng),
            dw_w: Param::new(
                format!("{prefix}.depthwise.weight"),
                init::uniform(rng, &[kernel, d], 1.0 / (kernel as f64).sqrt(), dtype),
            ),
            dw_b: Param::new(format!("{prefix}.depthwise.bias"), Tensor::zeros(&[d], dtype)),
            pw_out: LinearWeights::init(&format!("{prefix}.pointwise_out"), d, d, dtype, rng),
        }
    }

    pub fn apply<B: Backend>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let d = b.value(x).shape()[1];
        let t = b.value(x).shape()[0];
        let dtype = b.value(x).dtype();
        let n = self.norm.apply(b, x)?;
        let p = self.pw_in.apply(b, &n)?;
        let a = b.slice_cols(&p, 0, d)?;
        let g = b.slice_cols(&p, d, d)?;
        let g = b.unary(crate::numerics::Unary::Sigmoid, &g)?;
        let glu = b.mul(&a, &g)?;
        let k = self.dw_w.value().shape()[0];
        let left = (k - 1) / 2;
        let right = k - 1 - left;
        let mut parts = Vec::new();
        if left > 0 {
            parts.push(b.constant(Tensor::zeros(&[left, d], dtype)));
        }
        parts.push(glu);
        if right > 0 {
            parts.push(b.constant(Tensor::zeros(&[right, d], dtype)));
        }
        let xe = b.concat_rows(&parts)?;
        let w = b.param(&self.dw_w);
        let bias = b.param(&self.dw_b);
        let c = b.depthwise_valid(&xe, &w, &bias)?;
        debug_assert_eq!(b.value(&c).shape()[0], t);
        let c = b.silu(&c)?;
        self.pw_out.apply(b, &c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConMambaBlockWeights {
    pub ffn1: FeedForward,
    pub mamba_norm: LayerNormWeights,
    pub fwd: MambaMixer,
    pub bwd: MambaMixer,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub final_norm: LayerNormWeights,
}

impl_module!(ConMambaBlockWeights { ffn1, mamba_norm, fwd, bwd, conv, ffn2, final_norm });

impl ConMambaBlockWeights {
    pub fn init(prefix: &str, cfg: &EncoderConfig, dtype: DType, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let mcfg = cfg.mamba();
        ConMambaBlockWeights {
            ffn1: FeedForward::init(&format!("{prefix}.ffn1"), d, cfg.ffn_mult * d, dtype, rng),
            mamba_norm: LayerNormWeights::init(&format!("{prefix}.mamba_norm"), d, dtype),
            fwd: MambaMixer::init(&format!("{prefix}.bimamba.fwd"), &mcfg, dtype, rng),
            bwd: MambaMixer::init(&format!("{prefix}.bimamba.bwd"), &mcfg, dtype, rng),
            conv: ConvModule::init(&format!("{prefix}.conv"), d, cfg.conv_kernel, dtype, rng),
            ffn2: FeedForward::init(&format!("{prefix}.ffn2"), d, cfg.ffn_mult * d, dtype, rng),
            final_norm: LayerNormWeights::init(&format!("{prefix}.final_norm"), d, dtype),
        }
    }
}

/// Macaron ordering: ½FFN, bidirectional Mamba, conv module, ½FFN, norm.
pub fn conmamba_block_vars<B: Backend>(b: &mut B, w: &ConMambaBlockWeights, x: &B::Var) -> Result<B::Var> {
    let f1 = w.ffn1.apply(b, x)?;
    let f1 = b.scale(&f1, 0.5)?;
    let x1 = b.add(x, &f1)?;

    let n = w.mamba_norm.apply(b, &x1)?;
    let fv = w.fwd.lift(b)?;
    let bv = w.bwd.lift(b)?;
    let m = bidirectional_vars(b, &fv, &bv, &n)?;
    let x2 = b.add(&x1, &m)?;

    let c = w.conv.apply(b, &x2)?;
    let x3 = b.add(&x2, &c)?;

    let f2 = w.ffn2.apply(b, &x3)?;
    let f2 = b.scale(&f2, 0.5)?;
    let x4 = b.add(&x3, &f2)?;
    w.final_norm.apply(b, &x4)
}

pub fn conmamba_block_forward(x_seq: &Tensor, w: &ConMambaBlockWeights) -> Result<Tensor> {
    let mut b = Eager;
    let x = b.constant(x_seq.clone());
    Ok((*conmamba_block_vars(&mut b, w, &x)?).clone())
}

pub const FRONTEND_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_state: usize,
    /// Feature bins per input frame.
    pub d_feat: usize,
    pub frontend_channels: usize,
    /// Stride of each frontend conv stage (applied to time and frequency).
    pub frontend_strides: Vec<usize>,
    pub ffn_mult: usize,
    /// Depthwise kernel inside the conv module.
    pub conv_kernel: usize,
    pub mamba_expand: usize,
    pub mamba_conv_kernel: usize,
}

impl EncoderConfig {
    /// 12 ConMamba layers, width 512, state size 16.
    pub fn full() -> Self {
        EncoderConfig {
            n_layers: 12,
            d_model: 512,
            d_state: 16,
            d_feat: 80,
            frontend_channels: 64,
            frontend_strides: vec![2, 2],
            ffn_mult: 4,
            conv_kernel: 31,
            mamba_expand: 2,
            mamba_conv_kernel: 4,
        }
    }

    pub fn tiny() -> Self {
        EncoderConfig {
            n_layers: 1,
            d_model: 8,
            d_state: 4,
            d_feat: 8,
            frontend_channels: 2,
            frontend_strides: vec![2, 2],
            ffn_mult: 2,
            conv_kernel: 5,
            mamba_expand: 2,
            mamba_conv_kernel: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.d_state,
            self.d_feat,
            self.frontend_channels,
            self.ffn_mult,
            self.conv_kernel,
            self.mamba_expand,
            self.mamba_conv_kernel,
        ];
        if dims.contains(&0) || self.frontend_strides.contains(&0) {
            return Err(invalid("encoder config extents must be positive"));
        }
        Ok(())
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            expand: self.mamba_expand,
            conv_kernel: self.mamba_conv_kernel,
            use_skip: true,
        }
    }

    /// Total time-downsampling factor of the frontend.
    pub fn downsample(&self) -> usize {
        self.frontend_strides.iter().product()
    }

    /// Receptive field of the frontend conv stack, in input frames.
    pub fn min_frames(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for &s in &self.frontend_strides {
            rf += (FRONTEND_KERNEL - 1) * jump;
            jump *= s;
        }
        rf
    }

    /// Output frames for `t_f` input frames: repeated ceiling division.
    pub fn output_frames(&self, t_f: usize) -> usize {
        self.frontend_strides.iter().fold(t_f, |t, &s| t.div_ceil(s))
    }

    fn freq_bins_out(&self) -> usize {
        self.frontend_strides.iter().fold(self.d_feat, |f, &s| f.div_ceil(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub convs: Vec<(Param, Param)>,
    pub proj: LinearWeights,
}

impl crate::module::Module for Frontend {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        for (w, b) in &self.convs {
            f(w);
            f(b);
        }
        self.proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for (w, b) in &mut self.convs {
            f(w);
            f(b);
        }
        self.proj.visit_mut(f);
    }
}

impl Frontend {
    pub fn init(prefix: &str, cfg: &EncoderConfig, dtype: DType, rng: &mut Rng) -> Self {
        let c = cfg.frontend_channels;
        let k = FRONTEND_KERNEL;
        let convs = cfg
            .frontend_strides
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let cin = if i == 0 { 1 } else { c };
                let bound = 1.0 / ((cin * k * k) as f64).sqrt();
                (
                    Param::new(format!("{prefix}.conv{i}.weight"), init::uniform(rng, &[c, cin, k, k], bound, dtype)),
                    Param::new(format!("{prefix}.conv{i}.bias"), Tensor::zeros(&[c], dtype)),
                )
            })
            .collect();
        let flat = if cfg.frontend_strides.is_empty() { cfg.d_feat } else { c * cfg.freq_bins_out() };
        Frontend {
            convs,
            proj: LinearWeights::init(&format!("{prefix}.proj"), flat, cfg.d_model, dtype, rng),
        }
    }
}

pub fn cnn_frontend_vars<B: Backend>(b: &mut B, cfg: &EncoderConfig, w: &Frontend, features: &B::Var) -> Result<B::Var> {
    let shape = b.value(features).shape().to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_feat {
        return Err(shape_err("cnn_frontend", format!("features {shape:?}, d_feat {}", cfg.d_feat)));
    }
    if shape[0] < cfg.min_frames() {
        return Err(invalid(format!(
            "feature segment of {} frames is shorter than the frontend receptive field ({})",
            shape[0],
            cfg.min_frames()
        )));
    }
    let mut x = if w.convs.is_empty() {
        features.clone()
    } else {
        let mut img = b.reshape(features, &[1, shape[0], shape[1]])?;
        for ((cw, cb), &s) in w.convs.iter().zip(&cfg.frontend_strides) {
            let wv = b.param(cw);
            let bv = b.param(cb);
            let pad = FRONTEND_KERNEL / 2;
            let y = b.conv2d(&img, &wv, &bv, (s, s), (pad, pad))?;
            img = b.relu(&y)?;
        }
        b.channels_to_rows(&img)?
    };
    x = w.proj.apply(b, &x)?;
    Ok(x)
}

pub fn cnn_frontend(features: &Tensor, cfg: &EncoderConfig, w: &Frontend) -> Result<Tensor> {
    let mut b = Eager;
    let f = b.constant(features.clone());
    Ok((*cnn_frontend_vars(&mut b, cfg, w, &f)?).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub frontend: Frontend,
    pub layers: Vec<ConMambaBlockWeights>,
}

impl_module!(EncoderWeights { frontend, layers });

impl EncoderWeights {
    pub fn init(cfg: &EncoderConfig, dtype: DType, rng: &mut Rng) -> Self {
        EncoderWeights {
            frontend: Frontend::init("encoder.frontend", cfg, dtype, rng),
            layers: (0..cfg.n_layers)
                .map(|i| ConMambaBlockWeights::init(&format!("encoder.layers.{i}"), cfg, dtype, rng))
                .collect(),
        }
    }
}

pub fn encoder_vars<B: Backend>(b: &mut B, cfg: &EncoderConfig, w: &EncoderWeights, features: &B::Var) -> Result<B::Var> {
    let mut h = cnn_frontend_vars(b, cfg, &w.frontend, features)?;
    for layer in &w.layers {
        h = conmamba_block_vars(b, layer, &h)?;
    }
    Ok(h)
}

/// Encodes one complete feature segment from zero state.
pub fn encoder_forward(features: &Tensor, cfg: &EncoderConfig, w: &EncoderWeights) -> Result<Tensor> {
    let mut b = Eager;
    let f = b.constant(features.clone());
    Ok((*encoder_vars(&mut b, cfg, w, &f)?).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded;
    use crate::module::Module;
    use crate::numerics::{grad_check, Tape};
    use proptest::prelude::*;

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor {
        init::uniform(&mut seeded(seed), shape, 1.0, DType::F64)
    }

    fn block(seed: u64, d_model: usize, d_state: usize) -> MambaBlockWeights {
        let mut rng = seeded(seed);
        let mut w = MambaBlockWeights::init("blk", &MambaConfig::new(d_model, d_state), DType::F64, &mut rng);
        w.mixer.conv_b.set(init::uniform(&mut rng, &[2 * d_model], 0.5, DType::F64));
        w.norm.set(init::uniform(&mut rng, &[d_model], 1.0, DType::F64));
        w
    }

    fn silu(v: f64) -> f64 {
        v / (1.0 + (-v).exp())
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let d = t.shape()[1];
        t.to_f64_vec().chunks(d).map(|r| r.to_vec()).collect()
    }

    /// Straight-line Mamba block from zero state.
    fn oracle_block(w: &MambaBlockWeights, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = &w.mixer;
        let dm = m.d_model();
        let di = m.d_inner();
        let ds = m.ssm.d_state();
        let k = m.kernel();
        let g = w.norm.value().to_f64_vec();
        let inp = m.in_proj.value().to_f64_vec();
        let cw = m.conv_w.value().to_f64_vec();
        let cb = m.conv_b.value().to_f64_vec();
        let outp = m.out_proj.value().to_f64_vec();
        let al = m.ssm.a_log.value().to_f64_vec();
        let wd = m.ssm.w_delta.value().to_f64_vec();
        let bd = m.ssm.b_delta.value().to_f64_vec();
        let wb = m.ssm.w_b.value().to_f64_vec();
        let wc = m.ssm.w_c.value().to_f64_vec();
        let dsk = m.ssm.d_skip.as_ref().unwrap().value().to_f64_vec();

        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for row in x {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / dm as f64;
            let r = 1.0 / (ms + NORM_EPS).sqrt();
            let n: Vec<f64> = (0..dm).map(|i| row[i] * r * g[i]).collect();
            let p: Vec<f64> = (0..2 * di).map(|j| (0..dm).map(|i| n[i] * inp[i * 2 * di + j]).sum()).collect();
            xs.push(p[..di].to_vec());
            zs.push(p[di..].to_vec());
        }
        let mut ext = vec![vec![0.0; di]; k - 1];
        ext.extend(xs.iter().cloned());
        let mut h = vec![0.0; di * ds];
        let mut out = Vec::new();
        for t in 0..x.len() {
            let u: Vec<f64> = (0..di)
                .map(|c| silu((0..k).map(|i| cw[i * di + c] * ext[t + i][c]).sum::<f64>() + cb[c]))
                .collect();
            let delta: Vec<f64> = (0..di)
                .map(|i| {
                    let z: f64 = (0..di).map(|q| u[q] * wd[q * di + i]).sum::<f64>() + bd[i];
                    z.exp().ln_1p()
                })
                .collect();
            let bv: Vec<f64> = (0..ds).map(|j| (0..di).map(|q| u[q] * wb[q * ds + j]).sum()).collect();
            let cv: Vec<f64> = (0..ds).map(|j| (0..di).map(|q| u[q] * wc[q * ds + j]).sum()).collect();
            let mut gated = vec![0.0; di];
            for i in 0..di {
                let mut y = 0.0;
                for j in 0..ds {
                    let a = -al[i * ds + j].exp();
                    h[i * ds + j] = (delta[i] * a).exp() * h[i * ds + j] + delta[i] * bv[j] * u[i];
                    y += cv[j] * h[i * ds + j];
                }
                y += dsk[i] * u[i];
                gated[i] = y * silu(zs[t][i]);
            }
            out.push((0..dm).map(|o| x[t][o] + (0..di).map(|i| gated[i] * outp[i * dm + o]).sum::<f64>()).collect());
        }
        out
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let mut w = block(1, 6, 4);
        w.mixer.out_proj.set(Tensor::zeros(&[12, 6], DType::F64));
        let x = rand_t(2, &[5, 6]);
        let (y, _) = mamba_block_forward(&x, &w, &w.zero_state()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn block_matches_oracle() {
        let w = block(3, 8, 4);
        let x = rand_t(4, &[7, 8]);
        let (y, _) = mamba_block_forward(&x, &w, &w.zero_state()).unwrap();
        let want = oracle_block(&w, &rows(&x));
        for (a, b) in rows(&y).iter().flatten().zip(want.iter().flatten()) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn two_single_steps_equal_one_pair() {
        let w = block(5, 6, 3);
        let x = rand_t(6, &[2, 6]);
        let s0 = w.zero_state();
        let (y, s2) = mamba_block_forward(&x, &w, &s0).unwrap();
        let (y0, s1) = mamba_block_forward(&x.slice_rows(0, 1).unwrap(), &w, &s0).unwrap();
        let (y1, s1b) = mamba_block_forward(&x.slice_rows(1, 1).unwrap(), &w, &s1).unwrap();
        assert_eq!(Tensor::concat_rows(&[&y0, &y1]).unwrap(), y);
        assert_eq!(s1b, s2);
    }

    #[test]
    fn state_mismatch_is_error() {
        let w = block(7, 6, 3);
        let other = block(7, 6, 4).zero_state();
        assert!(mamba_block_forward(&rand_t(1, &[2, 6]), &w, &other).is_err());
        assert!(mamba_block_forward(&rand_t(1, &[2, 5]), &w, &w.zero_state()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn chunked_block_is_bit_exact(seed in 0u64..1000, t in 2usize..12, cut in 1usize..11) {
            let cut = cut.min(t - 1);
            let w = block(seed, 4, 3);
            let x = rand_t(seed + 1, &[t, 4]);
            let (y, s) = mamba_block_forward(&x, &w, &w.zero_state()).unwrap();
            let (ya, sa) = mamba_block_forward(&x.slice_rows(0, cut).unwrap(), &w, &w.zero_state()).unwrap();
            let (yb, sb) = mamba_block_forward(&x.slice_rows(cut, t - cut).unwrap(), &w, &sa).unwrap();
            prop_assert_eq!(Tensor::concat_rows(&[&ya, &yb]).unwrap(), y);
            prop_assert_eq!(sb, s);
        }

        #[test]
        fn bidirectional_reversal_property(seed in 0u64..1000, t in 1usize..10) {
            let mut rng = seeded(seed);
            let cfg = MambaConfig::new(4, 2);
            let f = MambaMixer::init("f", &cfg, DType::F64, &mut rng);
            let r = MambaMixer::init("r", &cfg, DType::F64, &mut rng);
            let x = rand_t(seed + 7, &[t, 4]);
            let y = bidirectional_mamba_forward(&x, &f, &r).unwrap();
            let ys = bidirectional_mamba_forward(&x.reverse_rows().unwrap(), &r, &f).unwrap();
            prop_assert_eq!(ys.reverse_rows().unwrap(), y);
        }
    }

    fn mixer_alone(w: &MambaMixer, x: &Tensor) -> Tensor {
        let mut b = Eager;
        let v = w.lift(&mut b).unwrap();
        let xv = b.constant(x.clone());
        (*mixer_from_zero(&mut b, &v, &xv).unwrap()).clone()
    }

    #[test]
    fn bidirectional_two_pass_oracle_and_ablation() {
        let mut rng = seeded(11);
        let cfg = MambaConfig::new(4, 3);
        let f = MambaMixer::init("f", &cfg, DType::F64, &mut rng);
        let mut r = MambaMixer::init("r", &cfg, DType::F64, &mut rng);
        let x = rand_t(12, &[6, 4]);
        let y = bidirectional_mamba_forward(&x, &f, &r).unwrap();
        let yf = mixer_alone(&f, &x);
        let yb = mixer_alone(&r, &x.reverse_rows().unwrap()).reverse_rows().unwrap();
        assert_eq!(y, yf.add(&yb).unwrap().scale(0.5).unwrap());

        r.out_proj.set(Tensor::zeros(&[8, 4], DType::F64));
        let y = bidirectional_mamba_forward(&x, &f, &r).unwrap();
        assert_eq!(y, yf.scale(0.5).unwrap());
    }

    #[test]
    fn shared_weights_on_palindrome_are_symmetric() {
        let mut rng = seeded(13);
        let f = MambaMixer::init("f", &MambaConfig::new(4, 2), DType::F64, &mut rng);
        let half = rand_t(14, &[3, 4]);
        let x = Tensor::concat_rows(&[&half, &half.reverse_rows().unwrap()]).unwrap();
        let y = bidirectional_mamba_forward(&x, &f, &f).unwrap();
        assert_eq!(y.reverse_rows().unwrap(), y);
    }

    fn conmamba(seed: u64) -> (EncoderConfig, ConMambaBlockWeights) {
        let cfg = EncoderConfig::tiny();
        let w = ConMambaBlockWeights::init("c", &cfg, DType::F64, &mut seeded(seed));
        (cfg, w)
    }

    fn layer_norm(x: &Tensor, ln: &LayerNormWeights) -> Tensor {
        x.layer_norm(ln.gamma.value(), ln.beta.value(), NORM_EPS).unwrap()
    }

    #[test]
    fn zero_weight_conmamba_is_final_norm() {
        let (_, mut w) = conmamba(1);
        w.visit_mut(&mut |p| {
            if !p.name().contains("norm") {
                let z = Tensor::zeros_like(p.value());
                p.set(z);
            }
        });
        let x = rand_t(2, &[5, 8]);
        let y = conmamba_block_forward(&x, &w).unwrap();
        assert_eq!(y, layer_norm(&x, &w.final_norm));
    }

    #[test]
    fn conmamba_without_ffn_matches_composition() {
        let (_, mut w) = conmamba(3);
        for ffn in [&mut w.ffn1, &mut w.ffn2] {
            let z = Tensor::zeros_like(ffn.down.weight.value());
            ffn.down.weight.set(z);
        }
        let x = rand_t(4, &[6, 8]);
        let y = conmamba_block_forward(&x, &w).unwrap();

        let m = bidirectional_mamba_forward(&layer_norm(&x, &w.mamba_norm), &w.fwd, &w.bwd).unwrap();
        let x2 = x.add(&m).unwrap();
        let mut b = Eager;
        let xv = b.constant(x2.clone());
        let c = (*w.conv.apply(&mut b, &xv).unwrap()).clone();
        let want = layer_norm(&x2.add(&c).unwrap(), &w.final_norm);
        assert_eq!(y, want);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn conv_module_is_non_causal_and_same_length() {
        let (_, w) = conmamba(5);
        let x = rand_t(6, &[4, 8]);
        let mut b = Eager;
        let xv = b.constant(x.clone());
        let a = (*w.conv.apply(&mut b, &xv).unwrap()).clone();
        assert_eq!(a.shape(), &[4, 8]);
        let mut x2 = x.to_f64_vec();
        x2[2 * 8] += 1.0;
        let x2 = Tensor::from_f64(&[4, 8], x2, DType::F64).unwrap();
        let xv = b.constant(x2);
        let c = (*w.conv.apply(&mut b, &xv).unwrap()).clone();
        // a later frame within half a kernel reaches the first output
        assert_ne!(a.slice_rows(0, 1).unwrap(), c.slice_rows(0, 1).unwrap());
    }

    #[test]
    fn frontend_output_lengths() {
        let cfg = EncoderConfig::tiny();
        let w = Frontend::init("fe", &cfg, DType::F64, &mut seeded(1));
        for (tf, tc) in [(80, 20), (81, 21), (7, 2), (8, 2)] {
            let y = cnn_frontend(&rand_t(2, &[tf, cfg.d_feat]), &cfg, &w).unwrap();
            assert_eq!(y.shape(), &[tc, cfg.d_model]);
            assert_eq!(cfg.output_frames(tf), tc);
        }
        assert_eq!(cfg.min_frames(), 7);
        assert!(cnn_frontend(&rand_t(2, &[6, cfg.d_feat]), &cfg, &w).is_err());
        assert!(cnn_frontend(&rand_t(2, &[10, cfg.d_feat + 1]), &cfg, &w).is_err());
    }

    /// Direct nested-loop convolution, zero padding, `[C,H,W]` layout.
    fn naive_conv(x: &[f64], c_in: usize, h: usize, wd: usize, w: &[f64], bias: &[f64], c_out: usize, s: usize) -> (Vec<f64>, usize, usize) {
        let k = FRONTEND_KERNEL as isize;
        let oh = (h + 2 - 3) / s + 1;
        let ow = (wd + 2 - 3) / s + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        for co in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let y = (i * s) as isize + di - 1;
                                let xx = (j * s) as isize + dj - 1;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += w[((co * c_in + ci) * 3 + di as usize) * 3 + dj as usize]
                                        * x[(ci * h + y as usize) * wd + xx as usize];
                                }
                            }
                        }
                    }
                    out[(co * oh + i) * ow + j] = acc.max(0.0);
                }
            }
        }
        (out, oh, ow)
    }

    #[test]
    fn frontend_matches_naive_conv() {
        let cfg = EncoderConfig::tiny();
        let mut w = Frontend::init("fe", &cfg, DType::F64, &mut seeded(3));
        for (_, b) in &mut w.convs {
            b.set(rand_t(9, &[cfg.frontend_channels]));
        }
        let x = rand_t(4, &[11, cfg.d_feat]);
        let y = cnn_frontend(&x, &cfg, &w).unwrap();

        let c = cfg.frontend_channels;
        let (mut img, mut h, mut wd, mut cin) = (x.to_f64_vec(), 11, cfg.d_feat, 1);
        for (cw, cb) in &w.convs {
            let r = naive_conv(&img, cin, h, wd, &cw.value().to_f64_vec(), &cb.value().to_f64_vec(), c, 2);
            (img, h, wd, cin) = (r.0, r.1, r.2, c);
        }
        let pw = w.proj.weight.value().to_f64_vec();
        let dm = cfg.d_model;
        for t in 0..h {
            let flat: Vec<f64> = (0..c).flat_map(|ch| (0..wd).map(move |f| (ch, f))).map(|(ch, f)| img[(ch * h + t) * wd + f]).collect();
            for o in 0..dm {
                let want: f64 = flat.iter().enumerate().map(|(i, v)| v * pw[i * dm + o]).sum();
                assert!((y.get(t * dm + o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_without_layers_is_frontend() {
        let mut cfg = EncoderConfig::tiny();
        cfg.n_layers = 0;
        let w = EncoderWeights::init(&cfg, DType::F64, &mut seeded(1));
        let x = rand_t(2, &[20, cfg.d_feat]);
        assert_eq!(encoder_forward(&x, &cfg, &w).unwrap(), cnn_frontend(&x, &cfg, &w.frontend).unwrap());
    }

    #[test]
    fn encoder_is_deterministic_and_shaped() {
        let mut cfg = EncoderConfig::tiny();
        cfg.n_layers = 2;
        let w = EncoderWeights::init(&cfg, DType::F64, &mut seeded(1));
        let w2 = EncoderWeights::init(&cfg, DType::F64, &mut seeded(1));
        assert_eq!(w.to_map(), w2.to_map());
        let x = rand_t(2, &[23, cfg.d_feat]);
        let a = encoder_forward(&x, &cfg, &w).unwrap();
        assert_eq!(a.shape(), &[6, cfg.d_model]);
        assert_eq!(a, encoder_forward(&x, &cfg, &w).unwrap());
        assert!(w.params().iter().all(|p| p.name().starts_with("encoder.")));
    }

    #[test]
    fn config_round_trips_through_json() {
        for cfg in [EncoderConfig::full(), EncoderConfig::tiny()] {
            let s = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<EncoderConfig>(&s).unwrap(), cfg);
            cfg.validate().unwrap();
        }
        let mut bad = EncoderConfig::tiny();
        bad.d_model = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut w = block(21, 3, 2);
        // step sizes of order one keep every gradient far above finite-difference noise
        w.mixer.ssm.b_delta.set(init::full(&[6], 0.5, DType::F64));
        let x = rand_t(22, &[3, 3]).scale(2.0).unwrap();
        let params: Vec<Param> = w.params().into_iter().cloned().collect();
        let r = grad_check(&params, 1e-4, |tape: &mut Tape, ps: &[Param]| {
            let mut wc = w.clone();
            wc.visit_mut(&mut |p| {
                if let Some(q) = ps.iter().find(|q| q.name() == p.name()) {
                    p.set(q.value().clone());
                }
            });
            let v = wc.lift(tape)?;
            let xv = tape.constant(x.clone());
            let ctx = tape.constant(Tensor::zeros(&[3, 6], DType::F64));
            let h = tape.constant(Tensor::zeros(&[6, 2], DType::F64));
            let (y, _, _) = mamba_block_vars(tape, &v, &xv, &ctx, &h)?;
            let r = tape.constant(rand_t(23, &[3, 3]));
            let sq = tape.mul(&y, &r)?;
            let total = tape.reshape(&sq, &[1, 9])?;
            let ones = tape.constant(Tensor::from_f64(&[9, 1], vec![1.0; 9], DType::F64)?);
            let s = tape.matmul(&total, &ones)?;
            tape.reshape(&s, &[])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
