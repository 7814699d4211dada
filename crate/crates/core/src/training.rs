//! Losses, the four-stage freeze schedule, and an Adam optimizer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::adapter::adapter_vars;
use crate::blocks::encoder_vars;
use crate::checkpoint::ModelBundle;
use crate::lm::{lm_trunk_vars, ModelState, Special, StateToken, TokenId, Vocab};
use crate::module::Module;
use crate::numerics::{sum_scalars, Backend, Eager, Gradients, Tensor};

/// Cross-entropy of `logits[pos]` against `target` (a scalar var).
fn ce_at<B: Backend>(b: &mut B, logits: &B::Var, pos: usize, target: usize) -> Result<B::Var> {
    let v = b.value(logits).shape()[1];
    let row = b.slice_rows(logits, pos, 1)?;
    let row = b.reshape(&row, &[v])?;
    b.cross_entropy(&row, target)
}

fn check_logits(shape: &[usize]) -> Result<()> {
    if shape.len() != 2 {
        return Err(crate::error::shape_err("loss", format!("logits must be [L, V], got {shape:?}")));
    }
    Ok(())
}

/// Mean cross-entropy over the response. `targets[i]` sits at input position
/// `prompt_len + i` and is predicted by logits row `prompt_len + i - 1`.
pub fn response_loss_vars<B: Backend>(b: &mut B, logits: &B::Var, targets: &[TokenId], prompt_len: usize) -> Result<B::Var> {
    let shape = b.value(logits).shape().to_vec();
    check_logits(&shape)?;
    if targets.is_empty() {
        return Err(invalid("response loss over an empty response"));
    }
    if prompt_len == 0 || prompt_len - 1 + targets.len() > shape[0] {
        return Err(Error::Index {
            op: "response_loss",
            index: prompt_len + targets.len(),
            len: shape[0] + 1,
        });
    }
    let dtype = b.value(logits).dtype();
    let terms = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| ce_at(b, logits, prompt_len - 1 + i, t))
        .collect::<Result<Vec<_>>>()?;
    let s = sum_scalars(b, &terms, dtype)?;
    b.scale(&s, 1.0 / targets.len() as f64)
}

pub fn response_loss(logits: &Tensor, targets: &[TokenId], prompt_len: usize) -> Result<f64> {
    let mut b = Eager;
    let l = b.constant(logits.clone());
    Ok(response_loss_vars(&mut b, &l, targets, prompt_len)?.item())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    /// Position of the state token in the input sequence.
    pub j: usize,
}

/// Scalar vars `(total, l1, l2)`. The state token at position `j` is
/// predicted by logits row `j - 1`; an empty response contributes `l2 = 0`.
pub fn duplex_loss_vars<B: Backend>(
    b: &mut B,
    logits: &B::Var,
    j: usize,
    state_target: TokenId,
    targets: &[TokenId],
    prompt_len: usize,
) -> Result<(B::Var, B::Var, B::Var)> {
    let shape = b.value(logits).shape().to_vec();
    check_logits(&shape)?;
    if j == 0 || j > shape[0] {
        return Err(Error::Index {
            op: "duplex_loss",
            index: j,
            len: shape[0] + 1,
        });
    }
    let l1 = ce_at(b, logits, j - 1, state_target)?;
    let l2 = if targets.is_empty() {
        b.constant(Tensor::scalar(0.0, b.value(logits).dtype()))
    } else {
        response_loss_vars(b, logits, targets, prompt_len)?
    };
    let total = b.add(&l1, &l2)?;
    Ok((total, l1, l2))
}

pub fn duplex_loss(
    logits: &Tensor,
    j: usize,
    state_target: TokenId,
    targets: &[TokenId],
    prompt_len: usize,
) -> Result<LossBreakdown> {
    let mut b = Eager;
    let l = b.constant(logits.clone());
    let (t, l1, l2) = duplex_loss_vars(&mut b, &l, j, state_target, targets, prompt_len)?;
    Ok(LossBreakdown {
        l1: l1.item(),
        l2: l2.item(),
        total: t.item(),
        j,
    })
}

/// Duplex loss of one feature-mode sample through encoder, adapter and LM:
/// `<|user|> instruction <|beginofspeech|> S <|endofspeech|> state <|endofuser|> <|assistant|> reply <eos>`.
pub fn speech_sample_loss_vars<B: Backend>(
    b: &mut B,
    bundle: &ModelBundle,
    instruction: &str,
    features: &Tensor,
    state: StateToken,
    reply: &[TokenId],
) -> Result<B::Var> {
    let (Some(ecfg), Some(enc), Some(ad)) = (&bundle.cfg.encoder, &bundle.encoder, &bundle.adapter) else {
        return Err(invalid("feature-mode loss needs an encoder and an adapter"));
    };
    let v = Vocab::new();
    let mut head = vec![v.id(Special::User)];
    head.extend(v.encode(instruction));
    head.push(v.id(Special::BeginSpeech));
    let mut tail = vec![v.id(Special::EndSpeech), v.state_id(state), v.id(Special::EndUser), v.id(Special::Assistant)];
    let mut targets = reply.to_vec();
    targets.push(v.id(Special::Eos));
    tail.extend(&targets[..targets.len() - 1]);

    let lm = bundle.lm.lift(b)?;
    let f = b.constant(features.clone());
    let h = encoder_vars(b, ecfg, enc, &f)?;
    let s = adapter_vars(b, &h, ad)?;
    let n_s = b.value(&s).shape()[0];
    let he = b.gather_rows(&lm.embedding, &head)?;
    let te = b.gather_rows(&lm.embedding, &tail)?;
    let x = b.concat_rows(&[he, s, te])?;
    let zero = ModelState::zeros(&bundle.lm.cfg, bundle.dtype());
    let st: Vec<_> = zero
        .layers
        .iter()
        .map(|l| (b.constant(l.conv.frames().clone()), b.constant(l.ssm.h.clone())))
        .collect();
    let (hidden, _) = lm_trunk_vars(b, &lm, &x, &st)?;
    let logits = b.matmul(&hidden, &lm.head)?;
    let j = head.len() + n_s + 1;
    let prompt_len = j + 3;
    Ok(duplex_loss_vars(b, &logits, j, v.state_id(state), &targets, prompt_len)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Adapter,
    Lm,
}

impl Component {
    /// Owner of a parameter, from its name prefix.
    pub fn of(name: &str) -> Option<Component> {
        match name.split('.').next() {
            Some("encoder") => Some(Component::Encoder),
            Some("adapter") => Some(Component::Adapter),
            Some("lm") => Some(Component::Lm),
            _ => None,
        }
    }
}

/// Trainable components per stage.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeSchedule {
    /// Replaces the stage default when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<Vec<Component>>,
}

impl FreezeSchedule {
    pub fn trainable(&self, stage: u8) -> Result<Vec<Component>> {
        let default = match stage {
            1 => vec![Component::Encoder, Component::Adapter],
            2 | 3 => vec![Component::Lm, Component::Adapter],
            4 => vec![Component::Encoder, Component::Adapter],
            s => return Err(invalid(format!("unknown training stage {s}"))),
        };
        Ok(self.overrides.clone().unwrap_or(default))
    }

    /// Zeroes gradients of frozen components (and of unowned names).
    pub fn apply(&self, grads: &mut Gradients, stage: u8) -> Result<()> {
        let keep = self.trainable(stage)?;
        for (name, g) in grads.iter_mut() {
            if !Component::of(name).is_some_and(|c| keep.contains(&c)) {
                *g = Tensor::zeros_like(g);
            }
        }
        Ok(())
    }
}

pub fn apply_freeze(grads: &mut Gradients, stage: u8) -> Result<()> {
    FreezeSchedule::default().apply(grads, stage)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter moments keyed by name.
///
/// An element whose gradient is exactly zero keeps its value; its moments
/// still decay.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            ..Default::default()
        }
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.m.get(name)?.as_slice(), self.v.get(name)?.as_slice()))
    }

    /// One update at learning rate `lr`; parameters without a gradient are skipped.
    pub fn step_with_lr<M: Module + ?Sized>(&mut self, model: &mut M, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.iter().any(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut err = None;
        model.visit_mut(&mut |p| {
            let Some(g) = grads.get(p.name()) else { return };
            if g.shape() != p.value().shape() {
                err = Some(crate::error::shape_err("optimizer_step", format!("gradient shape for {}", p.name())));
                return;
            }
            let n = g.numel();
            let m = self.m.entry(p.name().to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(p.name().to_string()).or_insert_with(|| vec![0.0; n]);
            let gv = g.to_f64_vec();
            let mut w = p.value().to_f64_vec();
            for i in 0..n {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gv[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * gv[i] * gv[i];
                if gv[i] != 0.0 {
                    w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                }
            }
            match Tensor::from_f64(p.value().shape(), w, p.value().dtype()) {
                Ok(t) => p.set(t),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, grads: &Gradients) -> Result<()> {
        let lr = self.cfg.lr;
        self.step_with_lr(model, grads, lr)
    }
}

/// Inverse-square-root warmup schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoamConfig {
    pub warmup: u64,
    pub d_model: usize,
}

impl NoamConfig {
    pub fn factor(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (self.warmup.max(1) as f64).powf(-1.5))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: u8,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub freeze: FreezeSchedule,
    /// Off by default at desk scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noam: Option<NoamConfig>,
}

fn default_batch() -> usize {
    8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 3,
            lr: 3e-3,
            steps: 500,
            seed: 0,
            batch: default_batch(),
            freeze: FreezeSchedule::default(),
            noam: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.freeze.trainable(self.stage)?;
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(invalid("lr and batch must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match &self.noam {
            Some(n) => self.lr * n.factor(step),
            None => self.lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{seeded, uniform};
    use crate::numerics::{DType, Param, Tape};

    fn logits(seed: u64, l: usize, v: usize) -> Tensor {
        uniform(&mut seeded(seed), &[l, v], 2.0, DType::F64)
    }

    fn log_softmax_at(row: &[f64], t: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        row[t] - m - z.ln()
    }

    #[test]
    fn response_loss_cases() {
        let v = 256;
        let uniform_logits = Tensor::zeros(&[6, v], DType::F64);
        let r = response_loss(&uniform_logits, &[1, 2, 3], 3).unwrap();
        assert!((r - (256f64).ln()).abs() < 1e-12);

        let mut sharp = vec![0.0; 4 * 5];
        for (i, t) in [3usize, 1, 4].iter().enumerate() {
            sharp[(1 + i) * 5 + t] = 1e6;
        }
        let sharp = Tensor::from_f64(&[4, 5], sharp, DType::F64).unwrap();
        assert!(response_loss(&sharp, &[3, 1, 4], 2).unwrap().abs() < 1e-12);

        let l = logits(1, 8, 7);
        let targets = [2, 6, 0, 5];
        let got = response_loss(&l, &targets, 4).unwrap();
        let rows = l.to_f64_vec();
        let want = -targets
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax_at(&rows[(3 + i) * 7..(4 + i) * 7], t))
            .sum::<f64>()
            / 4.0;
        assert!((got - want).abs() < 1e-9);

        assert!(response_loss(&l, &[], 4).is_err());
        assert!(response_loss(&l, &[1, 1], 8).is_err());
        assert!(response_loss(&l, &[1], 0).is_err());
    }

    #[test]
    fn duplex_loss_is_additive() {
        let l = logits(2, 10, 9);
        let r = duplex_loss(&l, 5, 7, &[1, 2, 3], 7).unwrap();
        assert_eq!(r.total, r.l1 + r.l2);
        let l1 = -log_softmax_at(&l.to_f64_vec()[4 * 9..5 * 9], 7);
        assert!((r.l1 - l1).abs() < 1e-12);
        assert!((r.l2 - response_loss(&l, &[1, 2, 3], 7).unwrap()).abs() < 1e-12);
        let empty = duplex_loss(&l, 5, 7, &[], 7).unwrap();
        assert_eq!(empty.l2, 0.0);
        assert_eq!(empty.total, empty.l1);
        assert!(duplex_loss(&l, 0, 7, &[], 7).is_err());
        assert!(duplex_loss(&l, 11, 7, &[], 7).is_err());
    }

    #[test]
    fn perfect_model_has_zero_duplex_loss() {
        let mut x = vec![0.0; 5 * 4];
        x[4 + 2] = 1e6;
        x[2 * 4 + 3] = 1e6;
        let l = Tensor::from_f64(&[5, 4], x, DType::F64).unwrap();
        let r = duplex_loss(&l, 2, 2, &[3], 3).unwrap();
        assert!(r.total.abs() < 1e-12);
    }

    fn fake_grads() -> Gradients {
        let mut g = Gradients::default();
        for n in ["encoder.layers.0.x", "adapter.w1.weight", "lm.head.weight"] {
            g.insert(n, Tensor::from_f64(&[2], vec![1.0, -2.0], DType::F64).unwrap());
        }
        g
    }

    #[test]
    fn freeze_masks_per_stage() {
        let zero = |g: &Gradients, n: &str| g.get(n).unwrap().to_f64_vec().iter().all(|&x| x == 0.0);
        let mut g = fake_grads();
        apply_freeze(&mut g, 1).unwrap();
        assert!(zero(&g, "lm.head.weight") && !zero(&g, "encoder.layers.0.x") && !zero(&g, "adapter.w1.weight"));
        let mut g = fake_grads();
        apply_freeze(&mut g, 3).unwrap();
        assert!(zero(&g, "encoder.layers.0.x") && !zero(&g, "lm.head.weight"));
        let mut g = fake_grads();
        apply_freeze(&mut g, 4).unwrap();
        assert!(zero(&g, "lm.head.weight") && !zero(&g, "encoder.layers.0.x") && !zero(&g, "adapter.w1.weight"));
        assert!(apply_freeze(&mut fake_grads(), 5).is_err());
        let over = FreezeSchedule {
            overrides: Some(vec![Component::Lm]),
        };
        let mut g = fake_grads();
        over.apply(&mut g, 1).unwrap();
        assert!(zero(&g, "adapter.w1.weight") && !zero(&g, "lm.head.weight"));
    }

    #[test]
    fn adam_zero_gradient_keeps_params_and_decays_moments() {
        let mut p = Param::new("x", Tensor::from_f64(&[2], vec![1.0, 2.0], DType::F64).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        let mut g = Gradients::default();
        g.insert("x", Tensor::from_f64(&[2], vec![0.5, 0.0], DType::F64).unwrap());
        adam.step(&mut p, &g).unwrap();
        let after_one = p.value().clone();
        assert!(after_one.get(0) < 1.0);
        assert_eq!(after_one.get(1), 2.0);
        let m0 = adam.moments("x").unwrap().0[0];
        g.insert("x", Tensor::zeros(&[2], DType::F64));
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.value(), &after_one);
        assert!((adam.moments("x").unwrap().0[0] - 0.9 * m0).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = Param::new("x", Tensor::from_f64(&[1], vec![1.0], DType::F64).unwrap());
        let mut g = Gradients::default();
        let t = Tensor::from_le_bytes(&[1], DType::F64, &f64::INFINITY.to_le_bytes()).unwrap();
        g.insert("x", t);
        assert!(Adam::new(AdamConfig::default()).step(&mut p, &g).is_err());
    }

    fn quad_grad(p: &Param, c: &[f64]) -> (f64, Gradients) {
        let mut tape = Tape::new();
        let x = tape.param(p);
        let cv = tape.constant(Tensor::from_f64(&[c.len()], c.to_vec(), DType::F64).unwrap());
        let d = tape.sub(&x, &cv).unwrap();
        let sq = tape.mul(&d, &d).unwrap();
        let row = tape.reshape(&sq, &[1, c.len()]).unwrap();
        let ones = tape.constant(Tensor::from_f64(&[c.len(), 1], vec![1.0; c.len()], DType::F64).unwrap());
        let s = tape.matmul(&row, &ones).unwrap();
        let s = tape.reshape(&s, &[]).unwrap();
        let loss = tape.value_of(s).item();
        (loss, tape.backward(s).unwrap())
    }

    #[test]
    fn adam_descends_and_converges() {
        let mut p = Param::new("x", Tensor::from_f64(&[1], vec![1.0], DType::F64).unwrap());
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        let (_, g) = quad_grad(&p, &[0.0]);
        adam.step(&mut p, &g).unwrap();
        assert!(p.value().get(0) < 1.0);

        let target = [0.5, -1.5, 2.0];
        let mut p = Param::new("y", Tensor::zeros(&[3], DType::F64));
        let mut adam = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        let mut loss = f64::INFINITY;
        for _ in 0..200 {
            let (l, g) = quad_grad(&p, &target);
            loss = l;
            adam.step(&mut p, &g).unwrap();
        }
        assert!(loss < 1e-4, "{loss}");
    }

    #[test]
    fn train_config_json_and_schedule() {
        let c: TrainConfig = serde_json::from_str(r#"{"stage":3,"lr":0.01,"steps":10,"seed":1}"#).unwrap();
        assert_eq!(c.batch, 8);
        c.validate().unwrap();
        assert_eq!(c.lr_at(5), 0.01);
        let mut n = c.clone();
        n.noam = Some(NoamConfig { warmup: 10, d_model: 64 });
        assert!(n.lr_at(1) < n.lr_at(10));
        assert!(n.lr_at(100) < n.lr_at(10));
        let bad: TrainConfig = serde_json::from_str(r#"{"stage":9,"lr":0.01,"steps":10,"seed":1}"#).unwrap();
        assert!(bad.validate().is_err());
    }
}
