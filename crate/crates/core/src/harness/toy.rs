//! Toy state-discrimination training on token-mode synthetic samples.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::synthetic::{gen_synthetic_dataset, EncodedSample, Sample, SyntheticTaskSpec};
use crate::error::{invalid, Error, Result};
use crate::init::seeded;
use crate::lm::{feed_tokens, lm_logits_vars, select_next, LmConfig, LmWeights, ModelState, Selection, Special, StateToken, Vocab};
use crate::numerics::{DType, Gradients, Tape};
use crate::training::{duplex_loss_vars, Adam, AdamConfig, FreezeSchedule};

/// Binary confusion counts with RE as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, actual_positive: bool, predicted_positive: bool) {
        match (actual_positive, predicted_positive) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub lm: LmConfig,
    pub task: SyntheticTaskSpec,
    /// Samples generated in total; the last `eval_fraction` is held out.
    pub samples: usize,
    pub eval_fraction: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Freeze stage applied to every update.
    pub stage: u8,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            lm: LmConfig::small(),
            task: SyntheticTaskSpec::default(),
            samples: 2500,
            eval_fraction: 0.2,
            epochs: 5,
            batch: 8,
            lr: 3e-3,
            stage: 3,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.task.validate()?;
        FreezeSchedule::default().trainable(self.stage)?;
        if self.lm.n_layers > 4 || self.lm.d_model > 128 {
            return Err(invalid("toy training expects at most 4 layers and d_model 128"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) || self.batch == 0 || !(self.lr > 0.0) {
            return Err(invalid("need 0 < eval_fraction < 1, batch >= 1 and lr > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub metrics: Metrics,
    pub confusion: Confusion,
    /// Restricted three-way accuracy over every held-out sample.
    pub state_accuracy: f64,
    pub untrained: Metrics,
    /// Mean batch loss per optimizer step.
    pub losses: Vec<f64>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seconds: f64,
}

/// Predicted state token after `<|user|> <|beginofspeech|> utterance <|endofspeech|>`.
pub fn predict_state(w: &LmWeights, utterance: &str, v: &Vocab) -> Result<StateToken> {
    let mut ids = vec![v.id(Special::User), v.id(Special::BeginSpeech)];
    ids.extend(v.encode(utterance));
    ids.push(v.id(Special::EndSpeech));
    let (_, logits) = feed_tokens(&ModelState::zeros(&w.cfg, w.dtype()), &ids, w)?;
    let id = select_next(&logits, &Selection::Restricted(v.state_ids().to_vec()))?;
    Ok(v.state_of(id).expect("restricted to state tokens"))
}

/// Interrupt (RE) is positive, ignore (IG) negative; incomplete samples only
/// count toward the three-way accuracy.
pub fn evaluate(w: &LmWeights, samples: &[Sample]) -> Result<(Confusion, f64)> {
    let v = Vocab::new();
    let mut c = Confusion::default();
    let mut correct = 0;
    for s in samples {
        let p = predict_state(w, &s.utterance, &v)?;
        correct += (p == s.label) as usize;
        if s.label != StateToken::Incomplete {
            c.record(s.label == StateToken::Response, p == StateToken::Response);
        }
    }
    Ok((c, ratio(correct, samples.len())))
}

/// Summed gradients and loss over one batch.
fn batch_gradients(w: &LmWeights, batch: &[&EncodedSample]) -> Result<(f64, Gradients)> {
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for e in batch {
        let mut tape = Tape::new();
        let vars = w.lift(&mut tape)?;
        let logits = lm_logits_vars(&mut tape, w, &vars, &e.ids[..e.ids.len() - 1])?;
        let (l, _, _) = duplex_loss_vars(&mut tape, &logits, e.j, e.state, &e.targets, e.prompt_len)?;
        let value = tape.value_of(l).item();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "toy_training" });
        }
        loss += value;
        total.accumulate(&tape.backward(l)?)?;
    }
    Ok((loss, total))
}

pub fn train_toy_state_discrimination(cfg: &ToyConfig) -> Result<(LmWeights, ToyReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let v = Vocab::new();
    let task = SyntheticTaskSpec {
        seed: cfg.seed,
        ..cfg.task.clone()
    };
    let data = gen_synthetic_dataset(&task, cfg.samples)?;
    let n_eval = ((cfg.samples as f64 * cfg.eval_fraction).round() as usize).clamp(1, cfg.samples - 1);
    let (train, held_out) = data.split_at(cfg.samples - n_eval);
    let encoded: Vec<EncodedSample> = train.iter().map(|s| task.encode(s, &v)).collect();

    let mut rng = seeded(cfg.seed ^ 0x0074_6f79);
    let mut w = LmWeights::init(&cfg.lm, DType::F64, &mut rng)?;
    let untrained = evaluate(&w, held_out)?.0.metrics();

    let freeze = FreezeSchedule::default();
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&EncodedSample> = chunk.iter().map(|&i| &encoded[i]).collect();
            let (loss, mut g) = batch_gradients(&w, &batch)?;
            g.scale(1.0 / batch.len() as f64)?;
            freeze.apply(&mut g, cfg.stage)?;
            adam.step(&mut w, &g)?;
            losses.push(loss / batch.len() as f64);
        }
    }

    let (confusion, state_accuracy) = evaluate(&w, held_out)?;
    let report = ToyReport {
        metrics: confusion.metrics(),
        confusion,
        state_accuracy,
        untrained,
        losses,
        train_samples: train.len(),
        eval_samples: held_out.len(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((w, report))
}
