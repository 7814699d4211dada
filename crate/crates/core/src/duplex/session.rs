use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::engine::DuplexModel;
use super::format::{Scenario, SliceEvent, SlicePayload, Trace, TraceEvent, TraceKind};
use crate::checkpoint::BundleConfig;
use crate::error::{invalid, Error, Result};
use crate::init::{self, Rng};
use crate::lm::{sample_next, select_next, Selection, Special, StateToken, TokenId};
use crate::numerics::{DType, Tensor};

/// Feature frame hop used to convert slice duration to frames.
pub const FRAME_MS: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub tick_ms: u64,
    pub tokens_per_sec: f64,
    /// Longest feature slice; longer payloads are split into consecutive slices.
    pub slice_ms: u64,
    pub max_response_tokens: usize,
    /// Text placed between `<|user|>` and `<|beginofspeech|>`.
    pub instruction: String,
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    /// Guard against scenarios that never quiesce.
    pub max_ticks: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            tick_ms: 200,
            tokens_per_sec: 20.0,
            slice_ms: 3000,
            max_response_tokens: 256,
            instruction: String::new(),
            temperature: 0.0,
            seed: 0,
            max_ticks: 100_000,
        }
    }
}

impl SessionConfig {
    /// Tokens generated per tick, at least one.
    pub fn budget(&self) -> usize {
        ((self.tokens_per_sec * self.tick_ms as f64 / 1000.0).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tick_ms == 0 || self.slice_ms < FRAME_MS {
            return Err(invalid("tick_ms must be positive and slice_ms at least one frame"));
        }
        if !(self.tokens_per_sec > 0.0) || self.temperature < 0.0 || self.max_response_tokens == 0 {
            return Err(invalid("tokens_per_sec and max_response_tokens must be positive, temperature nonnegative"));
        }
        Ok(())
    }
}

/// Session shape computed from configuration alone; allocates no weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionPlan {
    pub state_bytes: usize,
    pub budget: usize,
    pub slice_frames: u64,
}

pub fn plan(model: &BundleConfig, cfg: &SessionConfig, dtype: DType) -> Result<SessionPlan> {
    model.validate()?;
    cfg.validate()?;
    Ok(SessionPlan {
        state_bytes: model.lm.state_bytes(dtype),
        budget: cfg.budget(),
        slice_frames: cfg.slice_ms / FRAME_MS,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Main,
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AwaitingInput,
    ConsumingSpeech,
    Generating,
    Done,
}

#[derive(Debug, Clone)]
pub struct Branch<S> {
    pub id: u64,
    pub role: Role,
    pub state: S,
    /// Present while consuming speech: the state just before the last probe.
    pub pre_probe: Option<S>,
    /// Main branch only: the state before the current utterance began.
    pub pre_utterance: Option<S>,
    pub phase: Phase,
    logits: Option<Tensor>,
    emitted: usize,
}

impl<S> Branch<S> {
    fn new(id: u64, role: Role, state: S) -> Self {
        Branch {
            id,
            role,
            state,
            pre_probe: None,
            pre_utterance: None,
            phase: Phase::AwaitingInput,
            logits: None,
            emitted: 0,
        }
    }
}

pub struct Session<'m, M: DuplexModel> {
    model: &'m M,
    cfg: SessionConfig,
    main: Branch<M::State>,
    aux: Option<Branch<M::State>>,
    next_id: u64,
    now: u64,
    started: bool,
    seq: u64,
    events: Vec<TraceEvent>,
    pending: VecDeque<SliceEvent>,
    rng: Rng,
}

impl<'m, M: DuplexModel> Session<'m, M> {
    pub fn new(model: &'m M, cfg: SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = init::seeded(cfg.seed);
        let mut s = Session {
            model,
            main: Branch::new(0, Role::Main, model.fresh_state()),
            aux: None,
            next_id: 1,
            now: 0,
            started: false,
            seq: 0,
            events: Vec::new(),
            pending: VecDeque::new(),
            rng,
            cfg,
        };
        let detail = format!("tick_ms={} budget={}", s.cfg.tick_ms, s.cfg.budget());
        s.emit(TraceKind::SessionStart, 0, detail);
        Ok(s)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn main(&self) -> &Branch<M::State> {
        &self.main
    }

    pub fn aux(&self) -> Option<&Branch<M::State>> {
        self.aux.as_ref()
    }

    pub fn trace(&self) -> Trace {
        Trace {
            events: self.events.clone(),
        }
    }

    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.main.phase != Phase::Generating
    }

    fn emit(&mut self, kind: TraceKind, branch: u64, detail: impl Into<String>) {
        self.events.push(TraceEvent {
            t_ms: self.now,
            seq: self.seq,
            kind,
            branch,
            detail: detail.into(),
        });
        self.seq += 1;
    }

    /// Queues a slice for ingestion at the first tick at or after its arrival.
    pub fn push(&mut self, ev: SliceEvent) -> Result<()> {
        if self.pending.back().is_some_and(|b| b.t_ms > ev.t_ms) {
            return Err(Error::Protocol("slices must be queued in arrival order".into()));
        }
        self.pending.push_back(ev);
        Ok(())
    }

    /// Ingests due slices, then generates up to the tick budget on the main branch.
    pub fn tick(&mut self, now: u64) -> Result<Vec<TraceEvent>> {
        if self.started && now < self.now {
            return Err(Error::Protocol(format!("clock regression from {} to {now}", self.now)));
        }
        self.started = true;
        self.now = now;
        let start = self.events.len();
        while self.pending.front().is_some_and(|e| e.t_ms <= now) {
            let ev = self.pending.pop_front().expect("front exists");
            self.feed_slice(&ev)?;
        }
        self.generate()?;
        Ok(self.events[start..].to_vec())
    }

    fn split(&self, p: &SlicePayload) -> Vec<SlicePayload> {
        match (p, self.model.feature_dim()) {
            (SlicePayload::Features(v), Some(d)) if d > 0 => {
                let max = (self.cfg.slice_ms / FRAME_MS) as usize * d;
                if v.len() <= max {
                    vec![p.clone()]
                } else {
                    v.chunks(max).map(|c| SlicePayload::Features(c.to_vec())).collect()
                }
            }
            _ => vec![p.clone()],
        }
    }

    /// Routes one slice to the receiving branch, probes, and dispatches on the state token.
    pub fn feed_slice(&mut self, ev: &SliceEvent) -> Result<()> {
        for piece in self.split(&ev.payload) {
            self.feed_piece(&piece, ev.note.as_deref())?;
        }
        Ok(())
    }

    fn feed_piece(&mut self, p: &SlicePayload, note: Option<&str>) -> Result<()> {
        if let Err(e) = self.model.check_payload(p) {
            let target = self.aux.as_ref().map_or(self.main.id, |a| a.id);
            self.emit(TraceKind::SliceRejected, target, e.to_string());
            return Ok(());
        }
        let v = self.model.vocab();
        let mut opening: Vec<TokenId> = Vec::new();
        if self.aux.is_none() && self.main.phase == Phase::Generating {
            let id = self.next_id;
            self.next_id += 1;
            let mut b = Branch::new(id, Role::Auxiliary, self.main.state.clone());
            b.phase = Phase::ConsumingSpeech;
            self.aux = Some(b);
            let from = self.main.id;
            self.emit(TraceKind::BranchCreated, id, format!("from {from}"));
            opening.extend([v.id(Special::Eos), v.id(Special::User)]);
        } else if self.aux.is_none() && self.main.phase == Phase::AwaitingInput {
            self.main.pre_utterance = Some(self.main.state.clone());
            self.main.phase = Phase::ConsumingSpeech;
            opening.push(v.id(Special::User));
        }
        if !opening.is_empty() {
            opening.extend(v.encode(&self.cfg.instruction));
            opening.push(v.id(Special::BeginSpeech));
        }

        let model = self.model;
        let br = self.aux.as_mut().unwrap_or(&mut self.main);
        let mut state = br.state.clone();
        if !opening.is_empty() {
            state = model.feed_tokens(&state, &opening)?.0;
        }
        state = model.feed_speech(&state, p)?;
        br.pre_probe = Some(state.clone());
        let (probing, logits) = model.feed_tokens(&state, &[v.id(Special::EndSpeech)])?;
        let sid = select_next(&logits, &Selection::Restricted(v.state_ids().to_vec()))?;
        let tok = v.state_of(sid).expect("restricted to state ids");
        br.state = model.feed_tokens(&probing, &[sid])?.0;
        let bid = br.id;

        let detail = match note {
            Some(n) => format!("{} {n}", p.mode()),
            None => p.mode().to_string(),
        };
        self.emit(TraceKind::SliceConsumed, bid, detail);
        self.emit(TraceKind::StateToken, bid, tok.short());
        self.handle_state_token(tok)
    }

    fn handle_state_token(&mut self, tok: StateToken) -> Result<()> {
        let on_aux = self.aux.is_some();
        match tok {
            StateToken::Incomplete => {
                let br = self.aux.as_mut().unwrap_or(&mut self.main);
                br.state = br.pre_probe.clone().expect("probed branch has a pre-probe snapshot");
                let id = br.id;
                self.emit(TraceKind::Rollback, id, "pre-probe");
            }
            StateToken::Ignore if on_aux => {
                let aux = self.aux.take().expect("aux exists");
                self.emit(TraceKind::BranchDiscarded, aux.id, "ignored");
            }
            StateToken::Ignore => {
                let m = &mut self.main;
                m.state = m.pre_utterance.take().expect("utterance on main has a snapshot");
                m.pre_probe = None;
                m.phase = Phase::AwaitingInput;
                let id = m.id;
                self.emit(TraceKind::Rollback, id, "pre-utterance");
            }
            StateToken::Response => {
                if let Some(aux) = self.aux.take() {
                    if self.main.phase == Phase::Generating {
                        let id = self.main.id;
                        self.emit(TraceKind::ResponseEnd, id, "interrupted");
                    }
                    let old = self.main.id;
                    self.main = Branch { role: Role::Main, ..aux };
                    let id = self.main.id;
                    self.emit(TraceKind::BranchPromoted, id, format!("replaces {old}"));
                }
                let v = self.model.vocab();
                let m = &mut self.main;
                let (s, logits) = self.model.feed_tokens(&m.state, &[v.id(Special::EndUser), v.id(Special::Assistant)])?;
                m.state = s;
                m.logits = Some(logits);
                m.pre_probe = None;
                m.pre_utterance = None;
                m.phase = Phase::Generating;
                m.emitted = 0;
                let id = m.id;
                self.emit(TraceKind::ResponseStart, id, "");
            }
        }
        Ok(())
    }

    fn generate(&mut self) -> Result<()> {
        if self.main.phase != Phase::Generating {
            return Ok(());
        }
        let v = self.model.vocab();
        let eos = v.id(Special::Eos);
        for _ in 0..self.cfg.budget() {
            let logits = self.main.logits.as_ref().expect("generating branch has logits");
            let tok = if self.cfg.temperature > 0.0 {
                sample_next(logits, self.cfg.temperature, &mut self.rng)?
            } else {
                select_next(logits, &Selection::Greedy)?
            };
            let id = self.main.id;
            if tok != eos {
                self.emit(TraceKind::TextToken, id, v.token_text(tok));
                self.main.emitted += 1;
            }
            let (s, l) = self.model.feed_tokens(&self.main.state, &[tok])?;
            self.main.state = s;
            self.main.logits = Some(l);
            let reason = if tok == eos {
                Some("complete")
            } else if self.main.emitted >= self.cfg.max_response_tokens {
                self.main.state = self.model.feed_tokens(&self.main.state, &[eos])?.0;
                Some("length")
            } else {
                None
            };
            if let Some(r) = reason {
                self.main.phase = Phase::AwaitingInput;
                self.main.logits = None;
                self.emit(TraceKind::ResponseEnd, id, r);
                break;
            }
        }
        Ok(())
    }

    /// Closes any pending auxiliary branch and marks the session finished.
    pub fn finish(&mut self) -> Trace {
        if let Some(aux) = self.aux.take() {
            self.emit(TraceKind::BranchDiscarded, aux.id, "pending");
        }
        if self.main.phase == Phase::Generating {
            let id = self.main.id;
            self.emit(TraceKind::ResponseEnd, id, "session-end");
        }
        self.main.phase = Phase::Done;
        let id = self.main.id;
        self.emit(TraceKind::SessionEnd, id, "");
        self.trace()
    }
}

/// Advances a virtual clock tick by tick until every slice is consumed and
/// generation has stopped.
pub fn run_scenario<M: DuplexModel>(model: &M, cfg: &SessionConfig, scenario: &Scenario) -> Result<Trace> {
    let mut s = Session::new(model, cfg.clone())?;
    for e in &scenario.events {
        s.push(e.clone())?;
    }
    let mut now = 0;
    for _ in 0..cfg.max_ticks {
        s.tick(now)?;
        if s.is_quiescent() {
            return Ok(s.finish());
        }
        now += cfg.tick_ms;
    }
    Err(Error::Protocol(format!("scenario did not quiesce within {} ticks", cfg.max_ticks)))
}
