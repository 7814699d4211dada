//! Duplex decoding: a tick-driven session that interleaves input slices and
//! response generation over a main branch and at most one auxiliary branch.

mod engine;
mod format;
mod session;
mod stub;

pub use engine::{DuplexModel, LmEngine};
pub use format::{Scenario, SliceEvent, SlicePayload, Trace, TraceEvent, TraceKind, TEXT_RUN};
pub use session::{plan, run_scenario, Branch, Phase, Role, Session, SessionConfig, SessionPlan, FRAME_MS};
pub use stub::{ScriptedLm, StubState, QUERY_CAP};

#[cfg(test)]
mod tests;
