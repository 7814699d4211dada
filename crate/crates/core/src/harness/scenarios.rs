//! Bundled protocol scenarios with their expected trace skeletons under the
//! scripted stub model.

use crate::duplex::{run_scenario, Scenario, ScriptedLm, SessionConfig, SliceEvent, SlicePayload, Trace, TEXT_RUN};
use crate::error::Result;
use crate::lm::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct BundledScenario {
    pub name: &'static str,
    pub description: &'static str,
    pub scenario: Scenario,
    pub expected: Vec<String>,
}

impl BundledScenario {
    /// Runs under the default stub and session settings.
    pub fn run_stub(&self) -> Result<Trace> {
        run_scenario(&ScriptedLm::default(), &SessionConfig::default(), &self.scenario)
    }
}

fn said(t_ms: u64, text: &str, note: &str) -> SliceEvent {
    SliceEvent {
        t_ms,
        payload: SlicePayload::MockTokens(Vocab::new().encode(text)),
        note: Some(note.to_string()),
    }
}

fn skeleton(parts: &[&str]) -> Vec<String> {
    let mut v = vec!["session-start".to_string()];
    v.extend(parts.iter().map(|s| s.to_string()));
    v.push("session-end".into());
    v
}

pub fn scenario_library() -> Vec<BundledScenario> {
    let answer = ["state-token:RE", "response-start", TEXT_RUN];
    let new_scenario = |events| Scenario::new(events).expect("bundled scenarios are time-ordered");
    vec![
        BundledScenario {
            name: "idle-query",
            description: "one complete query while nothing is being generated",
            scenario: new_scenario(vec![said(0, "what time is it?", "query")]),
            expected: skeleton(&["slice-consumed", answer[0], answer[1], answer[2], "response-end:complete"]),
        },
        BundledScenario {
            name: "incomplete-continuation",
            description: "one query spoken across three slices",
            scenario: new_scenario(vec![
                said(0, "what is ", "first part"),
                said(3000, "the capital ", "second part"),
                said(6000, "of france?", "last part"),
            ]),
            expected: skeleton(&[
                "slice-consumed",
                "state-token:IC",
                "rollback:pre-probe",
                "slice-consumed",
                "state-token:IC",
                "rollback:pre-probe",
                "slice-consumed",
                answer[0],
                answer[1],
                answer[2],
                "response-end:complete",
            ]),
        },
        BundledScenario {
            name: "interruption",
            description: "a two-part query interrupts an ongoing response",
            scenario: new_scenario(vec![
                said(0, "tell me a story?", "first query"),
                said(1000, "wait, ", "interruption begins"),
                said(2000, "what about cats?", "interruption completes"),
            ]),
            expected: skeleton(&[
                "slice-consumed",
                answer[0],
                answer[1],
                answer[2],
                "branch-created",
                "slice-consumed",
                "state-token:IC",
                "rollback:pre-probe",
                TEXT_RUN,
                "slice-consumed",
                "state-token:RE",
                "response-end:interrupted",
                "branch-promoted",
                "response-start",
                TEXT_RUN,
                "response-end:complete",
            ]),
        },
        BundledScenario {
            name: "non-awakening",
            description: "background speech during a response is ignored",
            scenario: new_scenario(vec![
                said(0, "tell me a story?", "query"),
                said(600, "~ did you feed the cat?", "background speech"),
            ]),
            expected: skeleton(&[
                "slice-consumed",
                answer[0],
                answer[1],
                answer[2],
                "branch-created",
                "slice-consumed",
                "state-token:IG",
                "branch-discarded",
                TEXT_RUN,
                "response-end:complete",
            ]),
        },
    ]
}
