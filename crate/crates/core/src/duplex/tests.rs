use super::*;
use crate::checkpoint::{BundleConfig, ModelBundle};
use crate::blocks::EncoderConfig;
use crate::lm::{LmConfig, Vocab};
use crate::numerics::DType;

fn tokens(t_ms: u64, text: &str) -> SliceEvent {
    SliceEvent {
        t_ms,
        payload: SlicePayload::MockTokens(Vocab::new().encode(text)),
        note: None,
    }
}

fn run(events: Vec<SliceEvent>) -> Trace {
    let m = ScriptedLm::default();
    run_scenario(&m, &SessionConfig::default(), &Scenario::new(events).unwrap()).unwrap()
}

#[test]
fn empty_scenario_has_only_markers() {
    assert_eq!(run(vec![]).skeleton(), ["session-start", "session-end"]);
}

#[test]
fn idle_query_probes_main_without_branching() {
    let t = run(vec![tokens(0, "hi there?")]);
    assert_eq!(
        t.skeleton(),
        ["session-start", "slice-consumed", "state-token:RE", "response-start", TEXT_RUN, "response-end:complete", "session-end"]
    );
    assert_eq!(t.of_kind(TraceKind::BranchCreated).count(), 0);
    let text: String = t.text_on(0).concat();
    assert!(text.starts_with("ans hi there"));
    assert_eq!(t.text_on(0).len(), 80);
}

#[test]
fn budget_limits_tokens_per_tick() {
    let m = ScriptedLm::default();
    let cfg = SessionConfig::default();
    assert_eq!(cfg.budget(), 4);
    let mut s = Session::new(&m, cfg).unwrap();
    s.push(tokens(0, "q?")).unwrap();
    let first = s.tick(0).unwrap();
    let kinds: Vec<_> = first.iter().map(|e| e.kind).collect();
    let pos_tok = kinds.iter().position(|k| *k == TraceKind::TextToken).unwrap();
    assert!(kinds[..pos_tok].contains(&TraceKind::SliceConsumed));
    assert_eq!(kinds.iter().filter(|k| **k == TraceKind::TextToken).count(), 4);
    assert_eq!(s.tick(200).unwrap().len(), 4);
    assert!(s.tick(100).is_err());
}

#[test]
fn incomplete_slices_roll_back_and_continue() {
    let t = run(vec![tokens(0, "what is "), tokens(3000, "the capital "), tokens(6000, "of france?")]);
    let sk = t.skeleton();
    assert_eq!(
        &sk[1..9],
        [
            "slice-consumed",
            "state-token:IC",
            "rollback:pre-probe",
            "slice-consumed",
            "state-token:IC",
            "rollback:pre-probe",
            "slice-consumed",
            "state-token:RE"
        ]
    );
    assert_eq!(t.of_kind(TraceKind::ResponseStart).count(), 1);
    assert!(t.text_on(0).concat().starts_with("ans what is the capital of france"));
}

#[test]
fn rollback_equals_one_pass() {
    let m = ScriptedLm::default();
    let mut a = Session::new(&m, SessionConfig::default()).unwrap();
    a.feed_slice(&tokens(0, "ab")).unwrap();
    a.feed_slice(&tokens(0, "cd")).unwrap();
    let mut b = Session::new(&m, SessionConfig::default()).unwrap();
    b.feed_slice(&tokens(0, "abcd")).unwrap();
    assert_eq!(a.main().state, b.main().state);
    assert_eq!(a.main().phase, Phase::ConsumingSpeech);
}

#[test]
fn interruption_promotes_auxiliary() {
    let t = run(vec![tokens(0, "tell me a story?"), tokens(1000, "wait, "), tokens(2000, "what about cats?")]);
    t.check().unwrap();
    let sk = t.skeleton();
    let want = [
        "session-start",
        "slice-consumed",
        "state-token:RE",
        "response-start",
        TEXT_RUN,
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
        "session-end",
    ];
    assert_eq!(sk, want);
    let o2: String = t.text_on(1).concat();
    assert!(o2.starts_with("ans wait, what about cats"), "{o2}");
    assert!(t.text_on(0).len() < 80);
}

#[test]
fn ignored_input_leaves_main_untouched() {
    let base = run(vec![tokens(0, "tell me a story?")]);
    let t = run(vec![tokens(0, "tell me a story?"), tokens(600, "~ did you feed the cat?")]);
    t.check().unwrap();
    let sk = t.skeleton();
    let i = sk.iter().position(|s| s == "state-token:IG").unwrap();
    assert_eq!(sk[i + 1], "branch-discarded");
    assert_eq!(t.text_on(0), base.text_on(0));
}

#[test]
fn ignore_while_idle_restores_pre_utterance() {
    let m = ScriptedLm::default();
    let mut s = Session::new(&m, SessionConfig::default()).unwrap();
    let before = s.main().state.clone();
    s.feed_slice(&tokens(0, "~ background talk?")).unwrap();
    assert_eq!(s.main().state, before);
    assert_eq!(s.main().phase, Phase::AwaitingInput);
    let t = s.finish();
    assert!(t.skeleton().contains(&"rollback:pre-utterance".to_string()));
}

#[test]
fn auxiliary_never_touches_main_state() {
    let m = ScriptedLm::default();
    let mut s = Session::new(&m, SessionConfig::default()).unwrap();
    s.push(tokens(0, "long answer please?")).unwrap();
    s.tick(0).unwrap();
    let fp = m.fingerprint(&s.main().state);
    s.feed_slice(&tokens(0, "and also ")).unwrap();
    assert!(s.aux().is_some());
    assert_eq!(m.fingerprint(&s.main().state), fp);
    s.feed_slice(&tokens(0, "more ")).unwrap();
    assert_eq!(m.fingerprint(&s.main().state), fp);
}

#[test]
fn short_or_unsupported_slices_are_rejected_with_trace() {
    let m = ScriptedLm::default();
    let mut s = Session::new(&m, SessionConfig::default()).unwrap();
    s.feed_slice(&SliceEvent {
        t_ms: 0,
        payload: SlicePayload::MockTokens(vec![]),
        note: None,
    })
    .unwrap();
    s.feed_slice(&SliceEvent {
        t_ms: 0,
        payload: SlicePayload::Features(vec![0.0; 8]),
        note: None,
    })
    .unwrap();
    let t = s.finish();
    assert_eq!(t.of_kind(TraceKind::SliceRejected).count(), 2);
    assert_eq!(s.main().phase, Phase::Done);
}

#[test]
fn replay_is_byte_identical() {
    let ev = || vec![tokens(0, "tell me a story?"), tokens(1000, "wait, "), tokens(2000, "what about cats?")];
    assert_eq!(run(ev()).to_jsonl(), run(ev()).to_jsonl());
}

#[test]
fn plan_accepts_full_scale_without_weights() {
    let cfg = BundleConfig {
        lm: LmConfig::full(),
        encoder: Some(EncoderConfig::full()),
        adapter_k: 5,
        adapter_hidden: None,
    };
    let p = plan(&cfg, &SessionConfig::default(), DType::F32).unwrap();
    assert_eq!(p.budget, 4);
    assert_eq!(p.slice_frames, 300);
    assert_eq!(p.state_bytes, 64 * (3 * 5120 + 5120 * 16) * 4 + 8);
    let mut bad = cfg.clone();
    bad.lm.d_state = 0;
    assert!(plan(&bad, &SessionConfig::default(), DType::F32).is_err());
}

#[test]
fn engine_rejects_mismatched_weights() {
    let cfg = BundleConfig {
        lm: LmConfig::tiny(),
        encoder: Some(EncoderConfig::tiny()),
        adapter_k: 2,
        adapter_hidden: None,
    };
    let mut b = ModelBundle::init(&cfg, DType::F64, 1).unwrap();
    assert!(LmEngine::new(b.clone()).is_ok());
    b.cfg.lm.d_state = 5;
    assert!(LmEngine::new(b).is_err());
}

#[test]
fn real_engine_runs_feature_and_token_slices() {
    let cfg = BundleConfig {
        lm: LmConfig::tiny(),
        encoder: Some(EncoderConfig::tiny()),
        adapter_k: 2,
        adapter_hidden: None,
    };
    let e = LmEngine::new(ModelBundle::init(&cfg, DType::F64, 3).unwrap()).unwrap();
    let feats = SliceEvent {
        t_ms: 0,
        payload: SlicePayload::Features(vec![0.25; 40 * 8]),
        note: Some("f".into()),
    };
    let scfg = SessionConfig {
        max_response_tokens: 6,
        slice_ms: 200,
        ..Default::default()
    };
    let sc = Scenario::new(vec![feats, tokens(400, "x")]).unwrap();
    let t = run_scenario(&e, &scfg, &sc).unwrap();
    t.check().unwrap();
    // 40 frames at 20 frames per slice -> two feature slices plus one token slice
    assert_eq!(t.of_kind(TraceKind::SliceConsumed).count(), 3);
    assert_eq!(run_scenario(&e, &scfg, &sc).unwrap(), t);
}
