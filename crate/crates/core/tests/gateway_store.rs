use std::sync::Arc;

use difftune_core::gateway::*;

struct Echo;

impl ChatBackend for Echo {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let last = request.messages.last().map(|m| m.content.clone()).unwrap_or_default();
        Ok(ChatResponse::text(format!("echo: {last}")))
    }
}

fn req(text: &str) -> ChatRequest {
    ChatRequest::new("m", vec![Message::user(text)])
}

#[test]
fn recorded_transcripts_replay_offline() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("t.jsonl");
    let rec = record_replay(GatewayMode::Record, Some(&store), Arc::new(Echo)).unwrap();
    let a = rec.chat(&req("one")).unwrap();
    let b = rec.chat(&req("two")).unwrap();
    drop(rec);

    struct Unreachable;
    impl ChatBackend for Unreachable {
        fn chat(&self, _: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            panic!("replay must not reach the live backend");
        }
    }
    let rep = record_replay(GatewayMode::Replay, Some(&store), Arc::new(Unreachable)).unwrap();
    assert_eq!(rep.chat(&req("two")).unwrap(), b);
    assert_eq!(rep.chat(&req("one")).unwrap(), a);
    assert!(matches!(rep.chat(&req("three")), Err(GatewayError::ReplayMiss { .. })));
}

#[test]
fn repeated_requests_replay_in_order() {
    let r = req("same");
    let rep = Replayer::from_pairs([(r.clone(), ChatResponse::text("first")), (r.clone(), ChatResponse::text("second"))]);
    let got: Vec<String> = (0..3).map(|_| rep.chat(&r).unwrap().content).collect();
    assert_eq!(got, ["first", "second", "second"]);
}

#[test]
fn missing_store_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    assert!(matches!(record_replay(GatewayMode::Replay, Some(&missing), Arc::new(Echo)), Err(GatewayError::StoreMissing(_))));
    assert!(record_replay(GatewayMode::Record, None, Arc::new(Echo)).is_err());
}

#[test]
fn fixture_authoring_appends() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("f.jsonl");
    append_to_store(&store, &req("q"), &ChatResponse::text("a1")).unwrap();
    append_to_store(&store, &req("q"), &ChatResponse::text("a2")).unwrap();
    let rep = Replayer::open(&store).unwrap();
    assert_eq!(rep.chat(&req("q")).unwrap().content, "a1");
    assert_eq!(rep.chat(&req("q")).unwrap().content, "a2");
}
