//! Wire contracts of the HTTP backends, exercised against a local stub.

mod common;

use std::sync::Arc;
use std::time::Duration;

use callqa::asr::{transcribe, HttpAsr, Speaker};
use callqa::audio::{AudioClip, ChannelLabel};
use callqa::llm::{Gateway, HttpChat, HttpEmbed, LlmError, MockChat, MockEmbed, Task, TemplateSet};
use callqa::retry::RetryPolicy;
use callqa::vector_store::{CandidateSource, Persona, RemoteSearch, SearchFilter, StoreError};
use common::StubServer;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay_ms: 1,
        max_delay_ms: 2,
        jitter: 0.0,
    }
}

fn chat_gateway(url: &str) -> Gateway {
    Gateway::new(
        Arc::new(HttpChat {
            endpoint: url.to_string(),
            model: "chat-model".into(),
            timeout: Duration::from_secs(5),
        }),
        Arc::new(MockEmbed::new(4, 0)),
        fast_retry(),
        4,
        2,
    )
}

fn embed_gateway(url: &str, dim: usize) -> Gateway {
    Gateway::new(
        Arc::new(MockChat),
        Arc::new(HttpEmbed {
            endpoint: url.to_string(),
            model: "embed-model".into(),
            timeout: Duration::from_secs(5),
        }),
        fast_retry(),
        dim,
        2,
    )
}

#[test]
fn chat_request_shape_auth_and_retry() {
    // Only ever set, never removed, so parallel tests cannot observe a missing key.
    std::env::set_var("C2I_API_KEY", "test-key");
    let server = StubServer::start(vec![
        (503, "{}".into()),
        (200, r#"{"text": "\"Quero a segunda via da fatura.\""}"#.into()),
    ]);
    let gw = chat_gateway(&server.url);
    let templates = TemplateSet::builtin();
    let t = templates.get(Task::Rewrite, "v2").unwrap();
    let out = gw.rewrite_demand("eu queria a segunda via da fatura", t).unwrap();
    assert_eq!(out.text, "Quero a segunda via da fatura.");
    assert_eq!(out.exchange.response.attempt_count, 2);
    let reqs = server.join();
    assert_eq!(reqs.len(), 2);
    let body = reqs[1].json();
    assert_eq!(reqs[1].method, "POST");
    assert_eq!(body["model"], "chat-model");
    assert_eq!(body["temperature"], 0);
    let messages = body["messages"].as_array().unwrap();
    assert_eq!(messages.first().unwrap()["role"], "system");
    assert_eq!(messages.last().unwrap()["role"], "user");
    assert!(messages.last().unwrap()["content"]
        .as_str()
        .unwrap()
        .contains("segunda via"));
    assert_eq!(reqs[1].header("authorization"), Some("Bearer test-key"));
}

#[test]
fn chat_client_error_is_not_retried() {
    let server = StubServer::start(vec![(400, r#"{"error": "bad"}"#.into())]);
    let gw = chat_gateway(&server.url);
    let templates = TemplateSet::builtin();
    let err = gw
        .rewrite_demand("eu queria cancelar", templates.get(Task::Rewrite, "v2").unwrap())
        .unwrap_err();
    assert!(matches!(err, LlmError::Backend { attempts: 1, .. }), "{err:?}");
    assert_eq!(server.join().len(), 1);
}

#[test]
fn chat_exhausts_retries_on_persistent_5xx() {
    let server = StubServer::start(vec![(500, "{}".into()), (502, "{}".into()), (503, "{}".into())]);
    let gw = chat_gateway(&server.url);
    let templates = TemplateSet::builtin();
    let err = gw
        .rewrite_demand("eu queria cancelar", templates.get(Task::Rewrite, "v2").unwrap())
        .unwrap_err();
    assert!(matches!(err, LlmError::Backend { attempts: 3, .. }), "{err:?}");
    assert_eq!(server.join().len(), 3);
}

#[test]
fn embedding_contract_and_dimension_check() {
    let server = StubServer::start(vec![
        (200, r#"{"values": [0.1, 0.2, 0.3, 0.4]}"#.into()),
        (200, r#"{"values": [0.1, 0.2, 0.3]}"#.into()),
    ]);
    let gw = embed_gateway(&server.url, 4);
    let v = gw.embed("quero cancelar").unwrap();
    assert_eq!(v.values, vec![0.1, 0.2, 0.3, 0.4]);
    assert_eq!(v.model_tag, "embed-model");
    let err = gw.embed("quero cancelar").unwrap_err();
    assert!(matches!(err, LlmError::Dimension { .. }), "{err:?}");
    let reqs = server.join();
    assert_eq!(reqs[0].json()["input"], "quero cancelar");
    assert_eq!(reqs[0].json()["model"], "embed-model");
}

#[test]
fn http_asr_posts_wav_and_parses_segments() {
    let server = StubServer::start(vec![(
        200,
        r#"[{"start": 1.0, "end": 1.5, "text": " bom dia "}, {"start": 0.0, "end": 0.8, "text": "olá"}]"#.into(),
    )]);
    let backend = HttpAsr {
        endpoint: server.url.clone(),
        timeout: Duration::from_secs(5),
    };
    let clip = AudioClip::new(vec![0.1; 16_000 * 2], 16_000, ChannelLabel::Agent);
    let segs = transcribe(&clip, Speaker::Agent, &backend, &fast_retry()).unwrap();
    assert_eq!(segs.len(), 2);
    assert_eq!(segs[0].text, "olá");
    assert_eq!(segs[1].text, "bom dia");
    assert!(segs.iter().all(|s| s.speaker == Speaker::Agent));
    let reqs = server.join();
    assert_eq!(reqs[0].header("content-type"), Some("audio/wav"));
    assert_eq!(&reqs[0].body[..4], b"RIFF");
}

#[test]
fn remote_search_contract() {
    let server = StubServer::start(vec![
        (
            200,
            r#"{"hits": [
                {"entry_id": "c1:response", "score": 0.9, "rank": 1, "call_id": "c1", "text": "resposta um"},
                {"entry_id": "c2:response", "score": 0.5, "rank": 2, "call_id": "c2", "text": "resposta dois"}
            ]}"#
            .into(),
        ),
        (
            200,
            r#"{"hits": [
                {"entry_id": "a", "score": 0.1, "rank": 1, "call_id": "c", "text": "t"},
                {"entry_id": "b", "score": 0.9, "rank": 2, "call_id": "c", "text": "t"}
            ]}"#
            .into(),
        ),
    ]);
    let search = RemoteSearch {
        endpoint: server.url.clone(),
        timeout: Duration::from_secs(5),
        retry: fast_retry(),
    };
    let filter = SearchFilter::persona(Persona::Agent);
    let hits = search.retrieve(&[1.0, 0.0], 3, &filter).unwrap();
    assert_eq!(hits.len(), 2);
    assert_eq!(hits[0].hit.entry_id, "c1:response");
    assert_eq!(hits[1].text, "resposta dois");
    let err = search.retrieve(&[1.0, 0.0], 3, &filter).unwrap_err();
    assert!(matches!(err, StoreError::Remote { .. }), "{err:?}");
    let reqs = server.join();
    let body = reqs[0].json();
    assert_eq!(body["k"], 3);
    assert_eq!(body["query"].as_array().unwrap().len(), 2);
    assert_eq!(body["filter"]["persona"], "agent");
}
