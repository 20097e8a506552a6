//! Wire-protocol conformance against scripted HTTP stubs: embedding client,
//! chat client, and the model-card fetcher.

mod common;

use common::{StubResponse, StubServer};
use ratatool::corpus::{fetch_model_card, CorpusError};
use ratatool::embed::{EmbedError, EmbeddingProvider, RemoteEmbedder, RetryPolicy};
use ratatool::llmclient::{
    describe_task, describe_tool, GenerationConfig, RemoteChatClient,
};
use ratatool::tooldesc::{
    Attachment, AttachmentKind, DecodingStrategy, DescFormat, Query,
};
use std::time::Duration;

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base: Duration::from_millis(1),
    }
}

fn embedder(url: &str, token: Option<&str>) -> RemoteEmbedder<f64> {
    RemoteEmbedder::new(url, "stub-model", token.map(|t| t.to_string())).with_retry(fast_retry())
}

#[test]
fn embed_request_shape_and_normalization() {
    let server = StubServer::start(vec![StubResponse::ok(
        r#"{"data": [{"index": 0, "embedding": [3.0, 4.0]}]}"#,
    )]);
    let provider = embedder(&server.url, Some("sekrit"));
    let out = provider.embed_batch(&["some text".to_string()]).unwrap();
    // [3, 4] must arrive L2-normalized.
    assert!((out[0].values[0] - 0.6).abs() < 1e-12);
    assert!((out[0].values[1] - 0.8).abs() < 1e-12);
    assert!((out[0].l2_norm() - 1.0).abs() < 1e-12);

    let bodies = server.bodies();
    let request: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
    assert_eq!(request["model"], "stub-model");
    assert_eq!(request["input"], serde_json::json!(["some text"]));
    assert!(server.headers()[0].contains("Bearer sekrit"), "bearer auth missing");
    server.join();
}

#[test]
fn embed_batch_order_restored_from_indices() {
    // Provider may answer out of order; the `index` field is authoritative.
    let server = StubServer::start(vec![StubResponse::ok(
        r#"{"data": [{"index": 1, "embedding": [0.0, 1.0]}, {"index": 0, "embedding": [1.0, 0.0]}]}"#,
    )]);
    let provider = embedder(&server.url, None);
    let out = provider
        .embed_batch(&["first".to_string(), "second".to_string()])
        .unwrap();
    assert_eq!(out[0].values, vec![1.0, 0.0]);
    assert_eq!(out[1].values, vec![0.0, 1.0]);
    server.join();
}

#[test]
fn embed_dimension_mismatch_rejected() {
    let server = StubServer::start(vec![StubResponse::ok(
        r#"{"data": [{"index": 0, "embedding": [1.0, 0.0]}, {"index": 1, "embedding": [1.0, 0.0, 0.0]}]}"#,
    )]);
    let provider = embedder(&server.url, None);
    let err = provider
        .embed_batch(&["a".to_string(), "b".to_string()])
        .unwrap_err();
    assert!(
        matches!(err, EmbedError::DimensionMismatch { expected: 2, got: 3 }),
        "got {err:?}"
    );
    server.join();
}

#[test]
fn embed_retries_then_succeeds_on_third_attempt() {
    let server = StubServer::start(vec![
        StubResponse::error(500, "transient"),
        StubResponse::error(503, "busy"),
        StubResponse::ok(r#"{"data": [{"index": 0, "embedding": [1.0, 0.0]}]}"#),
    ]);
    let provider = embedder(&server.url, None);
    let out = provider.embed_batch(&["x".to_string()]).unwrap();
    assert_eq!(out[0].values, vec![1.0, 0.0]);
    assert_eq!(server.call_count(), 3);
    server.join();
}

#[test]
fn embed_exhausted_retries_surface_api_error() {
    let server = StubServer::start(vec![
        StubResponse::error(500, "down"),
        StubResponse::error(500, "down"),
        StubResponse::error(500, "down"),
    ]);
    let provider = embedder(&server.url, None);
    let err = provider.embed_batch(&["x".to_string()]).unwrap_err();
    assert!(matches!(err, EmbedError::Api { status: 500, .. }), "got {err:?}");
    assert_eq!(server.call_count(), 3);
    server.join();
}

#[test]
fn fetch_model_card_happy_path_and_404() {
    let server = StubServer::start(vec![
        StubResponse::ok("# My Model\nA summarizer."),
        StubResponse::error(404, "missing"),
    ]);
    let card = fetch_model_card("acme/summarizer", &server.url, &fast_retry()).unwrap();
    assert!(card.contains("A summarizer."));
    // Path layout: <base>/<repo_id>/raw/main/README.md
    let headers = server.headers();
    assert!(
        headers[0].contains("GET /acme/summarizer/raw/main/README.md"),
        "unexpected request line: {}",
        headers[0].lines().next().unwrap_or("")
    );
    let err = fetch_model_card("acme/gone", &server.url, &fast_retry()).unwrap_err();
    assert!(matches!(err, CorpusError::NotFound(repo) if repo == "acme/gone"));
    server.join();
}

#[test]
fn chat_describe_tool_request_and_parse() {
    let description = r#"{"input": "russian text", "process": "classify sentiment", "output": "sentiment label"}"#;
    let server = StubServer::start(vec![StubResponse::ok(&format!(
        r#"{{"choices": [{{"message": {{"content": "Here you go: {} done."}}}}]}}"#,
        description.replace('"', "\\\"")
    ))]);
    let client = RemoteChatClient::new(&server.url, "stub-chat", Some("tok".into()))
        .with_retry(fast_retry());
    let draft = describe_tool("# Card\nClassifies sentiment of Russian text.", DescFormat::Json, &client)
        .unwrap();
    assert_eq!(draft.input, "russian text");
    assert_eq!(draft.process, "classify sentiment");
    assert_eq!(draft.output, "sentiment label");

    let request: serde_json::Value = serde_json::from_str(&server.bodies()[0]).unwrap();
    assert_eq!(request["model"], "stub-chat");
    assert_eq!(request["temperature"], 0.0);
    assert_eq!(request["messages"][0]["role"], "user");
    let text = request["messages"][0]["content"][0]["text"].as_str().unwrap();
    assert!(text.contains("Classifies sentiment of Russian text."));
    assert!(server.headers()[0].contains("Bearer tok"));
    server.join();
}

#[test]
fn chat_reprompts_once_on_unparseable_output() {
    let server = StubServer::start(vec![
        StubResponse::ok(r#"{"choices": [{"message": {"content": "no json here"}}]}"#),
        StubResponse::ok(
            r#"{"choices": [{"message": {"content": "{\"input\": \"a\", \"process\": \"b\", \"output\": \"c\"}"}}]}"#,
        ),
    ]);
    let client = RemoteChatClient::new(&server.url, "stub-chat", None).with_retry(fast_retry());
    let draft = describe_tool("card text", DescFormat::Json, &client).unwrap();
    assert_eq!(draft.process, "b");
    assert_eq!(server.call_count(), 2);
    let second: serde_json::Value = serde_json::from_str(&server.bodies()[1]).unwrap();
    let text = second["messages"][0]["content"][0]["text"].as_str().unwrap();
    assert!(text.contains("Return only a valid JSON object."));
    server.join();
}

#[test]
fn chat_task_attachments_forwarded_as_base64_parts() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("pic.png");
    std::fs::write(&img, [0x89, 0x50, 0x4e, 0x47]).unwrap();
    let query = Query {
        query_id: "q-img".into(),
        text: "what is in this picture".into(),
        attachments: vec![Attachment {
            kind: AttachmentKind::Image,
            payload_ref: img.display().to_string(),
            media_type: "image/png".into(),
        }],
        gt_tool_id: None,
    };
    let server = StubServer::start(vec![StubResponse::ok(
        r#"{"choices": [{"message": {"content": "{\"input\": \"photo\", \"process\": \"classify scene\", \"output\": \"label\"}"}}]}"#,
    )]);
    let client = RemoteChatClient::new(&server.url, "stub-chat", None).with_retry(fast_retry());
    let config = GenerationConfig::preset(DecodingStrategy::Greedy, Some(5));
    let record = describe_task(&query, DescFormat::Json, &config, &client).unwrap();
    assert!(record.parsed.is_some());

    let request: serde_json::Value = serde_json::from_str(&server.bodies()[0]).unwrap();
    let parts = request["messages"][0]["content"].as_array().unwrap();
    assert_eq!(parts.len(), 2, "prompt text + one image part");
    assert_eq!(parts[1]["type"], "image");
    assert_eq!(parts[1]["media_type"], "image/png");
    use base64::Engine;
    let decoded = base64::engine::general_purpose::STANDARD
        .decode(parts[1]["data"].as_str().unwrap())
        .unwrap();
    assert_eq!(decoded, vec![0x89, 0x50, 0x4e, 0x47]);
    server.join();
}

#[test]
fn chat_remote_failure_after_retries() {
    let server = StubServer::start(vec![
        StubResponse::error(500, "down"),
        StubResponse::error(500, "down"),
        StubResponse::error(500, "down"),
    ]);
    let client = RemoteChatClient::new(&server.url, "stub-chat", None).with_retry(fast_retry());
    let err = describe_tool("card", DescFormat::Json, &client).unwrap_err();
    assert!(err.to_string().contains("500"), "got {err}");
    assert_eq!(server.call_count(), 3);
    server.join();
}
