mod common;

use std::collections::HashMap;
use std::fs;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use schemind::conceptualize::{
    ApiFlavor, GenerationClient, GenerationRequest, HttpClientConfig, HttpGenerationClient,
};
use schemind::pipeline::{Pipeline, StageSelection, API_KEY_ENV};
use schemind::similarity::{EmbeddingBackend, EmbeddingService, SimilarityBackend};
use schemind::GenerationError;

#[derive(Debug, Clone)]
struct Seen {
    body: serde_json::Value,
    auth: Option<String>,
}

/// Serves each request with `handler(index, body)` until the test ends.
fn serve<F>(handler: F) -> (String, Arc<Mutex<Vec<Seen>>>)
where
    F: Fn(usize, &serde_json::Value) -> (u16, String) + Send + 'static,
{
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", server.server_addr().to_ip().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (i, mut req) in server.incoming_requests().enumerate() {
            let mut raw = String::new();
            req.as_reader().read_to_string(&mut raw).unwrap();
            let body: serde_json::Value = serde_json::from_str(&raw).unwrap_or_default();
            let auth = req
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            log.lock().unwrap().push(Seen {
                body: body.clone(),
                auth,
            });
            let (status, reply) = handler(i, &body);
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
            let _ = req.respond(
                tiny_http::Response::from_string(reply)
                    .with_status_code(status)
                    .with_header(header),
            );
        }
    });
    (url, seen)
}

fn request() -> GenerationRequest {
    GenerationRequest {
        prompt: "a → Type: b, Slots: c\nd → ".into(),
        n: 2,
        max_new_tokens: 16,
        temperature: 0.7,
        stop: vec!["\n".into()],
    }
}

fn client(url: &str, flavor: ApiFlavor, retries: usize) -> HttpGenerationClient {
    let mut cfg = HttpClientConfig::new(url);
    cfg.flavor = flavor;
    cfg.retries = retries;
    cfg.backoff = Duration::from_millis(1);
    cfg.model = Some("tiny".into());
    cfg.api_key = Some("secret".into());
    HttpGenerationClient::new(cfg).unwrap()
}

#[test]
fn native_flavor() {
    let (url, seen) = serve(|_, _| (200, r#"{"completions": ["Type: x", "Type: y"]}"#.into()));
    let resp = client(&url, ApiFlavor::Native, 0)
        .generate(&request())
        .unwrap();
    assert_eq!(resp.completions, ["Type: x", "Type: y"]);
    let seen = seen.lock().unwrap();
    assert_eq!(seen[0].body["prompt"], request().prompt);
    assert_eq!(seen[0].body["n"], 2);
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer secret"));
}

#[test]
fn openai_completions_flavor() {
    let (url, seen) = serve(|_, _| {
        (
            200,
            r#"{"choices": [{"text": " Type: x", "index": 0}, {"text": "Type: y", "index": 1}]}"#
                .into(),
        )
    });
    let resp = client(&url, ApiFlavor::OpenAiCompletions, 0)
        .generate(&request())
        .unwrap();
    assert_eq!(resp.completions, [" Type: x", "Type: y"]);
    let body = &seen.lock().unwrap()[0].body;
    assert_eq!(body["model"], "tiny");
    assert_eq!(body["max_tokens"], 16);
    assert_eq!(body["stop"][0], "\n");
}

#[test]
fn retries_server_errors() {
    let (url, seen) = serve(|i, _| {
        if i < 2 {
            (503, "busy".into())
        } else {
            (200, r#"{"completions": ["Type: ok"]}"#.into())
        }
    });
    let resp = client(&url, ApiFlavor::Native, 3)
        .generate(&request())
        .unwrap();
    assert_eq!(resp.completions, ["Type: ok"]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn gives_up_after_retries() {
    let (url, seen) = serve(|_, _| (500, "down".into()));
    let err = client(&url, ApiFlavor::Native, 2)
        .generate(&request())
        .unwrap_err();
    assert!(
        matches!(err, GenerationError::Transport { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, seen) = serve(|_, _| (400, "bad request".into()));
    let err = client(&url, ApiFlavor::Native, 3)
        .generate(&request())
        .unwrap_err();
    assert!(matches!(err, GenerationError::Protocol(_)), "{err}");
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn embedding_service() {
    let (url, _) = serve(|_, body| {
        let vectors: Vec<Vec<f64>> = body["texts"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| {
                if t.as_str().unwrap().contains("kill") {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            })
            .collect();
        (200, serde_json::json!({ "vectors": vectors }).to_string())
    });
    let backend = EmbeddingBackend::from_service(EmbeddingService::new(url).unwrap());
    assert!((backend.score("kill", "killed") - 1.0).abs() < 1e-12);
    assert!((backend.score("kill", "marry") - 0.5).abs() < 1e-12);
    assert_eq!(backend.miss_count(), 0);
}

/// Answers with the scripted completions for the text on the prompt's last line.
fn scripted_server() -> (String, Arc<Mutex<Vec<Seen>>>) {
    let raw = fs::read_to_string(common::fixture_dir().join("completions.jsonl")).unwrap();
    let script: HashMap<String, serde_json::Value> = raw
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            (
                v["text"].as_str().unwrap().to_owned(),
                v["completions"].clone(),
            )
        })
        .collect();
    serve(move |_, body| {
        let prompt = body["prompt"].as_str().unwrap();
        let last = prompt.lines().last().unwrap();
        let text = last.trim_end().trim_end_matches('→').trim_end();
        (
            200,
            serde_json::json!({ "completions": script[text] }).to_string(),
        )
    })
}

#[test]
fn record_then_replay_is_identical() {
    let (url, seen) = scripted_server();
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("recorded.jsonl");

    std::env::set_var(API_KEY_ENV, "from-env");
    let mut live = common::synthetic_config(&store);
    live.endpoint.replay = None;
    live.endpoint.url = Some(url);
    live.endpoint.record = Some(store.clone());
    Pipeline::new(live, dir.path().join("live"))
        .unwrap()
        .run(StageSelection::All)
        .unwrap();
    assert_eq!(seen.lock().unwrap().len(), 30);
    assert!(seen
        .lock()
        .unwrap()
        .iter()
        .all(|s| s.auth.as_deref() == Some("Bearer from-env")));

    let replay = common::synthetic_config(&store);
    Pipeline::new(replay, dir.path().join("replay"))
        .unwrap()
        .run(StageSelection::All)
        .unwrap();
    for file in ["conceptualized.jsonl", "schemas.jsonl", "schemas.txt"] {
        let a = fs::read(dir.path().join("live").join(file)).unwrap();
        let b = fs::read(dir.path().join("replay").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    // the recorded store matches the committed hand-built fixture
    assert_eq!(
        fs::read_to_string(&store).unwrap(),
        fs::read_to_string(common::fixture_dir().join("replay.jsonl")).unwrap()
    );
}
