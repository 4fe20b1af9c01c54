use std::net::TcpListener;
use std::time::{Duration, Instant};

use fragility_core::lingua::{
    run_drift_audit, sample_corpus, AuditOptions, CompletionBackend, EndpointError, FailureMode, HttpBackend,
    InferenceEndpoint, ParsedLabel,
};
use fragility_core::Error;
use mockito::Matcher;
use serde_json::json;

fn endpoint(url: &str) -> InferenceEndpoint {
    InferenceEndpoint {
        backoff_ms: 1,
        timeout_ms: 2_000,
        ..InferenceEndpoint::new(url, "test-model")
    }
}

#[test]
fn retries_server_errors_then_succeeds() {
    let mut server = mockito::Server::new();
    let failing = server
        .mock("POST", "/api/generate")
        .with_status(500)
        .with_body("overloaded")
        .expect(2)
        .create();
    let ok = server
        .mock("POST", "/api/generate")
        .match_body(Matcher::PartialJson(json!({
            "model": "test-model",
            "stream": false,
            "options": { "temperature": 0.0 },
        })))
        .with_status(200)
        .with_body(r#"{"model":"test-model","response":"Normal","done":true}"#)
        .expect(1)
        .create();
    let backend = HttpBackend::new(endpoint(&server.url())).unwrap();
    let c = backend.complete("prompt").unwrap();
    assert_eq!(c.text, "Normal");
    assert_eq!(c.attempts, 3);
    failing.assert();
    ok.assert();
}

#[test]
fn exhausted_retries_report_the_last_status() {
    let mut server = mockito::Server::new();
    let m = server.mock("POST", "/api/generate").with_status(503).expect(3).create();
    let backend = HttpBackend::new(InferenceEndpoint {
        max_retries: 2,
        ..endpoint(&server.url())
    })
    .unwrap();
    match backend.complete("p") {
        Err(EndpointError::Status { status, attempts, .. }) => assert_eq!((status, attempts), (503, 3)),
        other => panic!("unexpected {other:?}"),
    }
    m.assert();
}

#[test]
fn client_errors_are_not_retried() {
    let mut server = mockito::Server::new();
    let m = server.mock("POST", "/api/generate").with_status(404).expect(1).create();
    let backend = HttpBackend::new(endpoint(&server.url())).unwrap();
    match backend.complete("p") {
        Err(EndpointError::Status { status: 404, attempts: 1, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
    m.assert();
}

#[test]
fn malformed_reply_is_a_protocol_error() {
    let mut server = mockito::Server::new();
    server.mock("POST", "/api/generate").with_status(200).with_body("<html>").create();
    let backend = HttpBackend::new(endpoint(&server.url())).unwrap();
    assert!(matches!(backend.complete("p"), Err(EndpointError::Protocol { .. })));
}

#[test]
fn silent_server_times_out() {
    // Accepts connections and never answers.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let backend = HttpBackend::new(InferenceEndpoint {
        timeout_ms: 200,
        max_retries: 1,
        ..endpoint(&url)
    })
    .unwrap();
    let start = Instant::now();
    match backend.complete("p") {
        Err(EndpointError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("unexpected {other:?}"),
    }
    assert!(start.elapsed() < Duration::from_secs(5));
    drop(listener);
}

#[test]
fn refused_connection_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(InferenceEndpoint {
        max_retries: 0,
        ..endpoint(&format!("http://127.0.0.1:{port}"))
    })
    .unwrap();
    assert!(matches!(backend.complete("p"), Err(EndpointError::Transport { attempts: 1, .. })));
}

#[test]
fn strict_audit_aborts_and_lenient_audit_records() {
    let mut server = mockito::Server::new();
    server.mock("POST", "/api/generate").with_status(500).create();
    let backend = HttpBackend::new(InferenceEndpoint {
        max_retries: 0,
        ..endpoint(&server.url())
    })
    .unwrap();
    let corpus = sample_corpus();
    let strict = run_drift_audit(&backend, &corpus, &AuditOptions::default());
    assert!(matches!(strict, Err(Error::Endpoint(_))));

    let lenient = AuditOptions {
        mode: FailureMode::Lenient,
        parallelism: 4,
    };
    let profile = run_drift_audit(&backend, &corpus, &lenient).unwrap();
    assert_eq!(profile.outcomes.len(), corpus.len());
    assert!(profile
        .outcomes
        .iter()
        .all(|o| o.parsed == ParsedLabel::Unparseable && o.error.is_some()));
    assert!(profile.registers.iter().all(|s| s.accuracy == 0.0 && s.unparseable == s.cases));
}

#[test]
fn nonzero_temperature_is_rejected_before_any_request() {
    let mut server = mockito::Server::new();
    let m = server.mock("POST", "/api/generate").expect(0).create();
    let backend = HttpBackend::new(InferenceEndpoint {
        temperature: 0.7,
        ..endpoint(&server.url())
    })
    .unwrap();
    assert!(matches!(
        run_drift_audit(&backend, &sample_corpus(), &AuditOptions::default()),
        Err(Error::Validation(_))
    ));
    m.assert();
}
