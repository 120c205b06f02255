use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use shuntgate_core::backends::{call_remote, RemoteBackend, RemoteConfig, WireRequest, WireResponse};
use shuntgate_core::ShuntError;

/// Spawns `app` on an ephemeral port in a background runtime and returns its base url.
fn serve(app: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn request() -> WireRequest {
    WireRequest {
        id: "q1".into(),
        payload: "is this refundable".into(),
        candidates: vec!["yes".into(), "no".into()],
        prompt: None,
    }
}

fn backend(url: String, retries: u32) -> RemoteBackend {
    RemoteBackend::new(RemoteConfig {
        max_retries: retries,
        backoff_ms: 1,
        timeout_ms: 5_000,
        ..RemoteConfig::new(url)
    })
    .unwrap()
}

#[test]
fn wire_shapes_are_exact() {
    let body = serde_json::to_string(&request()).unwrap();
    assert_eq!(
        body,
        r#"{"id":"q1","payload":"is this refundable","candidates":["yes","no"],"prompt":null}"#
    );
    let resp: WireResponse =
        serde_json::from_str(r#"{"probs":[0.25,0.75],"class_ids":["no","yes"],"input_tokens":3,"output_tokens":1}"#)
            .unwrap();
    assert_eq!(
        serde_json::to_string(&resp).unwrap(),
        r#"{"probs":[0.25,0.75],"class_ids":["no","yes"],"input_tokens":3,"output_tokens":1}"#
    );
}

#[test]
fn response_is_aligned_to_request_order() {
    let app = Router::new().route(
        "/classify",
        post(|Json(req): Json<WireRequest>| async move {
            assert_eq!(req.candidates, vec!["yes", "no"]);
            Json(WireResponse {
                probs: vec![0.2, 0.8],
                class_ids: vec!["no".into(), "yes".into()],
                input_tokens: 3,
                output_tokens: 1,
            })
        }),
    );
    let url = serve(app);
    let (probs, usage) = call_remote(&backend(format!("{url}/classify"), 0), &request()).unwrap();
    assert_eq!(probs.class_ids(), &["yes".to_string(), "no".to_string()]);
    assert_eq!(probs.probs(), &[0.8, 0.2]);
    assert_eq!((usage.input_tokens, usage.output_tokens), (3, 1));
}

#[test]
fn server_errors_are_retried_then_reported() {
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    let app = Router::new().route(
        "/classify",
        post(move || {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            async move {
                if n < 2 {
                    Err(StatusCode::SERVICE_UNAVAILABLE)
                } else {
                    Ok(Json(WireResponse {
                        probs: vec![0.6, 0.4],
                        class_ids: vec!["yes".into(), "no".into()],
                        input_tokens: 3,
                        output_tokens: 1,
                    }))
                }
            }
        }),
    );
    let url = serve(app);
    assert!(call_remote(&backend(format!("{url}/classify"), 2), &request()).is_ok());
    assert_eq!(hits.load(Ordering::SeqCst), 3);

    let down = serve(Router::new().route("/classify", post(|| async { StatusCode::BAD_GATEWAY })));
    match call_remote(&backend(format!("{down}/classify"), 1), &request()) {
        Err(ShuntError::Transport { attempts, .. }) => assert_eq!(attempts, 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn bad_mass_and_missing_candidates_are_protocol_errors() {
    let app = Router::new()
        .route(
            "/mass",
            post(|| async {
                Json(WireResponse {
                    probs: vec![0.5, 0.3],
                    class_ids: vec!["yes".into(), "no".into()],
                    input_tokens: 1,
                    output_tokens: 1,
                })
            }),
        )
        .route(
            "/missing",
            post(|| async {
                Json(WireResponse {
                    probs: vec![0.5, 0.5],
                    class_ids: vec!["yes".into(), "maybe".into()],
                    input_tokens: 1,
                    output_tokens: 1,
                })
            }),
        )
        .route("/reject", post(|| async { StatusCode::BAD_REQUEST }));
    let url = serve(app);
    for path in ["mass", "missing", "reject"] {
        let err = call_remote(&backend(format!("{url}/{path}"), 3), &request()).unwrap_err();
        assert!(matches!(err, ShuntError::Protocol(_)), "{path}: {err}");
    }
}

#[test]
fn unreachable_host_is_transport() {
    let err = call_remote(&backend("http://127.0.0.1:9/classify".into(), 0), &request()).unwrap_err();
    assert_eq!(err.kind().exit_code(), 2);
}
