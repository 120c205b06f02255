use std::collections::BTreeMap;

use serde_json::{json, Value};
use shuntgate_core::backends::SimulatedOracleConfig;
use shuntgate_core::harness::dominance_config;
use shuntgate_server::{spawn_local, ServerConfig};

async fn start(gold: BTreeMap<String, String>) -> String {
    let mut oracle = SimulatedOracleConfig::with_accuracy(1.0, 3);
    oracle.name = "test-oracle".into();
    let cfg = ServerConfig {
        oracle,
        gold,
        runs_root: tempfile::tempdir().unwrap().keep(),
    };
    format!("http://{}", spawn_local(cfg).await.unwrap())
}

async fn post(url: &str, body: Value) -> (u16, Value) {
    let resp = reqwest::Client::new().post(url).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test]
async fn health_reports_ok() {
    let base = start(BTreeMap::new()).await;
    let body: Value = reqwest::get(format!("{base}/health"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn classify_speaks_the_wire_protocol() {
    let base = start(BTreeMap::from([("q7".to_string(), "no".to_string())])).await;
    let (status, body) = post(
        &format!("{base}/v1/classify"),
        json!({"id": "q7", "payload": "was it delivered on time", "candidates": ["yes", "no"], "prompt": null}),
    )
    .await;
    assert_eq!(status, 200);
    let keys: Vec<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 4);
    for k in ["probs", "class_ids", "input_tokens", "output_tokens"] {
        assert!(keys.contains(&k), "{k}");
    }
    assert_eq!(body["class_ids"], json!(["yes", "no"]));
    // perfect oracle with a known gold label
    assert!(body["probs"][1].as_f64().unwrap() > body["probs"][0].as_f64().unwrap());
    assert_eq!(body["input_tokens"], 5);
}

#[tokio::test]
async fn prompt_tokens_are_billed_when_present() {
    let base = start(BTreeMap::new()).await;
    let (_, body) = post(
        &format!("{base}/v1/classify"),
        json!({"id": "a", "payload": "one two three", "candidates": ["x", "y"], "prompt": "just two"}),
    )
    .await;
    assert_eq!(body["input_tokens"], 2);
}

#[tokio::test]
async fn errors_carry_kind_and_status() {
    let base = start(BTreeMap::new()).await;
    let (status, body) = post(&format!("{base}/v1/classify"), json!({"id": "a"})).await;
    assert_eq!(status, 400);
    assert_eq!(body["kind"], "validation");
    assert!(body["message"].as_str().unwrap().contains("bad request body"));

    let (status, body) = post(
        &format!("{base}/v1/ingest"),
        json!({"format": "jsonl", "content": "{\"id\":\"a\",\"payload\":\"x\"}\n{\"id\":\"b\"}\n"}),
    )
    .await;
    assert_eq!(status, 400);
    assert!(body["message"].as_str().unwrap().starts_with("line 2"), "{body}");
}

#[tokio::test]
async fn calibrate_and_route_over_http() {
    let base = start(BTreeMap::new()).await;
    let mut cfg = dominance_config(4);
    if let shuntgate_core::harness::DataSpec::Synthetic { task, .. } = &mut cfg.data {
        task.n_samples = 800;
    }
    let config = serde_json::to_value(&cfg).unwrap();
    let (status, cal) = post(
        &format!("{base}/v1/calibrate"),
        json!({"config": config, "grid": "0.85:0.99:0.01", "objective": "match_large"}),
    )
    .await;
    assert_eq!(status, 200, "{cal}");
    assert_eq!(cal["sweep"].as_array().unwrap().len(), 15);

    let input = json!([
        {"id": "u1", "payload": [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]},
        {"id": "u2", "payload": [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]}
    ]);
    let (status, routed) = post(&format!("{base}/v1/route"), json!({"config": config, "input": input})).await;
    assert_eq!(status, 200, "{routed}");
    assert_eq!(routed["outcomes"].as_array().unwrap().len(), 2);
    assert_eq!(routed["outcomes"][0]["sample_id"], "u1");
}
