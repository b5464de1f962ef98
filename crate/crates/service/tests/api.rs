mod common;

use std::time::Duration;

use common::*;
use hilo_core::protocol::{Session, SessionConfig};
use serde_json::{json, Value};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn default_batch_session_completes_with_70_records() {
    let base = spawn_server().await;
    let c = reqwest::Client::new();
    let id = create_id(&c, &base, json!({})).await;
    let status = wait_for(&c, &base, &id, Duration::from_secs(120), |v| v["status"]["state"] == "completed").await;
    assert_eq!(status["archive_len"], 70);
    assert_eq!(status["mode"], "batch");
    let (code, results) = get(&c, format!("http://{base}/sessions/{id}/results")).await;
    assert_eq!(code, 200);
    assert_eq!(results["archive"].as_array().unwrap().len(), 70);
    assert_eq!(results["reports"].as_array().unwrap().len(), 2);
    assert_eq!(results["history"].as_array().unwrap().len(), 11);
    let summary = results["analysis"]["summary"].as_str().unwrap();
    assert!(summary.starts_with("kind,name,statistic"));
    assert!(summary.contains("effect,condition,"));
}

#[tokio::test]
async fn invalid_configs_name_the_field() {
    let base = spawn_server().await;
    let c = reqwest::Client::new();
    let cases = [
        (json!({ "trial_s": 10.0, "discard_s": 15.0 }), "trial_s"),
        (json!({ "lambda": 1 }), "lambda"),
        (json!({ "bogus": 1 }), "bogus"),
        (json!({ "days": "two" }), "days"),
        (json!({ "plant": { "tau_learn": -1.0 } }), "plant.tau_learn"),
    ];
    for (body, field) in cases {
        let r = create(&c, &base, body.clone()).await;
        assert_eq!(r.status(), 422, "{body}");
        let v: Value = r.json().await.unwrap();
        assert_eq!(v["field"], field, "{body} -> {v}");
    }
}

#[tokio::test]
async fn unknown_and_malformed_ids_are_not_found() {
    let base = spawn_server().await;
    let c = reqwest::Client::new();
    for id in ["not-a-uuid", "00000000-0000-0000-0000-000000000000"] {
        for suffix in ["", "/results", "/last_trial"] {
            let (code, v) = get(&c, format!("http://{base}/sessions/{id}{suffix}")).await;
            assert_eq!(code, 404);
            assert!(v["error"].as_str().unwrap().contains(id));
        }
        let r = c.post(format!("http://{base}/sessions/{id}/start")).send().await.unwrap();
        assert_eq!(r.status(), 404);
    }
}

#[tokio::test]
async fn fresh_live_session_is_empty() {
    let base = spawn_server().await;
    let c = reqwest::Client::new();
    let id = create_id(&c, &base, json!({ "live": true })).await;
    let (_, status) = get(&c, format!("http://{base}/sessions/{id}")).await;
    assert_eq!(status["status"]["state"], "waiting");
    assert_eq!(status["phase"], "idle");
    let (_, results) = get(&c, format!("http://{base}/sessions/{id}/results")).await;
    assert_eq!(results["archive"], json!([]));
    assert_eq!(results["analysis"], Value::Null);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn interleaved_sessions_stay_isolated() {
    let base = spawn_server().await;
    let c = reqwest::Client::new();
    let short = |seed: u64| {
        json!({ "seed": seed, "days": 1, "generations_per_day": 2, "trial_s": 5.0, "discard_s": 1.0,
                "validation_trial_s": 5.0, "validation_rounds": 2 })
    };
    let a = create_id(&c, &base, short(1)).await;
    let b = create_id(&c, &base, short(2)).await;
    let a2 = create_id(&c, &base, short(1)).await;
    assert!(a != b && a != a2);
    let mut archives = Vec::new();
    for id in [&a, &b, &a2] {
        wait_for(&c, &base, id, Duration::from_secs(60), |v| v["status"]["state"] == "completed").await;
        let (_, r) = get(&c, format!("http://{base}/sessions/{id}/results")).await;
        archives.push(r["archive"].clone());
    }
    // Each equals an in-process run of its own config.
    for (archive, seed) in archives.iter().zip([1, 2, 1]) {
        let cfg: SessionConfig = serde_json::from_value(short(seed)).unwrap();
        let mut s = Session::new(cfg).unwrap();
        s.run_to_end().unwrap();
        assert_eq!(archive, &serde_json::to_value(s.archive.records()).unwrap());
    }
    assert_ne!(archives[0], archives[1]);
}

#[tokio::test]
async fn stream_is_refused_for_batch_sessions() {
    let base = spawn_server().await;
    let c = reqwest::Client::new();
    let id = create_id(&c, &base, json!({ "days": 1, "generations_per_day": 1, "trial_s": 2.0, "discard_s": 1.0,
                                          "validation_trial_s": 2.0 })).await;
    let err = tokio_tungstenite::connect_async(format!("ws://{base}/sessions/{id}/stream")).await.unwrap_err();
    assert!(err.to_string().contains("409"), "{err}");
}
