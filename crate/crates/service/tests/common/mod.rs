#![allow(dead_code)]

use std::time::Duration;

use hilo_service::{router, Registry};
use serde_json::Value;

pub async fn spawn_server() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, router(Registry::new(None))).await.unwrap();
    });
    format!("127.0.0.1:{}", addr.port())
}

pub async fn create(client: &reqwest::Client, base: &str, config: Value) -> reqwest::Response {
    client.post(format!("http://{base}/sessions")).json(&config).send().await.unwrap()
}

pub async fn create_id(client: &reqwest::Client, base: &str, config: Value) -> String {
    let r = create(client, base, config).await;
    assert_eq!(r.status(), 201);
    r.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string()
}

pub async fn get(client: &reqwest::Client, url: String) -> (u16, Value) {
    let r = client.get(url).send().await.unwrap();
    (r.status().as_u16(), r.json().await.unwrap())
}

/// Polls the status endpoint until `done` holds or `limit` passes.
pub async fn wait_for(client: &reqwest::Client, base: &str, id: &str, limit: Duration, done: impl Fn(&Value) -> bool) -> Value {
    let start = std::time::Instant::now();
    loop {
        let (_, v) = get(client, format!("http://{base}/sessions/{id}")).await;
        if done(&v) {
            return v;
        }
        assert!(start.elapsed() < limit, "timed out waiting; last status {v}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}
