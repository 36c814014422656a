#![allow(dead_code)]

pub mod machine;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use clicktrack_core::refiners::{Model, ModelConfig, RefinerKind};
use clicktrack_core::training::corpus::CorpusConfig;
use clicktrack_core::training::synth::SceneConfig;
use clicktrack_service::scenes::SceneProvider;
use clicktrack_service::{router, AppState, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

pub fn corpus(frames: usize) -> CorpusConfig {
    CorpusConfig {
        train_scenes: 2,
        heldout_scenes: 2,
        sequences: 4,
        frames,
        scene: SceneConfig {
            width: 64,
            height: 64,
            whole_side: (24.0, 40.0),
            single_side: (14.0, 30.0),
            clutter: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn app(kind: RefinerKind, frames: usize) -> Router {
    app_with(kind, frames, ServiceConfig::default().max_sessions)
}

pub fn app_with(kind: RefinerKind, frames: usize, max_sessions: usize) -> Router {
    let cfg = ServiceConfig {
        corpus: corpus(frames),
        max_sessions,
        ..Default::default()
    };
    let model = Model::<f32>::new(ModelConfig::tiny(kind)).unwrap();
    let state = AppState::new(model, SceneProvider::generated(cfg.corpus.clone()), &cfg);
    router(Arc::new(state))
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

pub async fn json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    let v = serde_json::from_slice(&b).unwrap_or(Value::Null);
    (s, v)
}

pub async fn create(app: &Router, scene: &str) -> String {
    let (s, v) = json(app, "POST", "/sessions", Some(serde_json::json!({ "scene": scene }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

/// A click that refines on the tiny untrained model, searched over a grid.
pub async fn click_somewhere(app: &Router, id: &str) -> Value {
    for y in (8..60).step_by(6) {
        for x in (8..60).step_by(6) {
            let (s, v) = json(app, "POST", &format!("/sessions/{id}/click"), Some(serde_json::json!({ "x": x, "y": y }))).await;
            if s.is_success() {
                return v;
            }
        }
    }
    panic!("no click refined");
}

pub async fn snapshot(app: &Router, id: &str) -> Value {
    let (s, v) = json(app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    v
}
