mod common;

use std::time::Instant;

use axum::http::StatusCode;
use base64::Engine;
use clicktrack_core::refiners::RefinerKind;
use clicktrack_core::training::corpus::Split;
use clicktrack_core::Image;
use common::*;
use serde_json::json;

#[tokio::test]
async fn create_from_scene_echoes_contract() {
    let app = app(RefinerKind::Gcr, 6);
    let (s, v) = json(&app, "POST", "/sessions", Some(json!({ "scene": "0001" }))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["frames"], 6);
    assert_eq!(v["state"], "awaiting_click");
    let other = create(&app, "0001").await;
    assert_ne!(v["id"].as_str().unwrap(), other);
}

#[tokio::test]
async fn unknown_scene_and_session_are_not_found() {
    let app = app(RefinerKind::Gcr, 6);
    for scene in ["9999", "../etc", "abc"] {
        let (s, v) = json(&app, "POST", "/sessions", Some(json!({ "scene": scene }))).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        assert_eq!(v["code"], "not_found");
    }
    let (s, v) = json(&app, "GET", "/sessions/nope", None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}

#[tokio::test]
async fn out_of_bounds_click_leaves_state_unchanged() {
    let app = app(RefinerKind::Gcr, 6);
    let id = create(&app, "0000").await;
    let (s, v) = json(&app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": -5.0, "y": 10.0 }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "out_of_bounds");
    assert_eq!(snapshot(&app, &id).await["state"], "awaiting_click");
    let (s, v) = json(&app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": 30, "y": 30, "category": "spaceship" }))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("unknown_category")));
    let (s, v) = json(&app, "POST", &format!("/sessions/{id}/track"), None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::CONFLICT, Some("invalid_state")));
}

#[tokio::test]
async fn click_track_and_replay_stream() {
    let app = app(RefinerKind::Gcr, 6);
    let id = create(&app, "0002").await;
    let v = click_somewhere(&app, &id).await;
    assert_eq!(v["state"], "refined");
    assert_eq!(v["output"]["iou_scores"].as_array().unwrap().len(), 2);
    assert!(v["latency_ms"].as_f64().unwrap() > 0.0);
    let (s, v) = json(&app, "POST", &format!("/sessions/{id}/track?wait=true"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["state"], "finished");

    let snap = snapshot(&app, &id).await;
    let frames: Vec<u64> = snap["results"].as_array().unwrap().iter().map(|r| r["frame"].as_u64().unwrap()).collect();
    assert_eq!(frames, vec![1, 2, 3, 4, 5]);

    let (s, body) = call(&app, "GET", &format!("/sessions/{id}/stream"), None).await;
    assert_eq!(s, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    let events: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("event: ")).collect();
    assert_eq!(events, vec!["frame", "frame", "frame", "frame", "frame", "finished"]);
    let (_, again) = call(&app, "GET", &format!("/sessions/{id}/stream"), None).await;
    assert_eq!(String::from_utf8(again).unwrap(), text);

    let (s, _) = json(&app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": 30, "y": 30 }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn frames_are_bit_exact_and_bounded() {
    let app = app(RefinerKind::Pfr, 6);
    let id = create(&app, "0003").await;
    let (s, png) = call(&app, "GET", &format!("/sessions/{id}/frames/0"), None).await;
    assert_eq!(s, StatusCode::OK);
    let expected = corpus(6).source(Split::Sequences).get(3).unwrap().frames[0].clone();
    assert_eq!(Image::decode_png(&png).unwrap(), expected);
    let (s, v) = json(&app, "GET", &format!("/sessions/{id}/frames/6"), None).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}

#[tokio::test]
async fn correction_retains_earlier_results() {
    let app = app(RefinerKind::Pfr, 8);
    let id = create(&app, "0000").await;
    json(&app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": 32, "y": 32 }))).await;
    json(&app, "POST", &format!("/sessions/{id}/track?wait=true"), None).await;
    let before = snapshot(&app, &id).await["results"].clone();

    let (s, v) = json(&app, "POST", &format!("/sessions/{id}/correct?wait=true"), Some(json!({ "frame": 4, "x": 20, "y": 20 }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let after = snapshot(&app, &id).await;
    assert_eq!(after["state"], "finished");
    let results = after["results"].as_array().unwrap();
    assert_eq!(results.len(), 7);
    assert_eq!(&results[..3], &before.as_array().unwrap()[..3]);
    assert_eq!(results[3]["box"], v["output"]["final_box"]);

    let (s, v) = json(&app, "POST", &format!("/sessions/{id}/correct"), Some(json!({ "frame": 8, "x": 20, "y": 20 }))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}

#[tokio::test]
async fn correction_at_frame_zero_matches_click_then_track() {
    let app = app(RefinerKind::Pfr, 6);
    let a = create(&app, "0001").await;
    json(&app, "POST", &format!("/sessions/{a}/click"), Some(json!({ "x": 30, "y": 28 }))).await;
    json(&app, "POST", &format!("/sessions/{a}/track?wait=true"), None).await;
    let b = create(&app, "0001").await;
    let (s, _) = json(&app, "POST", &format!("/sessions/{b}/correct?wait=true"), Some(json!({ "frame": 0, "x": 30, "y": 28 }))).await;
    assert_eq!(s, StatusCode::OK);
    let (sa, sb) = (snapshot(&app, &a).await, snapshot(&app, &b).await);
    assert_eq!(sa["results"], sb["results"]);
    assert_eq!(sb["state"], "finished");
}

#[tokio::test]
async fn later_correction_wins() {
    let app = app(RefinerKind::Pfr, 8);
    let id = create(&app, "0002").await;
    json(&app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": 32, "y": 32 }))).await;
    json(&app, "POST", &format!("/sessions/{id}/track?wait=true"), None).await;
    json(&app, "POST", &format!("/sessions/{id}/correct?wait=true"), Some(json!({ "frame": 2, "x": 20, "y": 20 }))).await;
    let (_, second) = json(&app, "POST", &format!("/sessions/{id}/correct?wait=true"), Some(json!({ "frame": 3, "x": 40, "y": 40 }))).await;
    let snap = snapshot(&app, &id).await;
    assert_eq!(snap["results"][2]["box"], second["output"]["final_box"]);
    assert_eq!(snap["refinements"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn uploads_are_decoded_and_validated() {
    let app = app(RefinerKind::Bfr, 6);
    let frame = Image::filled(48, 40, [0.2, 0.4, 0.6]);
    let b64 = base64::engine::general_purpose::STANDARD.encode(frame.encode_png().unwrap());
    let (s, v) = json(&app, "POST", "/sessions", Some(json!({ "frames": [b64, b64] }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!((v["frames"].as_u64(), v["width"].as_u64()), (Some(2), Some(48)));
    let id = v["id"].as_str().unwrap();
    let (s, _) = json(&app, "GET", &format!("/sessions/{id}/ground-truth"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    for bad in [json!({ "frames": ["***"] }), json!({ "frames": ["aGVsbG8="] }), json!({ "frames": [] })] {
        let (s, v) = json(&app, "POST", "/sessions", Some(bad)).await;
        assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("malformed_upload")));
    }
    let (s, v) = json(&app, "POST", "/sessions", Some(json!({ "scene": "0000", "frames": [b64] }))).await;
    assert_eq!((s, v["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));
}

#[tokio::test]
async fn reported_latency_matches_wall_clock() {
    let app = app(RefinerKind::Gcr, 4);
    let id = create(&app, "0000").await;
    click_somewhere(&app, &id).await;
    let id = create(&app, "0000").await;
    let snapshot_id = id.clone();
    let mut checked = 0;
    for (x, y) in [(20, 20), (30, 30), (40, 25), (25, 40)] {
        let start = Instant::now();
        let (s, v) = json(&app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": x, "y": y }))).await;
        let wall = start.elapsed().as_secs_f64() * 1e3;
        if s.is_success() {
            let latency = v["latency_ms"].as_f64().unwrap();
            assert!(latency <= wall && wall - latency < 5.0, "latency {latency} wall {wall}");
            checked += 1;
        }
    }
    assert!(checked > 0);
    let snap = snapshot(&app, &snapshot_id).await;
    assert_eq!(snap["latencies_ms"].as_array().unwrap().len(), checked);
}

#[tokio::test]
async fn vocabulary_is_served() {
    let app = app(RefinerKind::Gcr, 4);
    let (s, v) = json(&app, "GET", "/vocabulary", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(v["vocabulary"].as_array().unwrap().iter().any(|t| t == "plate"));
    let id = create(&app, "0000").await;
    let (s, v) = json(&app, "GET", &format!("/sessions/{id}/ground-truth"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["objects"][0]["boxes"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn full_service_drops_least_recently_updated_session() {
    let app = app_with(RefinerKind::Pfr, 4, 2);
    let pause = || tokio::time::sleep(std::time::Duration::from_millis(5));
    let a = create(&app, "0000").await;
    pause().await;
    let b = create(&app, "0001").await;
    pause().await;
    click_somewhere(&app, &a).await;
    pause().await;
    let c = create(&app, "0002").await;
    assert_eq!(json(&app, "GET", &format!("/sessions/{b}"), None).await.0, StatusCode::NOT_FOUND);
    for id in [&a, &c] {
        assert_eq!(json(&app, "GET", &format!("/sessions/{id}"), None).await.0, StatusCode::OK);
    }
}
