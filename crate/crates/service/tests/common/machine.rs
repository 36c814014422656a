//! Model of the session transition rules, checked against random request
//! sequences.

use axum::http::StatusCode;
use axum::Router;
use proptest::prelude::*;
use serde_json::{json, Value};

use super::{call, create, json, snapshot};

pub const FRAMES: usize = 5;
pub const SIZE: f64 = 64.0;

#[derive(Debug, Clone)]
pub enum Op {
    Create(usize),
    Click { s: usize, x: f64, y: f64, cat: u8 },
    Track { s: usize, wait: bool },
    Correct { s: usize, frame: usize, x: f64, y: f64, cat: u8 },
    Get(usize),
    Frame { s: usize, index: usize },
    Unknown,
}

pub fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![8 => 2.0..62.0, 1 => -10.0..0.0, 1 => 64.0..80.0]
}

pub fn op() -> impl Strategy<Value = Op> {
    let s = 0..4usize;
    prop_oneof![
        1 => (0..3usize).prop_map(Op::Create),
        6 => (s.clone(), coord(), coord(), 0..3u8).prop_map(|(s, x, y, cat)| Op::Click { s, x, y, cat }),
        4 => (s.clone(), any::<bool>()).prop_map(|(s, wait)| Op::Track { s, wait }),
        4 => (s.clone(), 0..=FRAMES, coord(), coord(), 0..3u8)
            .prop_map(|(s, frame, x, y, cat)| Op::Correct { s, frame, x, y, cat }),
        2 => s.clone().prop_map(Op::Get),
        1 => (s, 0..=FRAMES).prop_map(|(s, index)| Op::Frame { s, index }),
        1 => Just(Op::Unknown),
    ]
}

fn category(c: u8) -> Value {
    match c {
        0 => Value::Null,
        1 => json!("plate"),
        _ => json!("no-such-thing"),
    }
}

fn inside(x: f64, y: f64) -> bool {
    (0.0..SIZE).contains(&x) && (0.0..SIZE).contains(&y)
}

#[derive(Debug, Clone)]
struct Seen {
    state: String,
    generation: u64,
    results: usize,
    refinements: usize,
}

fn seen(v: &Value) -> Seen {
    Seen {
        state: v["state"].as_str().unwrap().to_string(),
        generation: v["generation"].as_u64().unwrap(),
        results: v["results"].as_array().unwrap().len(),
        refinements: v["refinements"].as_array().unwrap().len(),
    }
}

/// Invariants that hold for any snapshot.
pub fn check_snapshot(v: &Value) -> Result<(), String> {
    let state = v["state"].as_str().ok_or("no state")?;
    let results = v["results"].as_array().ok_or("no results")?;
    if !["awaiting_click", "refined", "tracking", "finished", "error"].contains(&state) {
        return Err(format!("bad state {state}"));
    }
    if results.len() > FRAMES - 1 {
        return Err("more results than frames".into());
    }
    for (i, r) in results.iter().enumerate() {
        if r["frame"].as_u64() != Some(i as u64 + 1) {
            return Err(format!("result {i} has frame {}", r["frame"]));
        }
        let b = &r["box"];
        let c: Vec<f64> = b.as_array().ok_or("box is not an array")?.iter().filter_map(Value::as_f64).collect();
        let [x0, y0, x1, y1] = c[..] else {
            return Err(format!("malformed box {b}"));
        };
        if !(0.0 <= x0 && x0 < x1 && x1 <= SIZE && 0.0 <= y0 && y0 < y1 && y1 <= SIZE) {
            return Err(format!("invalid box {b}"));
        }
    }
    let refinements = v["refinements"].as_array().unwrap().len();
    match state {
        "awaiting_click" if !results.is_empty() || refinements != 0 => Err("awaiting_click with history".into()),
        "finished" if results.len() != FRAMES - 1 => Err(format!("finished with {} results", results.len())),
        "refined" | "tracking" | "finished" if refinements == 0 => Err(format!("{state} without a refinement")),
        _ => Ok(()),
    }
}

fn check_error(status: StatusCode, body: &Value, allowed: &[(StatusCode, &str)]) -> Result<(), String> {
    let code = body["code"].as_str().unwrap_or("");
    if body["message"].as_str().is_none() {
        return Err(format!("error without message: {body}"));
    }
    if allowed.iter().any(|&(s, c)| s == status && c == code) {
        Ok(())
    } else {
        Err(format!("unexpected {status} {body}"))
    }
}

const UNPROCESSABLE: StatusCode = StatusCode::UNPROCESSABLE_ENTITY;

pub async fn run(app: &Router, ops: &[Op]) -> Result<usize, String> {
    let mut ids: Vec<String> = Vec::new();
    let mut last: Vec<Seen> = Vec::new();
    for scene in ["0000", "0001", "0002", "0003"] {
        ids.push(create(app, scene).await);
        last.push(seen(&snapshot(app, ids.last().unwrap()).await));
    }
    let mut accepted = 0;
    for op in ops {
        let s = match op {
            Op::Click { s, .. } | Op::Track { s, .. } | Op::Correct { s, .. } | Op::Get(s) | Op::Frame { s, .. } => *s,
            Op::Create(_) | Op::Unknown => 0,
        };
        let id = ids[s].clone();
        let prev = last[s].clone();
        match op {
            Op::Create(scene) => {
                let (st, v) = json(app, "POST", "/sessions", Some(json!({ "scene": format!("{scene:04}") }))).await;
                if st != StatusCode::CREATED || v["state"] != "awaiting_click" || v["frames"] != FRAMES {
                    return Err(format!("create: {st} {v}"));
                }
                // Recycle the slot so sessions keep being fresh.
                let slot = *scene % ids.len();
                ids[slot] = v["id"].as_str().unwrap().to_string();
                last[slot] = seen(&snapshot(app, &ids[slot]).await);
                accepted += 1;
                continue;
            }
            Op::Unknown => {
                let (st, v) = json(app, "POST", "/sessions/s999999/track", None).await;
                check_error(st, &v, &[(StatusCode::NOT_FOUND, "not_found")])?;
                continue;
            }
            _ => {}
        }
        let (st, v) = match op {
            Op::Click { x, y, cat, .. } => {
                json(app, "POST", &format!("/sessions/{id}/click"), Some(json!({ "x": x, "y": y, "category": category(*cat) }))).await
            }
            Op::Track { wait, .. } => json(app, "POST", &format!("/sessions/{id}/track?wait={wait}"), None).await,
            Op::Correct { frame, x, y, cat, .. } => {
                json(
                    app,
                    "POST",
                    &format!("/sessions/{id}/correct"),
                    Some(json!({ "frame": frame, "x": x, "y": y, "category": category(*cat) })),
                )
                .await
            }
            Op::Get(_) => json(app, "GET", &format!("/sessions/{id}"), None).await,
            Op::Frame { index, .. } => {
                let (st, body) = call(app, "GET", &format!("/sessions/{id}/frames/{index}"), None).await;
                let v = if st.is_success() { Value::Null } else { serde_json::from_slice(&body).unwrap() };
                if (*index < FRAMES) != st.is_success() {
                    return Err(format!("frame {index}: {st}"));
                }
                (st, v)
            }
            Op::Create(_) | Op::Unknown => unreachable!(),
        };
        let snap = snapshot(app, &id).await;
        check_snapshot(&snap).map_err(|e| format!("{op:?}: {e}"))?;
        let now = seen(&snap);
        if now.generation < prev.generation || now.refinements < prev.refinements {
            return Err(format!("{op:?}: history went backwards {prev:?} -> {now:?}"));
        }
        let ok = st.is_success();
        accepted += ok as usize;
        let p = prev.state.as_str();
        match op {
            Op::Click { x, y, cat, .. } => {
                let allowed = matches!(p, "awaiting_click" | "refined");
                if ok {
                    if !allowed || !inside(*x, *y) || *cat == 2 || now.state != "refined" {
                        return Err(format!("click accepted from {p}: {v} -> {now:?}"));
                    }
                    if now.refinements != prev.refinements + 1 {
                        return Err("click not recorded".into());
                    }
                } else {
                    let expect: &[(StatusCode, &str)] = if !allowed {
                        &[(StatusCode::CONFLICT, "invalid_state")]
                    } else if !inside(*x, *y) {
                        &[(UNPROCESSABLE, "out_of_bounds")]
                    } else if *cat == 2 {
                        &[(UNPROCESSABLE, "unknown_category")]
                    } else {
                        &[(UNPROCESSABLE, "refinement_failed")]
                    };
                    check_error(st, &v, expect).map_err(|e| format!("click from {p}: {e}"))?;
                    if now.refinements != prev.refinements {
                        return Err("rejected click changed the session".into());
                    }
                }
            }
            Op::Track { wait, .. } => {
                if ok {
                    if p != "refined" || now.generation != prev.generation + 1 {
                        return Err(format!("track accepted from {p}"));
                    }
                    if *wait && now.state != "finished" {
                        return Err(format!("waited track ended in {}", now.state));
                    }
                } else if p == "refined" {
                    check_error(st, &v, &[(UNPROCESSABLE, "tracker_init")])?;
                    if now.state != "error" {
                        return Err("failed tracker init without error state".into());
                    }
                } else {
                    check_error(st, &v, &[(StatusCode::CONFLICT, "invalid_state")])?;
                    if now.generation != prev.generation {
                        return Err("rejected track changed the session".into());
                    }
                }
            }
            Op::Correct { frame, x, y, cat, .. } => {
                if ok {
                    if *frame >= FRAMES || !inside(*x, *y) || *cat == 2 {
                        return Err(format!("invalid correction accepted: {op:?}"));
                    }
                    if now.refinements != prev.refinements + 1 || now.generation <= prev.generation {
                        return Err("correction not recorded".into());
                    }
                    if *frame > 0 && snap["results"][frame - 1]["box"] != v["output"]["final_box"] && now.generation == v["generation"].as_u64().unwrap() {
                        return Err("corrected frame does not hold the refined box".into());
                    }
                } else {
                    let reachable = *frame <= prev.results + 1;
                    let expect: &[(StatusCode, &str)] = if *frame >= FRAMES {
                        &[(StatusCode::NOT_FOUND, "not_found")]
                    } else if !inside(*x, *y) {
                        &[(UNPROCESSABLE, "out_of_bounds")]
                    } else if p == "tracking" {
                        &[
                            (StatusCode::CONFLICT, "frame_not_reached"),
                            (UNPROCESSABLE, "unknown_category"),
                            (UNPROCESSABLE, "refinement_failed"),
                            (UNPROCESSABLE, "tracker_init"),
                        ]
                    } else if !reachable {
                        &[(StatusCode::CONFLICT, "frame_not_reached")]
                    } else if *cat == 2 {
                        &[(UNPROCESSABLE, "unknown_category")]
                    } else {
                        &[(UNPROCESSABLE, "refinement_failed"), (UNPROCESSABLE, "tracker_init")]
                    };
                    check_error(st, &v, expect).map_err(|e| format!("correct from {p}: {e}"))?;
                }
            }
            Op::Get(_) | Op::Frame { .. } => {}
            Op::Create(_) | Op::Unknown => unreachable!(),
        }
        last[s] = now;
    }
    Ok(accepted)
}
