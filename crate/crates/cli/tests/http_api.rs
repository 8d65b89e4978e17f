mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mdrg_cli::config::Home;
use mdrg_cli::server::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn trained_app() -> Router {
    let home = Home {
        root: common::trained().home.clone(),
    };
    let state = AppState::load(&home);
    router(Arc::new(state))
}

async fn new_session(app: &Router) -> String {
    let (s, v) = call_json(app, "POST", "/api/session", None).await;
    assert_eq!(s, StatusCode::OK);
    v["session_id"].as_str().unwrap().to_string()
}

async fn chat(app: &Router, session: &str, text: &str, options: Value) -> Value {
    let (s, v) = call_json(
        app,
        "POST",
        "/api/chat",
        Some(json!({"session_id": session, "text": text, "options": options})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v
}

#[tokio::test]
async fn without_a_checkpoint_health_and_chat_are_unavailable() {
    let app = router(Arc::new(AppState::empty()));
    let (s, v) = call_json(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["checkpoints_loaded"], json!([]));
    let id = new_session(&app).await;
    let (s, _) = call_json(&app, "POST", "/api/chat", Some(json!({"session_id": id, "text": "hi"}))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn health_reports_the_loaded_checkpoint() {
    let app = trained_app();
    let (s, v) = call_json(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoints_loaded"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let app = trained_app();
    let (s, _) = call_json(&app, "POST", "/api/chat", Some(json!({"session_id": "nope", "text": "hi"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let id = new_session(&app).await;
    let (s, _) = call_json(&app, "POST", "/api/chat", Some(json!({"session_id": id, "text": "  "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call_json(
        &app,
        "POST",
        "/api/chat",
        Some(json!({"session_id": id, "text": "hi", "options": {"beam": 0}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/api/image/ffff", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

const SCRIPT: [&str; 3] = [
    "hi , how was your weekend ?",
    "i went to the park and took some photos",
    "can you show me the picture you took ?",
];

#[tokio::test]
async fn replay_with_the_same_seed_is_identical() {
    let app = trained_app();
    let (a, b) = (new_session(&app).await, new_session(&app).await);
    assert_ne!(a, b);
    for msg in SCRIPT {
        let opts = json!({"seed": 11, "n_samples": 3});
        assert_eq!(chat(&app, &a, msg, opts.clone()).await, chat(&app, &b, msg, opts).await);
    }
    let (_, la) = call_json(&app, "GET", &format!("/api/session/{a}"), None).await;
    let (_, lb) = call_json(&app, "GET", &format!("/api/session/{b}"), None).await;
    assert_eq!(la["turns"], lb["turns"]);
    assert_eq!(la["turns"].as_array().unwrap().len(), 2 * SCRIPT.len());
}

#[tokio::test]
async fn sessions_do_not_see_each_other() {
    let app = trained_app();
    let (a, b) = (new_session(&app).await, new_session(&app).await);
    let fresh = chat(&app, &b, SCRIPT[2], json!({"seed": 5})).await;
    let c = new_session(&app).await;
    for msg in &SCRIPT[..2] {
        chat(&app, &a, msg, json!({"seed": 5})).await;
    }
    // c has seen nothing of a's conversation
    assert_eq!(chat(&app, &c, SCRIPT[2], json!({"seed": 5})).await, fresh);
    let (_, lc) = call_json(&app, "GET", &format!("/api/session/{c}"), None).await;
    assert_eq!(lc["turns"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn pure_text_responses_have_no_images() {
    let app = trained_app();
    let id = new_session(&app).await;
    for (i, msg) in SCRIPT.iter().cycle().take(6).enumerate() {
        let v = chat(&app, &id, msg, json!({"pure_text": true, "seed": i})).await;
        for s in v["segments"].as_array().unwrap() {
            assert_eq!(s["kind"], "text");
        }
    }
}

#[tokio::test]
async fn image_segments_link_to_stored_pngs() {
    let app = trained_app();
    let mut seen = 0;
    for seed in 0..6u64 {
        let id = new_session(&app).await;
        let v = chat(&app, &id, SCRIPT[2], json!({"seed": seed, "n_samples": 4})).await;
        for s in v["segments"].as_array().unwrap().iter().filter(|s| s["kind"] == "image") {
            seen += 1;
            let topk = s["topk"].as_array().unwrap();
            assert_eq!(topk.len(), 4);
            assert_eq!(s["image_id"], topk[0]);
            assert!(!s["description"].as_str().unwrap().is_empty());
            let img = s["image_id"].as_str().unwrap();
            let (st, png) = call(&app, "GET", &format!("/api/image/{img}"), None).await;
            assert_eq!(st, StatusCode::OK);
            assert_eq!(&png[..4], b"\x89PNG");
            let (st, v) = call_json(&app, "GET", &format!("/api/image/{img}?b64=1"), None).await;
            assert_eq!(st, StatusCode::OK);
            use base64::Engine;
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(v["png_b64"].as_str().unwrap())
                .unwrap();
            assert_eq!(bytes, png);
        }
    }
    assert!(seen > 0, "the fixture model never shared an image");
}

#[tokio::test]
async fn uploaded_images_join_the_context() {
    let app = trained_app();
    let id = new_session(&app).await;
    let png = mdrg_core::data::ShapeSpec::all()[0].render(16).to_png_bytes().unwrap();
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
    let (s, v) = call_json(
        &app,
        "POST",
        "/api/chat",
        Some(json!({
            "session_id": id,
            "text": "look at this",
            "image": {"description": "Objects in the photo: small red circle", "png_b64": b64},
            "options": {"seed": 1},
        })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, log) = call_json(&app, "GET", &format!("/api/session/{id}"), None).await;
    let user = &log["turns"][0]["segments"];
    assert_eq!(user[0]["kind"], "text");
    assert_eq!(user[1]["kind"], "image");
    let img = user[1]["image_id"].as_str().unwrap();
    let (st, back) = call(&app, "GET", &format!("/api/image/{img}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(back, png);
}

#[tokio::test]
async fn long_sessions_keep_answering() {
    let app = trained_app();
    let id = new_session(&app).await;
    let long = "i went to the park and took some photos of the lake and the trees and the dogs";
    for seed in 0..30 {
        chat(&app, &id, long, json!({"seed": seed, "pure_text": true})).await;
    }
    let (_, log) = call_json(&app, "GET", &format!("/api/session/{id}"), None).await;
    assert_eq!(log["turns"].as_array().unwrap().len(), 60);
}
