use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use iviq_core::gateway::synthetic::WorldSpec;
use iviq_core::gateway::{SyntheticProvider, SyntheticWorld};
use iviq_core::session::replay;
use iviq_core::{build_index, CorpusManifest, ModelGateway, SessionConfig, SessionContext, SessionRecord};
use iviq_service::api::{router, AppState, Corpus};
use serde_json::{json, Value};
use tower::ServiceExt;

fn world(halves: bool) -> (CorpusManifest, SessionContext) {
    let mut spec = WorldSpec::ambiguous(11, 60);
    spec.half_segments = halves;
    let manifest = spec.generate();
    let gateway: Arc<dyn ModelGateway> =
        Arc::new(SyntheticProvider::new(Arc::new(SyntheticWorld::from_manifest(&manifest))));
    let index = build_index(&manifest, gateway.as_ref(), 1).unwrap();
    (manifest, SessionContext::new(Arc::new(index), gateway))
}

fn ready_app(halves: bool) -> (Router, CorpusManifest) {
    let (manifest, ctx) = world(halves);
    let state = AppState::new(SessionConfig::default());
    state.install(Corpus::new(&manifest, ctx));
    (router(state, None), manifest)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(match body {
            Some(v) => Body::from(v.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/api/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_tracks_loading() {
    let state = AppState::new(SessionConfig::default());
    let app = router(state.clone(), None);
    let (_, v) = call(&app, "GET", "/api/healthz", None).await;
    assert_eq!(v, json!({"status": "loading"}));
    let (status, _) = call(&app, "POST", "/api/sessions", Some(json!({"query": "a man"}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let (manifest, ctx) = world(false);
    state.install(Corpus::new(&manifest, ctx));
    let (_, v) = call(&app, "GET", "/api/healthz", None).await;
    assert_eq!(v, json!({"status": "ok"}));
}

#[tokio::test]
async fn create_returns_round_zero_top_ten() {
    let (app, _) = ready_app(false);
    let (status, v) = call(&app, "POST", "/api/sessions", Some(json!({"query": "a man is singing"}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["round"], 0);
    let top = v["top"].as_array().unwrap();
    assert_eq!(top.len(), 10);
    assert!(top[0]["media_uri"].as_str().unwrap().starts_with("synthetic://"));
    assert!(top[0]["score"].is_number());
    assert_eq!(v["session_id"].as_str().unwrap().len(), 32);
}

#[tokio::test]
async fn create_rejections() {
    let (app, _) = ready_app(false);
    for body in [
        json!({"query": "   "}),
        json!({"query": "a man", "config": {"ask_segment": true}}),
        json!({"query": "a man", "config": {"augmentations": {"ask_segment": true}}}),
        json!({"query": "a man", "config": {"max_rounds": 50}}),
        json!({"query": "a man", "config": {"answerer": "videoqa"}}),
        json!({"query": "a man", "target_video_id": "nope"}),
        json!({"nope": 1}),
    ] {
        let (status, v) = call(&app, "POST", "/api/sessions", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {v}");
        assert!(v["error"].is_string());
    }
    let (_, v) = call(
        &app,
        "POST",
        "/api/sessions",
        Some(json!({"query": "a man", "config": {"augmentations": {"ask_segment": true}}})),
    )
    .await;
    assert!(v["error"].as_str().unwrap().contains("half-segment"), "{v}");
}

#[tokio::test]
async fn ask_segment_with_halves_is_accepted() {
    let (app, _) = ready_app(true);
    create(&app, json!({"query": "a man", "config": {"augmentations": {"ask_segment": true}}})).await;
}

#[tokio::test]
async fn question_answer_loop() {
    let (app, manifest) = ready_app(false);
    let target = &manifest.captions[0];
    let id = create(
        &app,
        json!({"query": "a man is singing", "target_video_id": target.video_id}),
    )
    .await;

    let (status, v) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"question": "what is the man doing?", "round": 1}));

    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "  "}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // The question survived the rejected answer.
    let (status, v) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "Singing"}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["round"], 1);
    assert_eq!(v["top"].as_array().unwrap().len(), 10);
    assert!(v["rank_delta"].is_i64());

    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "x"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, v) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["question"], "where is the man?");
    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "street"}))).await;
    assert_eq!(status, StatusCode::OK);

    let (status, v) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let record: SessionRecord = serde_json::from_value(v).unwrap();
    assert_eq!(record.rounds.len(), 2);
    assert_eq!(record.rounds[0].answer, "singing");
    assert_eq!(record.rounds[1].answer, "street");
    assert_eq!(
        record.query.composed,
        "a man is singing [SEP] what is the man doing? singing [SEP] where is the man? street"
    );
    assert_eq!(record.session_id.as_deref(), Some(id.as_str()));
}

#[tokio::test]
async fn record_is_the_session_serialization() {
    let (app, _) = ready_app(false);
    let id = create(&app, json!({"query": "a dog"})).await;
    call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "running"}))).await;
    let response = app
        .clone()
        .oneshot(Request::get(format!("/api/sessions/{id}")).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(response.headers()["content-type"], "application/json");
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let record = SessionRecord::from_json(&text).unwrap();
    assert_eq!(record.to_json(), text);
}

#[tokio::test]
async fn api_sessions_replay_offline() {
    let (manifest, ctx) = world(false);
    let state = AppState::new(SessionConfig::default());
    let (_, ctx2) = world(false);
    state.install(Corpus::new(&manifest, ctx2));
    let app = router(state, None);
    let id = create(&app, json!({"query": "a cat", "config": {"augmentations": {"ask_object": true}}})).await;
    for answer in ["sleeping", "kitchen", "a cat", "a ball"] {
        let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
        if status == StatusCode::GONE {
            break;
        }
        let (status, v) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": answer}))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
    }
    let (_, v) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    let record: SessionRecord = serde_json::from_value(v).unwrap();
    assert!(!record.rounds.is_empty());
    replay(&ctx, &record).unwrap();
}

#[tokio::test]
async fn exhausted_session_is_gone() {
    let (app, _) = ready_app(false);
    let id = create(&app, json!({"query": "a man", "config": {"max_rounds": 2}})).await;
    for answer in ["walking", "park"] {
        let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
        assert_eq!(status, StatusCode::OK);
        let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": answer}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let (app, _) = ready_app(false);
    for (method, path) in [
        ("GET", "/api/sessions/deadbeef"),
        ("POST", "/api/sessions/deadbeef/next"),
    ] {
        let (status, _) = call(&app, method, path, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
    }
    let (status, _) = call(&app, "POST", "/api/sessions/deadbeef/answer", Some(json!({"answer": "x"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn expired_question_can_be_asked_again() {
    let (app, _) = ready_app(false);
    let id = create(&app, json!({"query": "a man", "config": {"answer_deadline_secs": 0.2}})).await;
    let (_, first) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    tokio::time::sleep(std::time::Duration::from_millis(400)).await;
    let (status, _) = call(&app, "POST", &format!("/api/sessions/{id}/answer"), Some(json!({"answer": "late"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, again) = call(&app, "POST", &format!("/api/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first, again);
}

#[tokio::test]
async fn static_bundle_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>ui</title>").unwrap();
    let (manifest, ctx) = world(false);
    let state = AppState::new(SessionConfig::default());
    state.install(Corpus::new(&manifest, ctx));
    let app = router(state, Some(dir.path().to_path_buf()));
    let (status, v) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v.as_str().unwrap().contains("<title>ui</title>"));
    let (status, _) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    let (_, v) = call(&app, "GET", "/api/healthz", None).await;
    assert_eq!(v["status"], "ok");
}
