use std::sync::Arc;

use iviq_core::gateway::synthetic::WorldSpec;
use iviq_core::gateway::{ModelGateway, ProviderDescriptor, RemoteProvider, SyntheticProvider, SyntheticWorld};
use iviq_core::{build_index, Segment};
use iviq_service::models::router;

/// Serve `gateway` on an ephemeral port from a background runtime.
fn spawn_server(gateway: Arc<dyn ModelGateway>) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router(gateway)).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

#[test]
fn remote_provider_matches_the_served_gateway() {
    let mut spec = WorldSpec::ambiguous(3, 30);
    spec.half_segments = true;
    let manifest = spec.generate();
    let local = Arc::new(SyntheticProvider::new(Arc::new(SyntheticWorld::from_manifest(&manifest))));
    let url = spawn_server(local.clone());
    let remote = RemoteProvider::new(&ProviderDescriptor::remote(url, manifest.dimension)).unwrap();

    let id = &manifest.videos[4].video_id;
    assert_eq!(remote.embed_text("a man is singing").unwrap(), local.embed_text("a man is singing").unwrap());
    assert_eq!(
        remote.embed_video(id, Segment::FirstHalf).unwrap(),
        local.embed_video(id, Segment::FirstHalf).unwrap()
    );
    assert_eq!(remote.caption(id).unwrap(), local.caption(id).unwrap());
    assert_eq!(
        remote.vqa(id, "where is the man?", Segment::Whole).unwrap(),
        local.vqa(id, "where is the man?", Segment::Whole).unwrap()
    );
    assert_eq!(remote.itm(id, "a man").unwrap(), local.itm(id, "a man").unwrap());
    assert_eq!(remote.lm_generate("hello", 32).unwrap(), local.lm_generate("hello", 32).unwrap());

    let over_wire = build_index(&manifest, &remote, 4).unwrap();
    let direct = build_index(&manifest, local.as_ref(), 1).unwrap();
    assert_eq!(over_wire, direct);

    assert!(remote.caption("no-such-video").is_err());
}

#[test]
fn malformed_bodies_are_bad_requests() {
    let manifest = WorldSpec::ambiguous(3, 20).generate();
    let local = Arc::new(SyntheticProvider::new(Arc::new(SyntheticWorld::from_manifest(&manifest))));
    let url = spawn_server(local);
    let client = reqwest::blocking::Client::new();
    let response = client
        .post(format!("{url}/v1/caption"))
        .header("content-type", "application/json")
        .body("not json")
        .send()
        .unwrap();
    assert_eq!(response.status().as_u16(), 400);
    let body: serde_json::Value = response.json().unwrap();
    assert_eq!(body["error"]["code"], "bad_request");

    let response = client
        .post(format!("{url}/v1/caption"))
        .json(&serde_json::json!({"wrong": "field"}))
        .send()
        .unwrap();
    assert_eq!(response.status().as_u16(), 400);
}
