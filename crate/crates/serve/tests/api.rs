use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use labelsynth_core::arch::parse_arch;
use labelsynth_core::data::{encode_png, instance_to_luma16, label_to_luma8};
use labelsynth_core::feature_encoder::{ClassStyles, StyleCatalog};
use labelsynth_core::generator::GeneratorMode;
use labelsynth_core::model::{ModelSpec, Models};
use labelsynth_core::nn::{AdamConfig, ParamStore};
use labelsynth_core::training::{Manifest, ModelBundle, BUNDLE_FORMAT};
use labelsynth_serve::{router, AppState, MetaResponse, ServeConfig, StylesResponse, SynthesisRequest, SynthesisResponse};
use ndarray::Array2;
use serde_json::{json, Value};
use tower::ServiceExt;

fn tiny_bundle() -> ModelBundle {
    let spec = ModelSpec::standard(4, 16, GeneratorMode::Composed, 1, true, true).unwrap();
    let params = Models::build(&spec).unwrap().init_params::<f32>(3);
    let manifest = Manifest {
        format: BUNDLE_FORMAT,
        spec,
        class_names: ["sky", "ground", "disc", "rectangle"].map(String::from).to_vec(),
        resolution: (64, 128),
        config_hash: None,
        phase: 3,
        epoch: 0,
        step: 0,
        adam: AdamConfig::default(),
        metrics: Default::default(),
        arrays: Vec::new(),
    };
    ModelBundle::new(manifest, params, ParamStore::new())
}

fn catalog() -> StyleCatalog {
    let mut classes = BTreeMap::new();
    classes.insert(0, ClassStyles::default());
    classes.insert(1, ClassStyles::default());
    classes.insert(2, ClassStyles { centers: vec![[0.5, -0.2, 0.1], [-0.6, 0.4, 0.9]], counts: vec![7, 3] });
    classes.insert(3, ClassStyles { centers: vec![[0.0, 0.3, -0.3]], counts: vec![4] });
    StyleCatalog { k: 10, classes }
}

fn ready(config: ServeConfig) -> (Arc<AppState>, Router) {
    let state = AppState::new(config);
    state.install(tiny_bundle(), Some(catalog())).unwrap();
    (Arc::clone(&state), router(state))
}

/// Ground with a disc (instance 5) and a rectangle (instance 9).
fn scene(h: usize, w: usize) -> (Array2<u8>, Array2<u16>) {
    let mut label = Array2::from_shape_fn((h, w), |(y, _)| if y < h / 2 { 0u8 } else { 1 });
    let mut inst = Array2::<u16>::zeros((h, w));
    for y in h / 2..h / 2 + 10 {
        for x in 10..22 {
            label[[y, x]] = 2;
            inst[[y, x]] = 5;
        }
        for x in 60..80 {
            label[[y, x]] = 3;
            inst[[y, x]] = 9;
        }
    }
    (label, inst)
}

fn request(label: &Array2<u8>, inst: &Array2<u16>) -> SynthesisRequest {
    SynthesisRequest {
        label_png: B64.encode(encode_png(&label_to_luma8(label)).unwrap()),
        instance_png: Some(B64.encode(encode_png(&instance_to_luma16(inst)).unwrap())),
        styles: BTreeMap::new(),
        seed: Some(11),
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn post(app: &Router, body: &SynthesisRequest) -> (StatusCode, Value) {
    call(app, "POST", "/synthesize", Some(serde_json::to_vec(body).unwrap())).await
}

fn assert_error(got: (StatusCode, Value), status: StatusCode, code: &str) {
    assert_eq!(got.0, status, "body: {}", got.1);
    assert_eq!(got.1["code"], code, "body: {}", got.1);
    assert!(got.1["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(got.1.get("field").is_some());
}

#[tokio::test]
async fn health_and_meta_follow_loading() {
    let state = AppState::new(ServeConfig::default());
    let app = router(Arc::clone(&state));
    assert_eq!(call(&app, "GET", "/health", None).await.1["status"], "loading");
    assert_error(call(&app, "GET", "/meta", None).await, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded");
    assert_error(call(&app, "GET", "/styles?class=2", None).await, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded");
    let (label, inst) = scene(64, 128);
    assert_error(post(&app, &request(&label, &inst)).await, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded");

    state.install(tiny_bundle(), Some(catalog())).unwrap();
    assert_eq!(call(&app, "GET", "/health", None).await.1["status"], "ready");
    let (status, body) = call(&app, "GET", "/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let meta: MetaResponse = serde_json::from_value(body).unwrap();
    assert_eq!(meta.num_classes, tiny_bundle().manifest.spec.num_classes);
    assert_eq!(meta.class_names.len(), 4);
    for s in [Some(&meta.arch.global_generator), meta.arch.local_enhancer.as_ref(), Some(&meta.arch.discriminator), meta.arch.encoder.as_ref()] {
        parse_arch(s.unwrap()).unwrap();
    }
}

#[tokio::test]
async fn seeded_synthesis_is_deterministic_and_echoes_styles() {
    let (_, app) = ready(ServeConfig::default());
    let (label, inst) = scene(64, 128);
    let req = request(&label, &inst);
    let (s1, a) = post(&app, &req).await;
    let (s2, b) = post(&app, &req).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK), "{a}");
    let a: SynthesisResponse = serde_json::from_value(a).unwrap();
    let b: SynthesisResponse = serde_json::from_value(b).unwrap();
    assert_eq!(a.image_png, b.image_png);
    assert_eq!((a.height, a.width, a.seed), (64, 128, 11));
    assert_eq!(a.styles.keys().copied().collect::<Vec<_>>(), vec![5, 9]);
    assert_eq!(a.styles[&9], [0.0, 0.3, -0.3]);

    let mut explicit = req.clone();
    explicit.styles.insert(5, serde_json::from_value(json!({"cluster": 1})).unwrap());
    let (_, c) = post(&app, &explicit).await;
    let c: SynthesisResponse = serde_json::from_value(c).unwrap();
    assert_eq!(c.styles[&5], [-0.6, 0.4, 0.9]);
    explicit.styles.insert(5, serde_json::from_value(json!({"vector": [0.1, 0.2, 0.3]})).unwrap());
    let (_, d) = post(&app, &explicit).await;
    assert_eq!(serde_json::from_value::<SynthesisResponse>(d).unwrap().styles[&5], [0.1, 0.2, 0.3]);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let (_, app) = ready(ServeConfig { workers: 2, ..Default::default() });
    let (label, inst) = scene(64, 128);
    let req = request(&label, &inst);
    let (a, b) = tokio::join!(post(&app, &req), post(&app, &req));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1["image_png"], b.1["image_png"]);
}

#[tokio::test]
async fn error_matrix() {
    let (_, app) = ready(ServeConfig { max_size: (128, 256), ..Default::default() });
    let (label, inst) = scene(64, 128);
    let good = request(&label, &inst);

    // 400
    let r = call(&app, "POST", "/synthesize", Some(b"{not json".to_vec())).await;
    assert_error(r, StatusCode::BAD_REQUEST, "invalid_json");
    let mut bad = good.clone();
    bad.label_png = "@@@".into();
    assert_error(post(&app, &bad).await, StatusCode::BAD_REQUEST, "invalid_payload");
    bad.label_png = B64.encode(b"not a png");
    assert_error(post(&app, &bad).await, StatusCode::BAD_REQUEST, "invalid_payload");
    let (l2, i2) = scene(48, 128);
    assert_error(post(&app, &request(&l2, &i2)).await, StatusCode::BAD_REQUEST, "invalid_dims");
    let (l3, i3) = scene(256, 256);
    assert_error(post(&app, &request(&l3, &i3)).await, StatusCode::BAD_REQUEST, "invalid_dims");
    let mut mismatched = good.clone();
    mismatched.instance_png = request(&scene(32, 128).0, &scene(32, 128).1).instance_png;
    let r = post(&app, &mismatched).await;
    assert_eq!(r.1["field"], "instance_png");
    assert_error(r, StatusCode::BAD_REQUEST, "invalid_dims");
    let mut split = inst.clone();
    split[[0, 0]] = 5;
    assert_error(post(&app, &request(&label, &split)).await, StatusCode::BAD_REQUEST, "inconsistent_instance");
    assert_error(call(&app, "GET", "/styles", None).await, StatusCode::BAD_REQUEST, "missing_parameter");

    // 422
    let mut unknown = label.clone();
    unknown[[3, 3]] = 7;
    assert_error(post(&app, &request(&unknown, &inst)).await, StatusCode::UNPROCESSABLE_ENTITY, "unknown_class");
    let mut cluster = good.clone();
    cluster.styles.insert(5, serde_json::from_value(json!({"cluster": 2})).unwrap());
    assert_error(post(&app, &cluster).await, StatusCode::UNPROCESSABLE_ENTITY, "bad_cluster");
    let mut missing = good.clone();
    missing.styles.insert(77, serde_json::from_value(json!("random")).unwrap());
    assert_error(post(&app, &missing).await, StatusCode::UNPROCESSABLE_ENTITY, "unknown_instance");
    let (mut sky_label, mut sky_inst) = scene(64, 128);
    sky_label[[0, 0]] = 0;
    sky_inst[[0, 0]] = 3;
    assert_error(post(&app, &request(&sky_label, &sky_inst)).await, StatusCode::UNPROCESSABLE_ENTITY, "no_styles");

    // 404
    assert_error(call(&app, "GET", "/styles?class=4", None).await, StatusCode::NOT_FOUND, "unknown_class");
    assert_error(call(&app, "GET", "/styles?class=sky", None).await, StatusCode::NOT_FOUND, "unknown_class");
    let bare = AppState::new(ServeConfig::default());
    bare.install(tiny_bundle(), None).unwrap();
    let bare = router(bare);
    assert_error(call(&bare, "GET", "/styles?class=2", None).await, StatusCode::NOT_FOUND, "no_catalog");
    assert_error(post(&bare, &good).await, StatusCode::UNPROCESSABLE_ENTITY, "no_styles");

    // 429
    let (_, busy) = ready(ServeConfig { max_pending: 0, ..Default::default() });
    assert_error(post(&busy, &good).await, StatusCode::TOO_MANY_REQUESTS, "busy");
}

#[tokio::test]
async fn styles_pass_the_catalog_through() {
    let (_, app) = ready(ServeConfig::default());
    let (status, body) = call(&app, "GET", "/styles?class=2", None).await;
    assert_eq!(status, StatusCode::OK);
    let s: StylesResponse = serde_json::from_value(body).unwrap();
    assert_eq!(s.centers, catalog().classes[&2].centers);
    assert_eq!(s.counts, vec![7, 3]);
    assert!(s.centers.len() <= 10);
    let (_, body) = call(&app, "GET", "/styles?class=0", None).await;
    assert!(body["centers"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn static_files_are_served_at_root() {
    let dir = tempfile_dir();
    std::fs::write(dir.join("index.html"), "<!doctype html><title>editor</title>").unwrap();
    let (_, app) = ready(ServeConfig { static_dir: Some(dir.clone()), ..Default::default() });
    let resp = app.oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert!(String::from_utf8_lossy(&bytes).contains("editor"));
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("labelsynth-static-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
