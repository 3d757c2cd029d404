use std::io::Cursor;
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde_json::{json, Value};
use tower::ServiceExt;

use fscil_cli::service::{router, ServiceState};
use fscil_core::backbone::{Backbone, BackboneConfig};
use fscil_core::checkpoint::{Checkpoint, TrainingMeta};
use fscil_core::classifier::ClassifierWeights;
use fscil_core::data::{generate_synthetic, ClassId, Dataset, Domain, ImageShape, SplitCounts, SyntheticSpec};
use fscil_core::generator::{GeneratorConfig, WeightGenerator};
use fscil_core::model::Model;
use fscil_core::numeric::DenseArray;
use fscil_core::pipeline::{train, PipelineConfig};
use fscil_core::Error;

struct Fixture {
    dataset: Dataset,
    checkpoint: Checkpoint,
    novel: Vec<ClassId>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dataset = generate_synthetic(&SyntheticSpec { classes: 12, per_class_per_domain: 30, image_size: 16, seed: 9 }).unwrap();
        let mut cfg = PipelineConfig::desk_scale();
        cfg.counts = SplitCounts { base: 6, val: 2, novel: 4 };
        cfg.stage1.epochs = 15;
        cfg.stage2.epochs = 3;
        let trained = train(&dataset, &cfg).unwrap();
        let checkpoint = trained.checkpoint(&dataset, &cfg, None).unwrap();
        Fixture { novel: trained.split.novel.clone(), dataset, checkpoint }
    })
}

fn png(img: &DenseArray) -> String {
    let [h, w] = [img.shape()[0], img.shape()[1]];
    let bytes: Vec<u8> = img.values().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, bytes).unwrap();
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).unwrap();
    STANDARD.encode(out.into_inner())
}

fn items(ds: &Dataset, class: ClassId, domain: Domain) -> Vec<&DenseArray> {
    ds.indices(class, domain).iter().map(|&i| &ds.item(i).image).collect()
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn register_then_classify_over_http() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("live.ckpt");
    fx.checkpoint.save(&path).unwrap();
    let state = Arc::new(ServiceState::load(path.clone()).unwrap());
    let app = router(state.clone());

    let (s, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(health["num_classes"], 6);

    let class = fx.novel[0];
    let sketches = items(&fx.dataset, class, Domain::Sketch);
    let images: Vec<String> = sketches[..5].iter().map(|i| png(i)).collect();
    let (s, body) = call(&app, "POST", "/classes", Some(json!({"name": "star", "images": images}))).await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    assert_eq!(body["num_classes"], 7);
    assert_eq!(body["class"]["origin"], "incremental");
    assert_eq!(body["class"]["exemplar_count"], 5);
    let new_id = body["class"]["class_id"].as_u64().unwrap();
    assert!(new_id >= 12, "new ids start above the dataset's classes");

    let (s, _) = call(&app, "POST", "/classes", Some(json!({"name": "star", "images": [png(sketches[6])]}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", "/classes", Some(json!({"name": "empty", "images": []}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/classify", Some(json!({"image": STANDARD.encode(b"not an image")}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "POST", "/classify", Some(json!({"wrong": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, body) = call(&app, "POST", "/classify", Some(json!({"image": images[0]}))).await;
    assert_eq!(s, StatusCode::OK);
    let preds = body["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 7);
    let probs: Vec<f64> = preds.iter().map(|p| p["probability"].as_f64().unwrap()).collect();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    let top3: Vec<u64> = preds[..3].iter().map(|p| p["class_id"].as_u64().unwrap()).collect();
    assert!(top3.contains(&new_id), "registered class not in top 3: {top3:?}");

    let (_, classes) = call(&app, "GET", "/classes", None).await;
    assert_eq!(classes["classes"].as_array().unwrap().len(), 7);

    let reloaded = Checkpoint::load(&path).unwrap();
    assert_eq!(reloaded, state.snapshot().checkpoint);
    assert_eq!(reloaded.current.num_classes(), reloaded.registry.len());
}

#[test]
fn concurrent_registrations_are_serialized() {
    let fx = fixture();
    let state = Arc::new(ServiceState::new(fx.checkpoint.clone(), None).unwrap());
    let handles: Vec<_> = (0..2)
        .map(|k| {
            let state = state.clone();
            let imgs: Vec<DenseArray> = items(&fx.dataset, fx.novel[k], Domain::Sketch)[..3].iter().map(|i| (*i).clone()).collect();
            std::thread::spawn(move || state.register(&format!("class{k}"), &imgs).unwrap())
        })
        .collect();
    let mut entries: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    entries.sort_by_key(|e| e.class_id);
    let snap = state.snapshot();
    let reg = snap.checkpoint.registry.entries();
    assert_eq!(reg.len(), 8);
    assert_eq!(snap.checkpoint.current.num_classes(), 8);
    assert_eq!(entries[1].class_id.0, entries[0].class_id.0 + 1);
    assert_eq!(reg[6..].iter().map(|e| e.class_id).collect::<Vec<_>>(), snap.checkpoint.current.class_ids()[6..].to_vec());
}

#[test]
fn symmetric_classifier_gives_uniform_posterior() {
    let cfg = BackboneConfig { input: ImageShape::square(16), ..Default::default() };
    let backbone = Backbone::new(cfg, 1).unwrap().freeze();
    let ids: Vec<ClassId> = (0..4).map(ClassId).collect();
    let base = ClassifierWeights::new(DenseArray::filled(&[4, 64], 0.5), ids, 10.0).unwrap();
    let generator = WeightGenerator::new(GeneratorConfig::default(), 0).unwrap();
    let model = Model { backbone, base, generator };
    let names: Vec<String> = (0..4).map(|i| format!("n{i}")).collect();
    let ckpt = Checkpoint::from_model(&model, &names, TrainingMeta { dataset_classes: 4, ..Default::default() }).unwrap();
    let state = ServiceState::new(ckpt, None).unwrap();
    let img = DenseArray::filled(&[16, 16, 3], 0.3);
    for p in state.classify(&img).unwrap() {
        assert!((p.probability - 0.25).abs() < 1e-12);
    }
}

#[test]
fn truncated_checkpoint_is_rejected_and_state_kept() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    fx.checkpoint.save(&path).unwrap();
    let state = ServiceState::load(path.clone()).unwrap();
    let before = state.snapshot().hash.clone();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
    assert!(matches!(ServiceState::load(path.clone()), Err(Error::Checksum)));
    assert_eq!(state.snapshot().hash, before);

    let again = dir.path().join("d.ckpt");
    let first = fx.checkpoint.to_bytes().unwrap();
    Checkpoint::from_bytes(&first).unwrap().save(&again).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), first);
}
