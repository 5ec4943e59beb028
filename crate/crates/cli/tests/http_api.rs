use std::path::PathBuf;
use std::sync::OnceLock;

use angiokit::features::FeatureOptions;
use angiokit::graph::VesselFusedNetwork;
use angiokit::io::write_volume;
use angiokit::landmarks::{ClassificationConfig, LandmarkSet};
use angiokit::pipeline::{
    run_pipeline, PipelineConfig, FEATURES_FILE, GRAPH_FILE, GUIDE_FILE, MANIFEST_FILE,
};
use angiokit::simulate::{phantom, simulate_subject};
use angiokit_cli::server::{router, Report, Session};
use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    config: ClassificationConfig,
    landmarks: LandmarkSet,
    batch_csv: String,
}

// One phantom run with its landmark file; tests copy what they mutate.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let (graph, fbd, sim_cfg) = phantom::circle_of_willis(128, 0.75);
        let sim = simulate_subject(&graph, &fbd, &sim_cfg, 5).unwrap();
        let config = sim_cfg.classification();
        let landmarks = sim.landmark_file(&config);
        let vol = tmp.path().join("subject.json");
        write_volume(&sim.volume, &vol).unwrap();
        let lm = tmp.path().join("landmarks.json");
        landmarks.write(&lm).unwrap();
        let mut cfg = PipelineConfig::new(&vol, tmp.path().join("out"));
        cfg.landmarks = Some(lm);
        let out = run_pipeline(&cfg).unwrap();
        let batch_csv = std::fs::read_to_string(out.dir.join(FEATURES_FILE)).unwrap();
        Fixture {
            dir: out.dir,
            _tmp: tmp,
            config,
            landmarks,
            batch_csv,
        }
    })
}

fn session() -> Session {
    let f = fixture();
    let net = VesselFusedNetwork::read_json(f.dir.join(GRAPH_FILE)).unwrap();
    let guide = std::fs::read_to_string(f.dir.join(GUIDE_FILE)).unwrap();
    Session::new(
        net,
        guide,
        f.config.clone(),
        FeatureOptions { smoothing_mm: 1.0 },
    )
}

async fn call(
    app: &axum::Router,
    method: Method,
    uri: &str,
    body: Option<String>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

#[tokio::test]
async fn graph_and_guide_match_the_artifacts() {
    let f = fixture();
    let app = router(session());
    let (status, graph) = call(&app, Method::GET, "/v1/graph", None).await;
    assert_eq!(status, StatusCode::OK);
    let disk = VesselFusedNetwork::read_json(f.dir.join(GRAPH_FILE)).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), disk.nodes().len());
    assert_eq!(
        graph["traces"].as_array().unwrap().len(),
        disk.traces().len()
    );

    let (status, guide) = call(&app, Method::GET, "/v1/guide", None).await;
    assert_eq!(status, StatusCode::OK);
    let on_disk: Value =
        serde_json::from_str(&std::fs::read_to_string(f.dir.join(GUIDE_FILE)).unwrap()).unwrap();
    assert_eq!(guide, on_disk);

    let (status, labels) = call(&app, Method::GET, "/v1/labels", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(labels["assignments"], serde_json::json!({}));
    assert_eq!(
        call(&app, Method::GET, "/v1/nowhere", None).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn invalid_label_sets_are_rejected_with_the_rule() {
    let app = router(session());
    let net = VesselFusedNetwork::read_json(fixture().dir.join(GRAPH_FILE)).unwrap();
    let node = net.nodes()[0].id;

    let dup = format!(r#"{{"assignments": {{"BA-VA": {node}, "PCA-BA": {node}}}, "version": 1}}"#);
    let (status, body) = call(&app, Method::PUT, "/v1/labels", Some(dup)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invariant"], "one label per node");

    let unknown = format!(r#"{{"assignments": {{"Not-A-Label": {node}}}}}"#);
    let (status, body) = call(&app, Method::PUT, "/v1/labels", Some(unknown)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invariant"], "labels are canonical");

    let (status, body) = call(
        &app,
        Method::PUT,
        "/v1/labels",
        Some(r#"{"assignments": {"BA-VA": 999999}}"#.into()),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invariant"], "assigned nodes exist");

    let (status, body) = call(&app, Method::PUT, "/v1/labels", Some("{not json".into())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invariant"], "well-formed payload");

    // rejected payloads leave the session untouched
    let (_, labels) = call(&app, Method::GET, "/v1/labels", None).await;
    assert_eq!(labels["assignments"], serde_json::json!({}));
}

#[tokio::test]
async fn finalize_reports_missing_mandatory_labels() {
    let f = fixture();
    let app = router(session());
    let (status, body) = call(&app, Method::POST, "/v1/finalize", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let missing: Vec<String> = serde_json::from_value(body["missing"].clone()).unwrap();
    assert_eq!(missing, f.config.mandatory);

    let mut partial = f.landmarks.clone();
    let dropped = f.config.mandatory[0].clone();
    partial.positions.remove(&dropped);
    let (status, _) = call(&app, Method::PUT, "/v1/labels", Some(partial.to_json())).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, Method::POST, "/v1/finalize", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["missing"], serde_json::json!([dropped]));
}

#[tokio::test]
async fn edge_deletion_is_validated_and_recorded() {
    let app = router(session());
    let (_, graph) = call(&app, Method::GET, "/v1/graph", None).await;
    let traces = graph["traces"].as_array().unwrap().len();
    let id = graph["traces"][0]["id"].as_u64().unwrap();

    let (status, body) = call(
        &app,
        Method::POST,
        "/v1/edges/delete",
        Some(r#"{"trace": 999999}"#.into()),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["invariant"], "deleted edges exist");

    let (status, labels) = call(
        &app,
        Method::POST,
        "/v1/edges/delete",
        Some(format!(r#"{{"trace": {id}}}"#)),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(labels["deleted_edges"], serde_json::json!([id]));
    let (_, graph) = call(&app, Method::GET, "/v1/graph", None).await;
    assert_eq!(graph["traces"].as_array().unwrap().len(), traces - 1);

    // deleting it again finds no such trace
    let (status, _) = call(
        &app,
        Method::POST,
        "/v1/edges/delete",
        Some(format!(r#"{{"trace": {id}}}"#)),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    // replacing the labels replaces the deletions
    let (status, _) = call(
        &app,
        Method::PUT,
        "/v1/labels",
        Some(r#"{"version": 1}"#.into()),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let (_, graph) = call(&app, Method::GET, "/v1/graph", None).await;
    assert_eq!(graph["traces"].as_array().unwrap().len(), traces);
}

#[tokio::test]
async fn interactive_labeling_matches_batch() {
    let f = fixture();
    let app = router(session());
    let (status, echoed) = call(&app, Method::PUT, "/v1/labels", Some(f.landmarks.to_json())).await;
    assert_eq!(status, StatusCode::OK);
    let echoed: LandmarkSet = serde_json::from_value(echoed).unwrap();
    assert_eq!(echoed, f.landmarks);

    let (status, body) = call(&app, Method::POST, "/v1/finalize", None).await;
    assert_eq!(status, StatusCode::OK);
    let report: Report = serde_json::from_value(body).unwrap();
    assert_eq!(report.csv, f.batch_csv);
    assert!(report.table.segments.iter().filter(|s| s.present).count() >= 8);
}

#[tokio::test]
async fn finalize_writes_back_into_the_artifact_directory() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    for name in [GRAPH_FILE, GUIDE_FILE, MANIFEST_FILE] {
        std::fs::copy(f.dir.join(name), tmp.path().join(name)).unwrap();
    }
    let mut s = Session::open(
        tmp.path(),
        f.config.clone(),
        FeatureOptions { smoothing_mm: 1.0 },
    )
    .unwrap();
    s.set_labels(f.landmarks.clone()).unwrap();
    let app = router(s);
    let (status, _) = call(&app, Method::POST, "/v1/finalize", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        std::fs::read_to_string(tmp.path().join(FEATURES_FILE)).unwrap(),
        f.batch_csv
    );
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join(MANIFEST_FILE)).unwrap())
            .unwrap();
    assert!(manifest["labeling_seconds"].as_f64().unwrap() >= 0.0);
    assert!(manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|a| a == "landmarks.json"));
}
