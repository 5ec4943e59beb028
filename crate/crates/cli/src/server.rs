//! Labeling service. Readers share the session; every mutation takes the
//! write lock, so edits apply one at a time.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use angiokit::features::{features_csv, FeatureOptions, FeatureRow};
use angiokit::graph::{delete_edge, VesselFusedNetwork};
use angiokit::landmarks::{ClassificationConfig, DynamicGraphTable, LandmarkSet, DEFAULT_SNAP_MM};
use angiokit::pipeline::{
    classify, Manifest, FEATURES_FILE, FEATURES_JSON_FILE, GRAPH_FILE, GUIDE_FILE, MANIFEST_FILE,
    TABLE_FILE,
};
use angiokit::Error;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

/// Landmarks accepted through the service are saved under this name.
pub const LANDMARKS_FILE: &str = "landmarks.json";

pub struct Session {
    base: VesselFusedNetwork,
    current: VesselFusedNetwork,
    guide: String,
    labels: LandmarkSet,
    config: ClassificationConfig,
    features: FeatureOptions,
    dir: Option<PathBuf>,
    started: Instant,
}

impl Session {
    pub fn new(
        net: VesselFusedNetwork,
        guide_json: String,
        config: ClassificationConfig,
        features: FeatureOptions,
    ) -> Self {
        Session {
            current: net.clone(),
            base: net,
            guide: guide_json,
            labels: LandmarkSet {
                version: 1,
                ..LandmarkSet::default()
            },
            config,
            features,
            dir: None,
            started: Instant::now(),
        }
    }

    /// Session over an artifact directory holding the graph and guide.
    /// Finalizing writes the table and features back into it.
    pub fn open(
        dir: &Path,
        config: ClassificationConfig,
        features: FeatureOptions,
    ) -> angiokit::Result<Self> {
        let net = VesselFusedNetwork::read_json(dir.join(GRAPH_FILE))?;
        let guide_path = dir.join(GUIDE_FILE);
        let guide = std::fs::read_to_string(&guide_path).map_err(|e| Error::io(&guide_path, e))?;
        let mut s = Session::new(net, guide, config, features);
        s.dir = Some(dir.to_path_buf());
        Ok(s)
    }

    /// Replace the label set after validating it against the network.
    pub fn set_labels(&mut self, labels: LandmarkSet) -> angiokit::Result<()> {
        labels
            .snapped(&self.base, DEFAULT_SNAP_MM)
            .validate(&self.base, &self.config)?;
        let mut current = self.base.clone();
        for &t in &labels.deleted_edges {
            current = delete_edge(&current, t)?;
        }
        self.current = current;
        self.labels = labels;
        Ok(())
    }

    pub fn delete_trace(&mut self, trace: usize) -> angiokit::Result<()> {
        self.current = delete_edge(&self.current, trace)?;
        self.labels.deleted_edges.push(trace);
        Ok(())
    }

    pub fn missing(&self) -> Vec<String> {
        self.labels
            .snapped(&self.base, DEFAULT_SNAP_MM)
            .missing(&self.config)
    }

    pub fn finalize(&self) -> angiokit::Result<Report> {
        let c = classify(&self.base, &self.labels, &self.config, &self.features)?;
        let report = Report {
            csv: features_csv(&c.features),
            features: c.features,
            table: c.table,
        };
        if let Some(dir) = &self.dir {
            self.persist(dir, &report)?;
        }
        Ok(report)
    }

    fn persist(&self, dir: &Path, report: &Report) -> angiokit::Result<()> {
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(LANDMARKS_FILE, &self.labels.to_json())?;
        write(TABLE_FILE, &report.table.to_json())?;
        write(FEATURES_FILE, &report.csv)?;
        write(
            FEATURES_JSON_FILE,
            &serde_json::to_string_pretty(&report.features).expect("rows serialize"),
        )?;
        let mp = dir.join(MANIFEST_FILE);
        if let Ok(text) = std::fs::read_to_string(&mp) {
            let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))?;
            m.labeling_seconds = Some(self.started.elapsed().as_secs_f64());
            for name in [
                LANDMARKS_FILE,
                TABLE_FILE,
                FEATURES_FILE,
                FEATURES_JSON_FILE,
            ] {
                if !m.artifacts.iter().any(|a| a == name) {
                    m.artifacts.push(name.into());
                }
            }
            write(
                MANIFEST_FILE,
                &serde_json::to_string_pretty(&m).expect("manifest serializes"),
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub features: Vec<FeatureRow>,
    pub table: DynamicGraphTable,
    /// The features exactly as batch mode writes them.
    pub csv: String,
}

#[derive(Debug, Deserialize)]
struct DeleteRequest {
    trace: usize,
}

type Shared = Arc<RwLock<Session>>;

pub fn router(session: Session) -> Router {
    let state: Shared = Arc::new(RwLock::new(session));
    Router::new()
        .route("/v1/graph", get(get_graph))
        .route("/v1/guide", get(get_guide))
        .route("/v1/labels", get(get_labels).put(put_labels))
        .route("/v1/edges/delete", post(post_delete))
        .route("/v1/finalize", post(post_finalize))
        .with_state(state)
}

pub async fn serve(session: Session, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("labeling service on http://{}/v1", listener.local_addr()?);
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn json_text(text: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}

/// Name of the rule a rejected payload broke.
fn invariant(e: &Error) -> &'static str {
    match e {
        Error::UnknownNode { .. } => "assigned nodes exist",
        Error::UnknownTrace(_) => "deleted edges exist",
        Error::IncompleteLandmarks(_) => "mandatory labels assigned",
        Error::InvalidLandmarks(m) if m.contains("unknown label") => "labels are canonical",
        Error::InvalidLandmarks(m) if m.contains("assigned to both") => "one label per node",
        Error::InvalidLandmarks(m) if m.contains("deleted twice") => "edges deleted once",
        Error::Json { .. } => "well-formed payload",
        _ => "label set",
    }
}

fn rejection(e: &Error) -> Response {
    let status = if e.is_validation() {
        StatusCode::UNPROCESSABLE_ENTITY
    } else {
        StatusCode::INTERNAL_SERVER_ERROR
    };
    (
        status,
        Json(json!({ "error": e.to_string(), "invariant": invariant(e) })),
    )
        .into_response()
}

async fn get_graph(State(s): State<Shared>) -> Response {
    json_text(s.read().await.current.to_json())
}

async fn get_guide(State(s): State<Shared>) -> Response {
    json_text(s.read().await.guide.clone())
}

async fn get_labels(State(s): State<Shared>) -> Response {
    json_text(s.read().await.labels.to_json())
}

async fn put_labels(State(s): State<Shared>, body: String) -> Response {
    let labels = match LandmarkSet::from_json(&body) {
        Ok(l) => l,
        Err(e) => return rejection(&e),
    };
    let mut session = s.write().await;
    match session.set_labels(labels) {
        Ok(()) => json_text(session.labels.to_json()),
        Err(e) => rejection(&e),
    }
}

async fn post_delete(State(s): State<Shared>, body: String) -> Response {
    let req: DeleteRequest = match serde_json::from_str(&body) {
        Ok(r) => r,
        Err(e) => return rejection(&Error::json("<request>", e)),
    };
    let mut session = s.write().await;
    match session.delete_trace(req.trace) {
        Ok(()) => json_text(session.labels.to_json()),
        Err(e) => rejection(&e),
    }
}

async fn post_finalize(State(s): State<Shared>) -> Response {
    let session = s.write().await;
    let missing = session.missing();
    if !missing.is_empty() {
        let body = json!({ "error": "mandatory landmarks missing", "invariant": "mandatory labels assigned", "missing": missing });
        return (StatusCode::CONFLICT, Json(body)).into_response();
    }
    match session.finalize() {
        Ok(report) => Json(report).into_response(),
        Err(e) => rejection(&e),
    }
}
