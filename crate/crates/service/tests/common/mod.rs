#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use brachy_core::phantom::{pelvis, PelvisPhantom, PhantomSpec};
use brachy_service::{router, AppState, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use std::sync::OnceLock;
use tower::ServiceExt;

pub fn small_phantom() -> &'static PelvisPhantom {
    static P: OnceLock<PelvisPhantom> = OnceLock::new();
    P.get_or_init(|| pelvis(&PhantomSpec { size: 40, spacing: 3.0, ..PhantomSpec::default() }))
}

pub struct Harness {
    pub dir: tempfile::TempDir,
    pub state: AppState,
    pub app: Router,
}

impl Harness {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let state = AppState::open(ServiceConfig::new(dir.path())).unwrap();
        let app = router(state.clone());
        Harness { dir, state, app }
    }

    pub fn reopen(&self) -> AppState {
        AppState::open(ServiceConfig::new(self.dir.path())).unwrap()
    }

    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(v) => req.header("content-type", "application/json").body(Body::from(serde_json::to_vec(&v).unwrap())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        self.send(req).await
    }

    pub async fn upload(&self, uri: &str, bytes: Vec<u8>) -> (StatusCode, Value) {
        let req = Request::builder()
            .method("POST")
            .uri(uri)
            .header("content-type", "application/octet-stream")
            .body(Body::from(bytes))
            .unwrap();
        self.send(req).await
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, v)
    }

    /// Creates `id` and walks it to PREPLAN with the phantom's volume and
    /// labels and the default template selected.
    pub async fn case_in_preplan(&self, id: &str, p: &PelvisPhantom) {
        let (s, _) = self.call("POST", "/cases", Some(serde_json::json!({ "case_id": id }))).await;
        assert_eq!(s, StatusCode::CREATED);
        let (s, _) = self.upload(&format!("/cases/{id}/volumes"), p.volume.to_svol_bytes().unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        let (s, _) = self.upload(&format!("/cases/{id}/labels"), p.labels.to_svol_bytes().unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        let (s, _) = self.call("POST", &format!("/cases/{id}/eligibility"), Some(serde_json::json!({ "eligibility": "eligible" }))).await;
        assert_eq!(s, StatusCode::OK);
        let (s, v) = self
            .call("POST", &format!("/cases/{id}/device-comparison"), Some(serde_json::json!({ "candidates": ["template-6x6"] })))
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let (s, v) = self.call("POST", &format!("/cases/{id}/device-selection"), Some(serde_json::json!({ "device": "template-6x6" }))).await;
        assert_eq!(s, StatusCode::OK, "{v}");
    }
}
