//! HTTP+JSON routes. Handlers run the synchronous state operations on the
//! blocking pool.

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use brachy_core::archive::Stage;
use brachy_core::planning::NeedleEdit;
use brachy_core::registration::RigidTransform;
use brachy_core::volume::ProtocolKind;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::state::{AppState, InventoryRequest, RegistrationRequest, SliceSource};
use crate::workflow::{Eligibility, Prescription, WorkflowStage};

/// Upper bound on uploaded volume bodies.
pub const MAX_UPLOAD: usize = 512 << 20;

type ApiResult<T> = Result<Json<T>, ServiceError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?.map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/devices", get(devices))
        .route("/inventory", get(inventory_log).post(inventory_request))
        .route("/cases", get(list_cases).post(create_case))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/volumes", post(upload_volume))
        .route("/cases/{id}/labels", post(upload_labels))
        .route("/cases/{id}/segmentation", post(segment))
        .route("/cases/{id}/eligibility", post(eligibility))
        .route("/cases/{id}/device-comparison", post(compare))
        .route("/cases/{id}/device-selection", post(select))
        .route("/cases/{id}/registration", post(register))
        .route("/cases/{id}/plan", get(get_plan).patch(patch_plan))
        .route("/cases/{id}/prescription", post(prescription))
        .route("/cases/{id}/advance", post(advance))
        .route("/cases/{id}/followup", get(followup))
        .route("/cases/{id}/slice", get(slice))
        .route("/cases/{id}/dvh", get(dvh))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

async fn devices(State(s): State<AppState>) -> ApiResult<Vec<crate::devices::DeviceInfo>> {
    Ok(Json(s.devices()))
}

async fn inventory_log(State(s): State<AppState>) -> ApiResult<Vec<InventoryRequest>> {
    blocking(move || s.inventory_log()).await
}

async fn inventory_request(State(s): State<AppState>, Json(req): Json<InventoryRequest>) -> ApiResult<crate::state::InventoryReply> {
    blocking(move || s.inventory_request(req)).await
}

async fn list_cases(State(s): State<AppState>) -> ApiResult<Vec<String>> {
    blocking(move || s.case_ids()).await
}

#[derive(Deserialize)]
struct CreateCase {
    case_id: String,
}

async fn create_case(
    State(s): State<AppState>,
    Json(body): Json<CreateCase>,
) -> Result<(StatusCode, Json<crate::workflow::WorkflowState>), ServiceError> {
    let state = blocking(move || s.create_case(&body.case_id)).await?;
    Ok((StatusCode::CREATED, state))
}

async fn get_case(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<crate::state::CaseView> {
    blocking(move || s.get_case(&id)).await
}

#[derive(Deserialize, Default)]
struct UploadQuery {
    stage: Option<String>,
    protocol: Option<String>,
    margin_mm: Option<f64>,
}

impl UploadQuery {
    fn stage(&self) -> Result<Option<Stage>, ServiceError> {
        self.stage
            .as_deref()
            .map(|s| Stage::parse(s).ok_or_else(|| ServiceError::Validation(format!("unknown stage `{s}`"))))
            .transpose()
    }

    fn protocol(&self) -> Result<Option<ProtocolKind>, ServiceError> {
        self.protocol.as_deref().map(|p| p.parse().map_err(ServiceError::Validation)).transpose()
    }
}

async fn upload_volume(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> ApiResult<crate::state::UploadResponse> {
    let (stage, protocol) = (q.stage()?, q.protocol()?);
    blocking(move || s.upload_volume(&id, stage, protocol, &body)).await
}

async fn upload_labels(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> ApiResult<crate::state::UploadResponse> {
    let stage = q.stage()?;
    blocking(move || s.upload_labels(&id, stage, &body)).await
}

async fn segment(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> ApiResult<crate::state::UploadResponse> {
    blocking(move || s.segment(&id, &body, q.margin_mm)).await
}

#[derive(Deserialize)]
struct EligibilityBody {
    eligibility: Eligibility,
}

async fn eligibility(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<EligibilityBody>,
) -> ApiResult<crate::workflow::WorkflowState> {
    blocking(move || s.set_eligibility(&id, b.eligibility)).await
}

#[derive(Deserialize)]
struct CompareBody {
    candidates: Vec<String>,
    #[serde(default)]
    registration: Option<RigidTransform>,
}

async fn compare(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<CompareBody>,
) -> ApiResult<crate::workflow::DeviceComparison> {
    blocking(move || s.compare_devices(&id, &b.candidates, b.registration)).await
}

#[derive(Deserialize)]
struct SelectBody {
    device: String,
}

async fn select(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<SelectBody>,
) -> ApiResult<crate::workflow::WorkflowState> {
    blocking(move || s.select_device(&id, &b.device)).await
}

async fn register(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<RegistrationRequest>,
) -> ApiResult<crate::state::RegistrationResponse> {
    blocking(move || s.register(&id, &b)).await
}

#[derive(Serialize)]
struct PlanView {
    plan: Option<brachy_core::planning::PlanFile>,
    report: Option<crate::state::DoseReport>,
}

async fn get_plan(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<PlanView> {
    blocking(move || s.get_case(&id).map(|c| PlanView { plan: c.plan, report: c.report })).await
}

#[derive(Deserialize)]
struct PatchBody {
    hole_id: String,
    edit: NeedleEdit,
}

async fn patch_plan(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<PatchBody>,
) -> ApiResult<crate::state::ReplanResponse> {
    blocking(move || s.edit_plan(&id, &b.hole_id, &b.edit)).await
}

async fn prescription(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(rx): Json<Prescription>,
) -> ApiResult<crate::workflow::WorkflowState> {
    blocking(move || s.set_prescription(&id, rx)).await
}

#[derive(Deserialize)]
struct AdvanceBody {
    to: WorkflowStage,
}

async fn advance(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(b): Json<AdvanceBody>,
) -> ApiResult<crate::workflow::WorkflowState> {
    blocking(move || s.advance(&id, b.to)).await
}

async fn followup(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<brachy_core::archive::Overlay> {
    blocking(move || s.followup(&id)).await
}

#[derive(Deserialize)]
struct SliceQuery {
    #[serde(default = "default_source")]
    source: SliceSource,
    #[serde(default = "default_axis")]
    axis: usize,
    index: usize,
}

fn default_source() -> SliceSource {
    SliceSource::Volume
}

fn default_axis() -> usize {
    2
}

async fn slice(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<crate::state::SliceResponse> {
    blocking(move || s.slice(&id, q.source, q.axis, q.index)).await
}

async fn dvh(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<crate::state::DvhResponse>> {
    blocking(move || s.dvh(&id)).await
}
