use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use brachy_core::archive::{Archive, ArtifactKind, ArtifactRef, Clock, Overlay, Stage};
use brachy_core::dosimetry::{
    check_constraints, dvh, plan_dose, structure_metrics, ConstraintSet, DoseGrid, DoseModel, DvhPoint, StructureMetrics,
    VerdictRow,
};
use brachy_core::igtlink::{Message, Peer, ServerEvent, TRANSFORM};
use brachy_core::mesh::{sample_surface, TemplateModel};
use brachy_core::phantom::APPLICATOR;
use brachy_core::planning::{evaluate_feasibility, edit_needle, NeedleEdit, NeedlePlan, PlanFile};
use brachy_core::registration::{fit_landmarks, icp_refine, IcpConfig, IcpReport, LandmarkPairs, RigidTransform};
use brachy_core::segmentation::{expand_margin, growcut, surface_cloud};
use brachy_core::volume::{
    extract_slice, validate_protocol, Advisory, DType, Interpolation, LabelMap, ProtocolKind, ScalarVolume, SliceImage,
    SlicePlane, StructureKind,
};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::devices::{DeviceCatalog, DeviceInfo};
use crate::error::ServiceError;
use crate::workflow::{DeviceComparison, Eligibility, Prescription, WorkflowStage, WorkflowState};

pub const WORKFLOW_META: &str = "workflow.json";
pub const DEFAULT_GROWCUT_PASSES: usize = 500;

type Result<T> = std::result::Result<T, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub clock: Clock,
    pub devices: DeviceCatalog,
    pub dose_model: DoseModel,
    pub constraints: ConstraintSet,
    /// Depth window for device comparison (mm).
    pub comparison_depths: (f64, f64),
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            data_dir: data_dir.into(),
            clock: Clock::System,
            devices: DeviceCatalog::default(),
            dose_model: DoseModel::default(),
            constraints: ConstraintSet::default(),
            comparison_depths: (0.0, 150.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryRequest {
    pub case_id: Option<String>,
    pub device: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryReply {
    pub available: bool,
    pub lead_time_days: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseReport {
    pub prescription: Prescription,
    pub max_dose_gy: f64,
    pub metrics: Vec<StructureMetrics>,
    pub verdicts: Vec<VerdictRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanResponse {
    pub case_id: String,
    pub revision: u64,
    pub plan: PlanFile,
    pub plan_ref: ArtifactRef,
    pub report: DoseReport,
    pub report_ref: ArtifactRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanCause {
    Edit,
    Registration,
    Prescription,
    Igtlink,
}

/// Broadcast after every recomputed plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanEvent {
    pub case_id: String,
    pub revision: u64,
    pub cause: ReplanCause,
    pub verdicts: Vec<VerdictRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub workflow: WorkflowState,
    pub plan: Option<PlanFile>,
    pub report: Option<DoseReport>,
    pub igtl_peer: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadResponse {
    pub stage: WorkflowStage,
    pub artifact: ArtifactRef,
    pub advisories: Vec<Advisory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpRequest {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub config: IcpConfig,
}

fn default_samples() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRequest {
    pub model_points: Vec<[f64; 3]>,
    pub image_points: Vec<[f64; 3]>,
    #[serde(default)]
    pub icp: Option<IcpRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResponse {
    pub landmark_transform: RigidTransform,
    pub landmark_residual_mm: f64,
    pub icp: Option<IcpReport>,
    pub transform: RigidTransform,
    pub artifact: ArtifactRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceSource {
    Volume,
    Labels,
    Dose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub source: SliceSource,
    pub plane: SlicePlane,
    pub image: SliceImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhResponse {
    pub structure: StructureKind,
    pub points: Vec<DvhPoint>,
}

#[derive(Default, Clone)]
struct CaseCache {
    volume: Option<Arc<ScalarVolume>>,
    labels: Option<Arc<LabelMap>>,
    plan: Option<NeedlePlan>,
    dose: Option<Arc<DoseGrid>>,
    report: Option<DoseReport>,
}

struct CaseSlot {
    state: WorkflowState,
    cache: CaseCache,
}

struct Inner {
    archive: Archive,
    config: ServiceConfig,
    cases: RwLock<BTreeMap<String, Arc<RwLock<CaseSlot>>>>,
    inventory: Mutex<Vec<InventoryRequest>>,
    /// case id → igtlink peer bound to it
    bindings: Mutex<HashMap<String, u64>>,
    events: broadcast::Sender<ReplanEvent>,
}

/// Shared service state. Every operation is synchronous; mutations of one
/// case are serialized by that case's lock while other cases proceed.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

fn lock_err<T>(_: T) -> ServiceError {
    ServiceError::Internal("poisoned lock".into())
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| ServiceError::Internal(e.to_string()))
}

fn points(p: &[[f64; 3]]) -> Vec<Point3<f64>> {
    p.iter().map(|a| Point3::new(a[0], a[1], a[2])).collect()
}

impl AppState {
    /// Opens the archive under `config.data_dir` and restores every case.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        let archive = Archive::open_with_clock(&config.data_dir, config.clock)?;
        let (events, _) = broadcast::channel(64);
        let state = AppState {
            inner: Arc::new(Inner {
                archive,
                config,
                cases: RwLock::new(BTreeMap::new()),
                inventory: Mutex::new(Vec::new()),
                bindings: Mutex::new(HashMap::new()),
                events,
            }),
        };
        for id in state.inner.archive.case_ids()? {
            let wf = match state.inner.archive.read_meta(&id, WORKFLOW_META)? {
                Some(bytes) => serde_json::from_slice(&bytes)
                    .map_err(|e| ServiceError::Internal(format!("case {id}: bad workflow state: {e}")))?,
                None => WorkflowState::new(&id),
            };
            let slot = state.restore(wf)?;
            state.inner.cases.write().map_err(lock_err)?.insert(id, Arc::new(RwLock::new(slot)));
        }
        Ok(state)
    }

    pub fn archive(&self) -> &Archive {
        &self.inner.archive
    }

    pub fn devices(&self) -> Vec<DeviceInfo> {
        self.inner.config.devices.list()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ReplanEvent> {
        self.inner.events.subscribe()
    }

    fn restore(&self, state: WorkflowState) -> Result<CaseSlot> {
        let a = &self.inner.archive;
        let mut cache = CaseCache::default();
        if let Some(r) = &state.active_volume {
            cache.volume = Some(Arc::new(ScalarVolume::from_svol_bytes(&a.fetch(r)?)?));
        }
        if let Some(r) = &state.active_labels {
            cache.labels = Some(Arc::new(LabelMap::from_svol_bytes(&a.fetch(r)?)?));
        }
        if let (Some(r), Some(dev)) = (&state.active_plan, &state.device) {
            let file: PlanFile =
                serde_json::from_slice(&a.fetch(r)?).map_err(|e| ServiceError::Internal(e.to_string()))?;
            cache.plan = Some(file.into_plan(self.device(dev)?)?);
        }
        if let Some(r) = &state.active_report {
            cache.report =
                Some(serde_json::from_slice(&a.fetch(r)?).map_err(|e| ServiceError::Internal(e.to_string()))?);
        }
        if let (Some(plan), Some(labels)) = (&cache.plan, &cache.labels) {
            cache.dose = Some(Arc::new(plan_dose(plan, &labels.grid, &self.inner.config.dose_model)?));
        }
        Ok(CaseSlot { state, cache })
    }

    fn device(&self, id: &str) -> Result<Arc<TemplateModel>> {
        self.inner.config.devices.get(id).ok_or_else(|| ServiceError::Validation(format!("unknown device `{id}`")))
    }

    fn slot(&self, case_id: &str) -> Result<Arc<RwLock<CaseSlot>>> {
        self.inner
            .cases
            .read()
            .map_err(lock_err)?
            .get(case_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(case_id.to_string()))
    }

    /// Runs `f` under the case's write lock and persists the workflow state
    /// if `f` succeeds.
    fn mutate<T>(&self, case_id: &str, f: impl FnOnce(&Self, &mut CaseSlot) -> Result<T>) -> Result<T> {
        let slot = self.slot(case_id)?;
        let mut guard = slot.write().map_err(lock_err)?;
        let mut draft = CaseSlot { state: guard.state.clone(), cache: guard.cache.clone() };
        let out = f(self, &mut draft)?;
        draft.state.revision += 1;
        self.inner.archive.write_meta(case_id, WORKFLOW_META, &json(&draft.state)?)?;
        *guard = draft;
        Ok(out)
    }

    fn read<T>(&self, case_id: &str, f: impl FnOnce(&CaseSlot) -> Result<T>) -> Result<T> {
        let slot = self.slot(case_id)?;
        let guard = slot.read().map_err(lock_err)?;
        f(&guard)
    }

    pub fn case_ids(&self) -> Result<Vec<String>> {
        Ok(self.inner.cases.read().map_err(lock_err)?.keys().cloned().collect())
    }

    pub fn create_case(&self, case_id: &str) -> Result<WorkflowState> {
        let mut cases = self.inner.cases.write().map_err(lock_err)?;
        if cases.contains_key(case_id) || self.inner.archive.has_case(case_id) {
            return Err(ServiceError::Conflict(case_id.to_string()));
        }
        self.inner.archive.create_case(case_id)?;
        let state = WorkflowState::new(case_id);
        self.inner.archive.write_meta(case_id, WORKFLOW_META, &json(&state)?)?;
        cases.insert(case_id.to_string(), Arc::new(RwLock::new(CaseSlot { state: state.clone(), cache: CaseCache::default() })));
        Ok(state)
    }

    pub fn get_case(&self, case_id: &str) -> Result<CaseView> {
        let igtl_peer = self.inner.bindings.lock().map_err(lock_err)?.get(case_id).copied();
        self.read(case_id, |s| {
            Ok(CaseView {
                workflow: s.state.clone(),
                plan: s.cache.plan.as_ref().map(PlanFile::from_plan),
                report: s.cache.report.clone(),
                igtl_peer,
            })
        })
    }

    fn upload_stage(current: WorkflowStage, tag: Option<Stage>, what: &str) -> Result<Stage> {
        let allowed = current.archive_stage().ok_or_else(|| ServiceError::state(current, format!("{what} upload")))?;
        let stage = tag.unwrap_or(allowed);
        if stage > allowed {
            return Err(ServiceError::state(current, format!("{what} upload tagged {stage}")));
        }
        Ok(stage)
    }

    /// Archives a volume. The first upload moves an arriving case to
    /// diagnosis.
    pub fn upload_volume(
        &self,
        case_id: &str,
        tag: Option<Stage>,
        protocol: Option<ProtocolKind>,
        bytes: &[u8],
    ) -> Result<UploadResponse> {
        self.mutate(case_id, |this, slot| {
            let stage = Self::upload_stage(slot.state.stage, tag, "volume")?;
            let vol = ScalarVolume::from_svol_bytes(bytes)?;
            let advisories = protocol.map(|k| validate_protocol(&vol, k)).unwrap_or_default();
            let artifact = this.inner.archive.store(case_id, stage, ArtifactKind::Volume, bytes)?;
            if slot.state.stage == WorkflowStage::Arrival {
                slot.state.stage = WorkflowStage::Diagnosis;
            }
            slot.state.active_volume = Some(artifact.clone());
            slot.cache.volume = Some(Arc::new(vol));
            Ok(UploadResponse { stage: slot.state.stage, artifact, advisories })
        })
    }

    fn check_grid(slot: &CaseSlot, labels: &LabelMap) -> Result<()> {
        match &slot.cache.volume {
            Some(v) if v.grid != labels.grid => Err(ServiceError::Validation("label grid differs from the active volume".into())),
            _ => Ok(()),
        }
    }

    fn install_labels(&self, case_id: &str, slot: &mut CaseSlot, stage: Stage, labels: LabelMap) -> Result<ArtifactRef> {
        let artifact = self.inner.archive.store(case_id, stage, ArtifactKind::Labels, &labels.to_svol_bytes()?)?;
        slot.state.active_labels = Some(artifact.clone());
        slot.cache.labels = Some(Arc::new(labels));
        slot.cache.dose = None;
        Ok(artifact)
    }

    pub fn upload_labels(&self, case_id: &str, tag: Option<Stage>, bytes: &[u8]) -> Result<UploadResponse> {
        self.mutate(case_id, |this, slot| {
            if slot.state.stage == WorkflowStage::Arrival {
                return Err(ServiceError::state(slot.state.stage, "label upload before imaging"));
            }
            let stage = Self::upload_stage(slot.state.stage, tag, "label")?;
            let labels = LabelMap::from_svol_bytes(bytes)?;
            Self::check_grid(slot, &labels)?;
            let artifact = this.install_labels(case_id, slot, stage, labels)?;
            Ok(UploadResponse { stage: slot.state.stage, artifact, advisories: Vec::new() })
        })
    }

    /// GrowCut from a seed map over the active volume, optionally followed by
    /// an HR-CTV → IR-CTV margin.
    pub fn segment(&self, case_id: &str, seeds: &[u8], margin_mm: Option<f64>) -> Result<UploadResponse> {
        self.mutate(case_id, |this, slot| {
            let stage = Self::upload_stage(slot.state.stage, None, "segmentation")?;
            let vol = slot.cache.volume.clone().ok_or_else(|| ServiceError::Validation("no volume uploaded".into()))?;
            let seeds = LabelMap::from_svol_bytes(seeds)?;
            let mut labels = growcut(&vol, &seeds, DEFAULT_GROWCUT_PASSES)?;
            if let Some(m) = margin_mm {
                labels = expand_margin(&labels, &StructureKind::HrCtv, &StructureKind::IrCtv, m, None)?;
            }
            let artifact = this.install_labels(case_id, slot, stage, labels)?;
            Ok(UploadResponse { stage: slot.state.stage, artifact, advisories: Vec::new() })
        })
    }

    pub fn set_eligibility(&self, case_id: &str, eligibility: Eligibility) -> Result<WorkflowState> {
        self.mutate(case_id, |_, slot| {
            let st = &mut slot.state;
            if st.stage != WorkflowStage::Diagnosis {
                return Err(ServiceError::state(st.stage, "eligibility decision"));
            }
            st.stage = match eligibility {
                Eligibility::Eligible => WorkflowStage::DeviceSelection,
                Eligibility::Ineligible => WorkflowStage::Closed,
                Eligibility::Undecided => return Err(ServiceError::Validation("eligibility must be decided".into())),
            };
            st.eligibility = eligibility;
            Ok(st.clone())
        })
    }

    /// Canned availability answer; every request is recorded.
    pub fn inventory_request(&self, req: InventoryRequest) -> Result<InventoryReply> {
        tracing::info!(device = %req.device, case = ?req.case_id, "inventory request");
        self.inner.inventory.lock().map_err(lock_err)?.push(req);
        Ok(InventoryReply { available: true, lead_time_days: 0 })
    }

    pub fn inventory_log(&self) -> Result<Vec<InventoryRequest>> {
        Ok(self.inner.inventory.lock().map_err(lock_err)?.clone())
    }

    /// Feasibility of every candidate under `registration` (identity when
    /// absent), replacing any earlier comparison.
    pub fn compare_devices(
        &self,
        case_id: &str,
        candidates: &[String],
        registration: Option<RigidTransform>,
    ) -> Result<DeviceComparison> {
        if candidates.is_empty() {
            return Err(ServiceError::Validation("no candidate devices".into()));
        }
        let models = candidates.iter().map(|c| self.device(c)).collect::<Result<Vec<_>>>()?;
        let out = self.mutate(case_id, |this, slot| {
            if slot.state.stage != WorkflowStage::DeviceSelection {
                return Err(ServiceError::state(slot.state.stage, "device comparison"));
            }
            let labels = slot.cache.labels.clone().ok_or_else(|| ServiceError::Validation("no labels uploaded".into()))?;
            let reg = registration.unwrap_or_default();
            let reports = models
                .iter()
                .map(|m| evaluate_feasibility(m, &reg, &labels, this.inner.config.comparison_depths))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let cmp = DeviceComparison { candidates: candidates.to_vec(), reports, selected: None };
            slot.state.comparison = Some(cmp.clone());
            Ok(cmp)
        })?;
        for c in candidates {
            self.inventory_request(InventoryRequest { case_id: Some(case_id.to_string()), device: c.clone() })?;
        }
        Ok(out)
    }

    /// Picks one compared device, archives its model and opens planning.
    pub fn select_device(&self, case_id: &str, device: &str) -> Result<WorkflowState> {
        self.mutate(case_id, |this, slot| {
            if slot.state.stage != WorkflowStage::DeviceSelection {
                return Err(ServiceError::state(slot.state.stage, "device selection"));
            }
            let cmp = slot
                .state
                .comparison
                .as_mut()
                .ok_or_else(|| ServiceError::Validation("run a device comparison first".into()))?;
            if !cmp.candidates.iter().any(|c| c == device) {
                return Err(ServiceError::Validation(format!("`{device}` was not a comparison candidate")));
            }
            cmp.selected = Some(device.to_string());
            let model = this.device(device)?;
            this.inner.archive.store(case_id, Stage::Pre, ArtifactKind::Device, &model.mesh.to_binary_stl())?;
            slot.state.device = Some(device.to_string());
            slot.state.stage = WorkflowStage::Preplan;
            let registration = match &slot.state.active_registration {
                Some(r) => this.read_transform(r)?,
                None => RigidTransform::identity(),
            };
            let plan = NeedlePlan::new(model, registration, Stage::Pre);
            this.commit_plan(case_id, slot, plan, None)?;
            Ok(slot.state.clone())
        })
    }

    fn read_transform(&self, r: &ArtifactRef) -> Result<RigidTransform> {
        serde_json::from_slice(&self.inner.archive.fetch(r)?).map_err(|e| ServiceError::Internal(e.to_string()))
    }

    /// Archives the plan and, when labels are present, its dose report.
    fn commit_plan(
        &self,
        case_id: &str,
        slot: &mut CaseSlot,
        plan: NeedlePlan,
        cause: Option<ReplanCause>,
    ) -> Result<Option<ReplanResponse>> {
        let stage = slot.state.stage.archive_stage().unwrap_or(Stage::Pre);
        let file = PlanFile::from_plan(&plan);
        let plan_ref = self.inner.archive.store(case_id, stage, ArtifactKind::Plan, &json(&file)?)?;
        slot.state.active_plan = Some(plan_ref.clone());
        slot.cache.plan = Some(plan);
        let Some(labels) = slot.cache.labels.clone() else {
            slot.cache.dose = None;
            slot.cache.report = None;
            slot.state.active_report = None;
            return Ok(None);
        };
        let plan = slot.cache.plan.as_ref().expect("just set");
        let cfg = &self.inner.config;
        let dose = plan_dose(plan, &labels.grid, &cfg.dose_model)?;
        let rx = slot.state.prescription;
        let report = DoseReport {
            prescription: rx,
            max_dose_gy: dose.max(),
            metrics: structure_metrics(&dose, &labels)?,
            verdicts: check_constraints(&dose, &labels, &cfg.constraints, rx.ebrt_gy, rx.fractions)?,
        };
        let report_ref = self.inner.archive.store(case_id, stage, ArtifactKind::Report, &json(&report)?)?;
        slot.state.active_report = Some(report_ref.clone());
        slot.cache.dose = Some(Arc::new(dose));
        slot.cache.report = Some(report.clone());
        let revision = slot.state.revision + 1;
        if let Some(cause) = cause {
            let _ = self.inner.events.send(ReplanEvent {
                case_id: case_id.to_string(),
                revision,
                cause,
                verdicts: report.verdicts.clone(),
            });
        }
        Ok(Some(ReplanResponse { case_id: case_id.to_string(), revision, plan: file, plan_ref, report, report_ref }))
    }

    /// One needle edit followed by a full synchronous dose evaluation.
    pub fn edit_plan(&self, case_id: &str, hole_id: &str, edit: &NeedleEdit) -> Result<ReplanResponse> {
        self.mutate(case_id, |this, slot| {
            if !slot.state.stage.allows_planning() {
                return Err(ServiceError::state(slot.state.stage, "plan edit"));
            }
            if slot.cache.labels.is_none() {
                return Err(ServiceError::Validation("dose evaluation needs a label map".into()));
            }
            let plan = slot.cache.plan.as_ref().ok_or_else(|| ServiceError::Internal("planning stage without a plan".into()))?;
            let next = edit_needle(plan, hole_id, edit)?;
            Ok(this.commit_plan(case_id, slot, next, Some(ReplanCause::Edit))?.expect("labels present"))
        })
    }

    pub fn set_prescription(&self, case_id: &str, rx: Prescription) -> Result<WorkflowState> {
        if !(rx.ebrt_gy.is_finite() && rx.ebrt_gy >= 0.0) {
            return Err(ServiceError::Validation("EBRT dose must be a non-negative number".into()));
        }
        self.mutate(case_id, |this, slot| {
            if slot.state.stage >= WorkflowStage::Postop {
                return Err(ServiceError::state(slot.state.stage, "prescription change"));
            }
            slot.state.prescription = rx;
            if let Some(plan) = slot.cache.plan.clone() {
                this.commit_plan(case_id, slot, plan, Some(ReplanCause::Prescription))?;
            }
            Ok(slot.state.clone())
        })
    }

    fn install_registration(
        &self,
        case_id: &str,
        slot: &mut CaseSlot,
        t: &RigidTransform,
        cause: ReplanCause,
    ) -> Result<ArtifactRef> {
        let stage = slot.state.stage.archive_stage().ok_or_else(|| ServiceError::state(slot.state.stage, "registration"))?;
        let artifact = self.inner.archive.store(case_id, stage, ArtifactKind::Transform, &json(t)?)?;
        slot.state.active_registration = Some(artifact.clone());
        if let Some(plan) = slot.cache.plan.clone() {
            self.commit_plan(case_id, slot, plan.with_registration(*t), Some(cause))?;
        }
        Ok(artifact)
    }

    /// Landmark fit, optionally refined by ICP against the applicator
    /// surface in the active label map.
    pub fn register(&self, case_id: &str, req: &RegistrationRequest) -> Result<RegistrationResponse> {
        self.mutate(case_id, |this, slot| {
            let st = slot.state.stage;
            if !matches!(st, WorkflowStage::Preplan | WorkflowStage::Intraop | WorkflowStage::Postop) {
                return Err(ServiceError::state(st, "registration"));
            }
            let device = this.device(slot.state.device.as_deref().expect("device selected before PREPLAN"))?;
            let pairs = LandmarkPairs::new(points(&req.model_points), points(&req.image_points))?;
            let landmark = fit_landmarks(&pairs)?;
            let residual = brachy_core::registration::landmark_residual(&landmark, &pairs);
            let icp = match &req.icp {
                Some(icp) => {
                    let labels = slot.cache.labels.clone().ok_or_else(|| ServiceError::Validation("ICP needs a label map".into()))?;
                    let target = surface_cloud(&labels, &StructureKind::Other(APPLICATOR.into()))?;
                    let model = sample_surface(&device.mesh, icp.samples, icp.seed)
                        .map_err(|e| ServiceError::Validation(e.to_string()))?;
                    Some(icp_refine(&model, &target, &landmark, &icp.config)?)
                }
                None => None,
            };
            let transform = icp.as_ref().map(|r| r.transform).unwrap_or(landmark);
            let artifact = this.install_registration(case_id, slot, &transform, ReplanCause::Registration)?;
            Ok(RegistrationResponse { landmark_transform: landmark, landmark_residual_mm: residual, icp, transform, artifact })
        })
    }

    /// Moves along one workflow edge.
    pub fn advance(&self, case_id: &str, to: WorkflowStage) -> Result<WorkflowState> {
        let out = self.mutate(case_id, |_, slot| {
            let st = &mut slot.state;
            if !st.stage.can_advance_to(to) {
                return Err(ServiceError::state(st.stage, format!("transition to {to}")));
            }
            let ready = match (st.stage, to) {
                (WorkflowStage::Diagnosis, WorkflowStage::DeviceSelection) => st.eligibility == Eligibility::Eligible,
                (WorkflowStage::Diagnosis, WorkflowStage::Closed) => st.eligibility == Eligibility::Ineligible,
                (WorkflowStage::DeviceSelection, WorkflowStage::Preplan) => st.device.is_some(),
                _ => true,
            };
            if !ready {
                return Err(ServiceError::state(st.stage, format!("transition to {to} before its precondition")));
            }
            st.stage = to;
            if let Some(plan) = slot.cache.plan.as_mut() {
                if let Some(s) = to.archive_stage() {
                    plan.stage = s;
                }
            }
            Ok(slot.state.clone())
        })?;
        if out.stage != WorkflowStage::Intraop {
            self.inner.bindings.lock().map_err(lock_err)?.remove(case_id);
        }
        Ok(out)
    }

    pub fn followup(&self, case_id: &str) -> Result<Overlay> {
        self.slot(case_id)?;
        Ok(self.inner.archive.followup_overlay(case_id)?)
    }

    pub fn slice(&self, case_id: &str, source: SliceSource, axis: usize, index: usize) -> Result<SliceResponse> {
        self.read(case_id, |s| {
            let missing = |what: &str| ServiceError::Validation(format!("no {what} available"));
            let (vol, interp) = match source {
                SliceSource::Volume => ((*s.cache.volume.clone().ok_or_else(|| missing("volume"))?).clone(), Interpolation::Trilinear),
                SliceSource::Labels => {
                    let l = s.cache.labels.clone().ok_or_else(|| missing("label map"))?;
                    let v = l.voxels.iter().map(|&c| c as f32).collect();
                    (ScalarVolume::new(l.grid.clone(), DType::Uint8, v, "LABELS")?, Interpolation::Nearest)
                }
                SliceSource::Dose => (s.cache.dose.clone().ok_or_else(|| missing("dose"))?.to_volume(), Interpolation::Trilinear),
            };
            let plane = SlicePlane::grid_aligned(&vol.grid, axis, index)?;
            let image = extract_slice(&vol, &plane, interp);
            Ok(SliceResponse { source, plane, image })
        })
    }

    pub fn dvh(&self, case_id: &str) -> Result<Vec<DvhResponse>> {
        self.read(case_id, |s| {
            let (Some(dose), Some(labels)) = (&s.cache.dose, &s.cache.labels) else {
                return Err(ServiceError::Validation("no dose computed yet".into()));
            };
            let mut out = Vec::new();
            for kind in labels.legend.values() {
                if labels.count(kind) > 0 {
                    out.push(DvhResponse { structure: kind.clone(), points: dvh(dose, labels, kind)?.points() });
                }
            }
            Ok(out)
        })
    }

    /// Intraoperative update: a TRANSFORM whose device name is a case in
    /// INTRAOP becomes that case's registration. The first peer to send one
    /// owns the case until it disconnects or the case leaves INTRAOP.
    pub fn apply_igtl_message(&self, peer: u64, msg: &Message) -> Result<Option<ReplanResponse>> {
        if msg.type_name != TRANSFORM {
            return Ok(None);
        }
        let case_id = msg.device_name.as_str();
        let stage = self.read(case_id, |s| Ok(s.state.stage))?;
        if stage != WorkflowStage::Intraop {
            return Err(ServiceError::state(stage, "igtlink transform"));
        }
        {
            let mut b = self.inner.bindings.lock().map_err(lock_err)?;
            match b.get(case_id) {
                Some(&owner) if owner != peer => {
                    return Err(ServiceError::Validation(format!("case `{case_id}` is bound to igtlink peer {owner}")))
                }
                _ => {
                    b.insert(case_id.to_string(), peer);
                }
            }
        }
        let t = msg
            .as_rigid_transform()
            .expect("TRANSFORM body")
            .map_err(ServiceError::Registration)?;
        self.mutate(case_id, |this, slot| {
            if slot.state.stage != WorkflowStage::Intraop {
                return Err(ServiceError::state(slot.state.stage, "igtlink transform"));
            }
            this.install_registration(case_id, slot, &t, ReplanCause::Igtlink)?;
            let plan = slot.cache.plan.as_ref().map(PlanFile::from_plan);
            Ok(match (plan, slot.cache.report.clone(), slot.state.active_plan.clone(), slot.state.active_report.clone()) {
                (Some(plan), Some(report), Some(plan_ref), Some(report_ref)) => Some(ReplanResponse {
                    case_id: case_id.to_string(),
                    revision: slot.state.revision + 1,
                    plan,
                    plan_ref,
                    report,
                    report_ref,
                }),
                _ => None,
            })
        })
    }

    pub fn release_peer(&self, peer: u64) {
        if let Ok(mut b) = self.inner.bindings.lock() {
            b.retain(|_, p| *p != peer);
        }
    }

    /// Adapter for the igtlink listener.
    pub fn handle_igtl_event(&self, peer: Peer, event: ServerEvent) {
        match event {
            ServerEvent::Message(m) => {
                if let Err(e) = self.apply_igtl_message(peer.id, &m) {
                    tracing::warn!(peer = peer.id, device = %m.device_name, "igtlink message rejected: {e}");
                }
            }
            ServerEvent::Skipped(e) => tracing::warn!(peer = peer.id, "igtlink frame skipped: {e}"),
            ServerEvent::Closed(reason) => {
                if let Some(e) = reason {
                    tracing::warn!(peer = peer.id, "igtlink connection closed: {e}");
                }
                self.release_peer(peer.id);
            }
        }
    }
}
