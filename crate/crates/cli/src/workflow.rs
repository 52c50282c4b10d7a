//! Scripted end-to-end run on the phantom: ARRIVAL through POSTOP against a
//! local archive with a fixed clock, so reruns produce identical archives.

use std::path::Path;

use brachy_core::archive::{sha256_hex, Clock, Overlay, Stage};
use brachy_core::dosimetry::VerdictRow;
use brachy_core::igtlink::Message;
use brachy_core::phantom::{pelvis, PhantomSpec};
use brachy_core::planning::NeedleEdit;
use brachy_core::volume::ProtocolKind;
use brachy_service::state::RegistrationRequest;
use brachy_service::{AppState, Eligibility, ServiceConfig, WorkflowStage};
use chrono::{TimeZone, Utc};
use serde::Serialize;

use crate::io::{domain, emit, usage, Outcome};

pub const DEVICES: [&str; 2] = ["template-6x6", "template-6x6-fine"];

#[derive(Serialize)]
struct Step {
    stage: WorkflowStage,
    action: String,
}

#[derive(Serialize)]
struct Summary {
    case_id: String,
    steps: Vec<Step>,
    overlay: Overlay,
    verdicts: Vec<VerdictRow>,
    archive_sha256: String,
}

pub fn run(json: bool, data: &Path, case_id: &str, size: usize, seed: u64) -> Outcome {
    if size < 32 {
        return Err(usage("workflow needs --size >= 32"));
    }
    std::fs::create_dir_all(data).map_err(|e| domain(format!("cannot create {}: {e}", data.display())))?;
    let mut cfg = ServiceConfig::new(data);
    cfg.clock = Clock::Fixed(Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap());
    let state = AppState::open(cfg).map_err(domain)?;
    let spec = PhantomSpec { size, seed, ..PhantomSpec::default() };
    let ph = pelvis(&spec);
    let mut steps = Vec::new();
    let mut log = |stage: WorkflowStage, action: &str| steps.push(Step { stage, action: action.into() });

    let st = state.create_case(case_id).map_err(domain)?;
    log(st.stage, "case created");
    let up = state
        .upload_volume(case_id, Some(Stage::Pre), Some(ProtocolKind::T2), &ph.volume.to_svol_bytes().map_err(domain)?)
        .map_err(domain)?;
    log(up.stage, &format!("diagnostic volume v{} ({} advisories)", up.artifact.version, up.advisories.len()));
    let up = state.upload_labels(case_id, None, &ph.labels.to_svol_bytes().map_err(domain)?).map_err(domain)?;
    log(up.stage, "contours uploaded");
    let st = state.set_eligibility(case_id, Eligibility::Eligible).map_err(domain)?;
    log(st.stage, "eligible");

    let cmp = state.compare_devices(case_id, &DEVICES.map(String::from), None).map_err(domain)?;
    let reach: Vec<String> = cmp.reports.iter().map(|r| format!("{} {}/{}", r.device, r.summary, r.rows.len())).collect();
    log(st.stage, &format!("compared devices: {}", reach.join(", ")));
    // the reference needle depths are laid out for the phantom's template
    let best = ph.device.name.clone();
    let st = state.select_device(case_id, &best).map_err(domain)?;
    log(st.stage, &format!("selected {best}"));

    let (model, image) = ph.fiducials();
    let arr = |v: &[nalgebra::Point3<f64>]| v.iter().map(|q| [q.x, q.y, q.z]).collect::<Vec<_>>();
    let req = RegistrationRequest {
        model_points: arr(&model),
        image_points: arr(&image),
        icp: None,
    };
    let reg = state.register(case_id, &req).map_err(domain)?;
    log(WorkflowStage::Preplan, &format!("registered (landmark residual {:.2e} mm)", reg.landmark_residual_mm));

    let mut placed = 0;
    for n in ph.reference_plan().active_needles() {
        state.edit_plan(case_id, &n.hole_id, &NeedleEdit::Place { depth_mm: n.depth }).map_err(domain)?;
        placed += 1;
    }
    log(WorkflowStage::Preplan, &format!("{placed} needles placed"));

    let st = state.advance(case_id, WorkflowStage::Intraop).map_err(domain)?;
    log(st.stage, "advanced");
    // intraoperative tracker update, delivered as if from an igtlink peer
    let msg = Message::transform(case_id, 1, &reg.transform);
    state.apply_igtl_message(1, &msg).map_err(domain)?;
    log(st.stage, "tracker registration applied");
    state.release_peer(1);

    let st = state.advance(case_id, WorkflowStage::Postop).map_err(domain)?;
    log(st.stage, "advanced");
    let post = pelvis(&PhantomSpec { seed: seed.wrapping_add(1), ..spec });
    let up = state
        .upload_volume(case_id, Some(Stage::Post), Some(ProtocolKind::T2), &post.volume.to_svol_bytes().map_err(domain)?)
        .map_err(domain)?;
    log(up.stage, "follow-up volume");

    let overlay = state.followup(case_id).map_err(domain)?;
    let verdicts = state.get_case(case_id).map_err(domain)?.report.map(|r| r.verdicts).unwrap_or_default();
    let summary = Summary {
        case_id: case_id.into(),
        steps,
        overlay,
        verdicts,
        archive_sha256: tree_digest(&state.archive().case_dir(case_id).map_err(domain)?).map_err(domain)?,
    };
    emit(json, "workflow", &summary, || {
        let mut s = String::new();
        for step in &summary.steps {
            s += &format!("{:<17} {}\n", step.stage.as_str(), step.action);
        }
        match &summary.overlay {
            Overlay::Complete { volume, device, transform } => {
                s += &format!("follow-up overlay: {} + {} + {}\n", volume.filename, device.filename, transform.filename)
            }
            Overlay::Incomplete { missing } => s += &format!("follow-up incomplete: {}\n", missing.join(", ")),
        }
        s += &format!("archive sha256 {}", summary.archive_sha256);
        s
    })
}

/// Digest over every file below `root`: sorted relative paths and content
/// hashes.
pub fn tree_digest(root: &Path) -> std::io::Result<String> {
    let mut entries = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir)? {
            let e = e?;
            let path = e.path();
            if e.file_type()?.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("below root").to_string_lossy().replace('\\', "/");
                entries.push(format!("{rel}\0{}\n", sha256_hex(&std::fs::read(&path)?)));
            }
        }
    }
    entries.sort();
    Ok(sha256_hex(entries.concat().as_bytes()))
}
