use std::path::Path;
use std::sync::mpsc;
use std::time::Duration;

use brachy_core::dosimetry::{
    any_fail, check_constraints, dvh, plan_dose, structure_metrics, ConstraintSet, DoseGrid, DoseModel, DvhPoint,
    StructureMetrics, Verdict, VerdictRow,
};
use brachy_core::igtlink::{self, Body, Message, ServerConfig, ServerEvent};
use brachy_core::mesh::{parse_stl, save_stl, LoadOptions, StlFormat, TemplateModel};
use brachy_core::phantom::{pelvis, PhantomSpec};
use brachy_core::planning::{evaluate_feasibility, NeedlePlan, PlanFile};
use brachy_core::registration::{fit_landmarks, icp_refine, landmark_residual, IcpConfig, IcpReport, LandmarkPairs, RigidTransform};
use brachy_core::segmentation::{expand_margin, growcut, surface_cloud};
use brachy_core::mesh::sample_surface;
use brachy_core::volume::{Grid, LabelMap, StructureKind};
use brachy_service::devices::DeviceCatalog;
use brachy_service::{AppState, ServiceConfig};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::io::*;
use crate::{Cli, Command, StlFormatArg};

pub fn run(cli: &Cli) -> Outcome {
    let json = cli.json;
    match &cli.command {
        Command::Convert { input, output, format } => convert(json, input, output.as_deref(), *format),
        Command::Register { landmarks, icp, labels, target_structure, device, samples, seed, max_iterations, out } => {
            let icp = icp.then(|| IcpArgs {
                labels: labels.as_deref(),
                target: target_structure,
                device,
                samples: *samples,
                seed: *seed,
                max_iterations: *max_iterations,
            });
            register(json, landmarks, icp, out.as_deref())
        }
        Command::Growcut { volume, seeds, out, max_passes } => run_growcut(json, volume, seeds, out, *max_passes),
        Command::ExpandMargin { labels, source, target, margin_mm, out } => {
            run_expand(json, labels, source, target, *margin_mm, out)
        }
        Command::Feasibility { labels, device, transform, min_depth, max_depth } => {
            feasibility(json, labels, device, transform.as_deref(), (*min_depth, *max_depth))
        }
        Command::Dose { plan, labels, out } => dose(json, plan, labels, out),
        Command::Dvh { dose, labels, points } => run_dvh(json, dose, labels, *points),
        Command::Check { labels, dose, plan, ebrt, fractions, strict } => {
            check(json, labels, dose.as_deref(), plan.as_deref(), *ebrt, *fractions, *strict)
        }
        Command::Serve { data, http, igtl, no_igtl } => serve(data, *http, (!no_igtl).then_some(*igtl)),
        Command::IgtlSend { addr, device_name, transform, status, timestamp } => {
            igtl_send(json, *addr, device_name, transform.as_deref(), status.as_deref(), *timestamp)
        }
        Command::IgtlRecv { bind, count } => igtl_recv(json, *bind, *count),
        Command::Phantom { out, size, spacing, seed } => phantom(json, out, *size, *spacing, *seed),
        Command::Workflow { data, case_id, size, seed } => crate::workflow::run(json, data, case_id, *size, *seed),
    }
}

fn device(name: &str) -> Outcome<Arc<TemplateModel>> {
    DeviceCatalog::default().get(name).ok_or_else(|| usage(format!("unknown device `{name}`")))
}

fn read_plan(path: &Path) -> Outcome<NeedlePlan> {
    let file: PlanFile = read_json(path)?;
    let dev = device(&file.device)?;
    file.into_plan(dev).map_err(ctx(path))
}

#[derive(Serialize)]
struct GridInfo<'a> {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    orientation: [[f64; 3]; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    modality: Option<&'a str>,
}

impl<'a> GridInfo<'a> {
    fn new(g: &Grid, modality: Option<&'a str>) -> Self {
        GridInfo { dims: g.dims, spacing: g.spacing, origin: g.origin, orientation: g.orientation, modality }
    }
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Inspect<'a> {
    Labels { grid: GridInfo<'a>, structures: Vec<StructureCount> },
    Volume { grid: GridInfo<'a>, dtype: &'a str, min: f32, max: f32 },
    Mesh { triangles: usize, vertices: usize, surface_area_mm2: f64, output: Option<String> },
}

#[derive(Serialize)]
struct StructureCount {
    code: u8,
    structure: StructureKind,
    voxels: usize,
    volume_cc: f64,
}

fn structure_counts(labels: &LabelMap) -> Vec<StructureCount> {
    labels
        .legend
        .iter()
        .map(|(&code, kind)| {
            let voxels = labels.count(kind);
            StructureCount { code, structure: kind.clone(), voxels, volume_cc: voxels as f64 * labels.grid.voxel_volume_cc() }
        })
        .collect()
}

fn convert(json: bool, input: &Path, output: Option<&Path>, format: StlFormatArg) -> Outcome {
    let bytes = read_bytes(input)?;
    let is_svol = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("svol"));
    if is_svol {
        if output.is_some() {
            return Err(usage("SVOL inputs can only be inspected"));
        }
        if let Ok(labels) = LabelMap::from_svol_bytes(&bytes) {
            let structures = structure_counts(&labels);
            let human = structures
                .iter()
                .map(|s| format!("{:>3}  {:<20} {:>8} voxels  {:>9.3} cc", s.code, s.structure.name(), s.voxels, s.volume_cc))
                .collect::<Vec<_>>()
                .join("\n");
            let dims = labels.grid.dims;
            let body = Inspect::Labels { grid: GridInfo::new(&labels.grid, None), structures };
            return emit(json, "convert", &body, || format!("label map {}x{}x{}\n{human}", dims[0], dims[1], dims[2]));
        }
        let vol = brachy_core::volume::ScalarVolume::from_svol_bytes(&bytes).map_err(ctx(input))?;
        let (min, max) = vol.voxels.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let body = Inspect::Volume { grid: GridInfo::new(&vol.grid, Some(&vol.modality)), dtype: vol.dtype.as_str(), min, max };
        let g = &vol.grid;
        return emit(json, "convert", &body, || {
            format!(
                "{} volume {}x{}x{} spacing {:?} mm, values [{min}, {max}]",
                vol.modality, g.dims[0], g.dims[1], g.dims[2], g.spacing
            )
        });
    }
    let mesh = parse_stl(&bytes, LoadOptions::default()).map_err(ctx(input))?;
    if let Some(out) = output {
        let fmt = match format {
            StlFormatArg::Binary => StlFormat::Binary,
            StlFormatArg::Ascii => StlFormat::Ascii,
        };
        save_stl(&mesh, out, fmt).map_err(ctx(out))?;
    }
    let body = Inspect::Mesh {
        triangles: mesh.triangles.len(),
        vertices: mesh.vertices.len(),
        surface_area_mm2: mesh.surface_area(),
        output: output.map(|p| p.display().to_string()),
    };
    emit(json, "convert", &body, || {
        format!("{} triangles, {} vertices, area {:.3} mm²", mesh.triangles.len(), mesh.vertices.len(), mesh.surface_area())
    })
}

/// Landmark file layout.
#[derive(Debug, Serialize, Deserialize)]
pub struct Landmarks {
    pub model_points: Vec<[f64; 3]>,
    pub image_points: Vec<[f64; 3]>,
}

fn points(v: &[[f64; 3]]) -> Vec<Point3<f64>> {
    v.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()
}

struct IcpArgs<'a> {
    labels: Option<&'a Path>,
    target: &'a str,
    device: &'a str,
    samples: usize,
    seed: u64,
    max_iterations: usize,
}

#[derive(Serialize)]
struct RegisterOutput {
    transform: RigidTransform,
    landmark_transform: RigidTransform,
    landmark_residual_mm: f64,
    icp: Option<IcpReport>,
}

fn register(json: bool, landmarks: &Path, icp: Option<IcpArgs>, out: Option<&Path>) -> Outcome {
    let lm: Landmarks = read_json(landmarks)?;
    let pairs = LandmarkPairs::new(points(&lm.model_points), points(&lm.image_points)).map_err(ctx(landmarks))?;
    let fit = fit_landmarks(&pairs).map_err(ctx(landmarks))?;
    let residual = landmark_residual(&fit, &pairs);
    let report = match icp {
        Some(a) => {
            let path = a.labels.ok_or_else(|| usage("--icp needs --labels"))?;
            let labels = read_labels(path)?;
            let target = surface_cloud(&labels, &StructureKind::from(a.target)).map_err(ctx(path))?;
            let model = sample_surface(&device(a.device)?.mesh, a.samples, a.seed).map_err(domain)?;
            let cfg = IcpConfig { max_iterations: a.max_iterations, ..IcpConfig::default() };
            Some(icp_refine(&model, &target, &fit, &cfg).map_err(domain)?)
        }
        None => None,
    };
    let result = RegisterOutput {
        transform: report.as_ref().map(|r| r.transform).unwrap_or(fit),
        landmark_transform: fit,
        landmark_residual_mm: residual,
        icp: report,
    };
    if let Some(out) = out {
        write_json(out, &result)?;
    }
    emit(json, "register", &result, || {
        let mut s = format!("landmark residual {:.3e} mm", result.landmark_residual_mm);
        if let Some(r) = &result.icp {
            s += &format!("\nicp: {} iterations, rms {:.4} mm, converged {}", r.iterations_used, r.final_rms, r.converged);
        }
        let m = result.transform.to_row_major();
        for row in m.chunks(4) {
            s += &format!("\n{:>12.6} {:>12.6} {:>12.6} {:>12.6}", row[0], row[1], row[2], row[3]);
        }
        s
    })
}

fn run_growcut(json: bool, volume: &Path, seeds: &Path, out: &Path, max_passes: usize) -> Outcome {
    let vol = read_volume(volume)?;
    let seed_map = read_labels(seeds)?;
    let labels = growcut(&vol, &seed_map, max_passes).map_err(domain)?;
    write_bytes(out, &labels.to_svol_bytes().map_err(domain)?)?;
    let counts = structure_counts(&labels);
    emit(json, "growcut", &serde_json::json!({ "output": out.display().to_string(), "structures": counts }), || {
        counts.iter().map(|s| format!("{:<20} {:>8} voxels", s.structure.name(), s.voxels)).collect::<Vec<_>>().join("\n")
    })
}

fn run_expand(json: bool, labels: &Path, source: &str, target: &str, margin: f64, out: &Path) -> Outcome {
    let input = read_labels(labels)?;
    let (source, target) = (StructureKind::from(source), StructureKind::from(target));
    let grown = expand_margin(&input, &source, &target, margin, None).map_err(domain)?;
    write_bytes(out, &grown.to_svol_bytes().map_err(domain)?)?;
    let voxels = grown.count(&target);
    let cc = voxels as f64 * grown.grid.voxel_volume_cc();
    let body = serde_json::json!({ "output": out.display().to_string(), "target": target, "voxels": voxels, "volume_cc": cc });
    emit(json, "expand-margin", &body, || format!("{target}: {voxels} voxels, {cc:.3} cc"))
}

fn feasibility(json: bool, labels: &Path, dev: &str, transform: Option<&Path>, depths: (f64, f64)) -> Outcome {
    let lm = read_labels(labels)?;
    let model = device(dev)?;
    let reg = transform.map(read_transform).transpose()?.unwrap_or_else(RigidTransform::identity);
    let report = evaluate_feasibility(&model, &reg, &lm, depths).map_err(domain)?;
    emit(json, "feasibility", &report, || {
        let mut s = format!("{}: {} of {} holes reach the target", report.device, report.summary, report.rows.len());
        for r in report.rows.iter().filter(|r| r.min_depth_to_target.is_some() || !r.oar_hits.is_empty()) {
            let reach = r.min_depth_to_target.map(|d| format!("{d:.1}")).unwrap_or_else(|| "-".into());
            let oars = r.oar_hits.iter().map(|h| format!("{}@{:.1}", h.structure, h.depth)).collect::<Vec<_>>().join(" ");
            s += &format!("\n{:<4} target from {:>6} mm  {}", r.hole_id, reach, oars);
        }
        s
    })
}

fn dose(json: bool, plan: &Path, labels: &Path, out: &Path) -> Outcome {
    let plan = read_plan(plan)?;
    let lm = read_labels(labels)?;
    let d = plan_dose(&plan, &lm.grid, &DoseModel::default()).map_err(domain)?;
    d.save(out).map_err(ctx(out))?;
    let body = serde_json::json!({
        "output": out.display().to_string(),
        "active_needles": plan.active_needles().count(),
        "max_dose_gy": d.max(),
    });
    emit(json, "dose", &body, || format!("max {:.3} Gy per fraction, written to {}", d.max(), out.display()))
}

#[derive(Serialize)]
struct DvhEntry {
    #[serde(flatten)]
    metrics: StructureMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<Vec<DvhPoint>>,
}

fn run_dvh(json: bool, dose_path: &Path, labels: &Path, with_points: bool) -> Outcome {
    let d = read_dose(dose_path)?;
    let lm = read_labels(labels)?;
    let metrics = structure_metrics(&d, &lm).map_err(domain)?;
    let mut entries = Vec::new();
    for m in metrics {
        let points = if with_points { Some(dvh(&d, &lm, &m.structure).map_err(domain)?.points()) } else { None };
        entries.push(DvhEntry { metrics: m, points });
    }
    emit(json, "dvh", &serde_json::json!({ "structures": entries }), || {
        let mut s = format!("{:<20} {:>9} {:>9} {:>9} {:>9} {:>9}", "structure", "cc", "D90", "D2cc", "D0.1cc", "max");
        for e in &entries {
            let m = &e.metrics;
            s += &format!(
                "\n{:<20} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
                m.structure.name(),
                m.volume_cc,
                m.d90_gy,
                m.d2cc_gy.dose_gy,
                m.d0_1cc_gy.dose_gy,
                m.max_gy
            );
        }
        s
    })
}

fn verdict_line(r: &VerdictRow) -> String {
    let value = r.value_gy.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
    let limit = match (r.range_gy, r.limit_gy) {
        (Some(range), _) => format!("[{}, {}]", range[0], range[1]),
        (None, Some(l)) => format!("<= {l}"),
        _ => String::new(),
    };
    let verdict = match r.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::NotEvaluable => "N/E",
        Verdict::Info => "info",
    };
    format!("{:<20} {:<14} {:>10} {:<14} {verdict}", r.structure, r.metric, value, limit)
}

fn check(json: bool, labels: &Path, dose: Option<&Path>, plan: Option<&Path>, ebrt: f64, fractions: u32, strict: bool) -> Outcome {
    let lm = read_labels(labels)?;
    let d: DoseGrid = match (dose, plan) {
        (Some(p), _) => read_dose(p)?,
        (None, Some(p)) => plan_dose(&read_plan(p)?, &lm.grid, &DoseModel::default()).map_err(domain)?,
        (None, None) => return Err(usage("pass --dose or --plan")),
    };
    let rows = check_constraints(&d, &lm, &ConstraintSet::default(), ebrt, fractions).map_err(domain)?;
    let failed = any_fail(&rows);
    emit(json, "check", &serde_json::json!({ "pass": !failed, "verdicts": rows }), || {
        rows.iter().map(verdict_line).collect::<Vec<_>>().join("\n")
    })?;
    if strict && failed {
        for r in rows.iter().filter(|r| r.verdict == Verdict::Fail) {
            eprintln!("FAIL {}", verdict_line(r));
        }
        return Err(domain("constraint check failed"));
    }
    Ok(())
}

fn serve(data: &Path, http: std::net::SocketAddr, igtl: Option<std::net::SocketAddr>) -> Outcome {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let state = AppState::open(ServiceConfig::new(data)).map_err(domain)?;
    let rt = tokio::runtime::Runtime::new().map_err(domain)?;
    rt.block_on(brachy_service::run(state, http, igtl, async {
        let _ = tokio::signal::ctrl_c().await;
    }))
    .map_err(domain)
}

fn igtl_send(
    json: bool,
    addr: std::net::SocketAddr,
    device_name: &str,
    transform: Option<&Path>,
    status: Option<&str>,
    timestamp: u64,
) -> Outcome {
    let msg = match (transform, status) {
        (Some(p), _) => Message::transform(device_name, timestamp, &read_transform(p)?),
        (None, Some(text)) => Message::status(device_name, timestamp, 1, "", text),
        (None, None) => return Err(usage("pass --transform or --status")),
    };
    let bytes = igtlink::encode(&msg).map_err(domain)?;
    let mut conn = std::net::TcpStream::connect(addr).map_err(|e| domain(format!("connect {addr}: {e}")))?;
    igtlink::send_message(&mut conn, &msg).map_err(domain)?;
    let body = serde_json::json!({ "sent": msg.type_name, "device_name": device_name, "bytes": bytes.len() });
    emit(json, "igtl-send", &body, || format!("sent {} ({} bytes) to {addr}", msg.type_name, bytes.len()))
}

#[derive(Serialize)]
struct Received {
    peer: u64,
    #[serde(flatten)]
    message: Message,
}

fn igtl_recv(json: bool, bind: std::net::SocketAddr, count: usize) -> Outcome {
    let (tx, rx) = mpsc::channel();
    let handler: igtlink::Handler = Arc::new(move |peer, event| match event {
        ServerEvent::Message(m) => {
            let _ = tx.send(Received { peer: peer.id, message: m });
        }
        ServerEvent::Skipped(e) => eprintln!("peer {}: skipped message: {e}", peer.id),
        ServerEvent::Closed(Some(e)) => eprintln!("peer {}: closed: {e}", peer.id),
        ServerEvent::Closed(None) => {}
    });
    let server = igtlink::serve(bind, handler, ServerConfig::default()).map_err(domain)?;
    eprintln!("listening on {}", server.local_addr());
    for _ in 0..count {
        let r = loop {
            match rx.recv_timeout(Duration::from_millis(200)) {
                Ok(r) => break r,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err(domain("listener stopped")),
            }
        };
        if json {
            let mut v = serde_json::to_value(&r).map_err(domain)?;
            v["schema"] = SCHEMA_VERSION.into();
            v["command"] = "igtl-recv".into();
            println!("{}", serde_json::to_string(&v).map_err(domain)?);
        } else {
            let detail = match &r.message.body {
                Body::Transform { matrix } => format!("{matrix:?}"),
                Body::Status(s) => format!("code {} {}", s.code, s.message),
                Body::Image(i) => format!("image {:?}", i.dims),
                Body::Unknown { raw } => format!("{} bytes", raw.len()),
            };
            println!("peer {} {} {} t={} {detail}", r.peer, r.message.type_name, r.message.device_name, r.message.timestamp);
        }
    }
    server.shutdown();
    Ok(())
}

fn phantom(json: bool, out: &Path, size: usize, spacing: f64, seed: u64) -> Outcome {
    if size < 16 || !(spacing > 0.0) {
        return Err(usage("phantom needs --size >= 16 and a positive --spacing"));
    }
    std::fs::create_dir_all(out).map_err(|e| domain(format!("cannot create {}: {e}", out.display())))?;
    let p = pelvis(&PhantomSpec { size, spacing, seed, ..PhantomSpec::default() });
    let files = [
        ("volume.svol", p.volume.to_svol_bytes().map_err(domain)?),
        ("labels.svol", p.labels.to_svol_bytes().map_err(domain)?),
        ("template.stl", p.device.mesh.to_binary_stl()),
    ];
    for (name, bytes) in &files {
        write_bytes(&out.join(name), bytes)?;
    }
    let (model, image) = p.fiducials();
    let arr = |v: &[Point3<f64>]| v.iter().map(|q| [q.x, q.y, q.z]).collect::<Vec<_>>();
    write_json(&out.join("landmarks.json"), &Landmarks { model_points: arr(&model), image_points: arr(&image) })?;
    write_json(&out.join("transform.json"), &p.registration)?;
    write_json(&out.join("plan.json"), &PlanFile::from_plan(&p.reference_plan()))?;
    let names = ["volume.svol", "labels.svol", "template.stl", "landmarks.json", "transform.json", "plan.json"];
    let body = serde_json::json!({ "output": out.display().to_string(), "files": names });
    emit(json, "phantom", &body, || format!("wrote {} to {}", names.join(", "), out.display()))
}
