//! Virtual needles through template holes: trajectories under the current
//! registration, depth editing, ray/structure intersections, dwell
//! positions and the pre-implant feasibility report.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::TemplateModel;
use crate::registration::RigidTransform;
use crate::volume::{LabelMap, StructureKind};

pub const DEFAULT_MAX_DEPTH: f64 = 200.0;
pub const DEFAULT_DWELL_STEP: f64 = 5.0;
/// Slack in the dwell count so that exact multiples of the step survive
/// floating-point division.
pub const DWELL_COUNT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("unknown template hole {0}")]
    UnknownHole(String),
    #[error("needle {0} is not active")]
    InactiveNeedle(String),
    #[error("depth {depth} mm outside [0, {max}] mm")]
    DepthOutOfRange { depth: f64, max: f64 },
    #[error("dwell step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("hole {0} appears more than once")]
    DuplicateHole(String),
    #[error("plan references device {found}, expected {expected}")]
    DeviceMismatch { expected: String, found: String },
    #[error("label map has no {0} voxels")]
    MissingTarget(StructureKind),
    #[error("invalid depth range [{0}, {1}]")]
    InvalidRange(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Pre,
    Intra,
    Post,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Pre, Stage::Intra, Stage::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pre => "PRE",
            Stage::Intra => "INTRA",
            Stage::Post => "POST",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub hole_id: String,
    /// Insertion depth from the template face (mm).
    pub depth: f64,
    pub active: bool,
    pub dwell_step: f64,
}

impl Needle {
    /// Dwell offsets measured from the tip toward the entry.
    pub fn dwell_offsets(&self, retract_margin: f64) -> Vec<f64> {
        let usable = self.depth - retract_margin;
        let n = if usable >= 0.0 { (usable / self.dwell_step + DWELL_COUNT_EPS).floor() as usize + 1 } else { 1 };
        (0..n).map(|m| m as f64 * self.dwell_step).collect()
    }
}

/// Immutable plan value; edits return a new plan.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedlePlan {
    pub device: Arc<TemplateModel>,
    /// One row per template hole, in device order.
    pub needles: Vec<Needle>,
    /// Device to image.
    pub registration: RigidTransform,
    pub stage: Stage,
    pub max_depth: f64,
    pub retract_margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySegment {
    pub entry: Point3<f64>,
    pub tip: Point3<f64>,
    pub direction: Vector3<f64>,
    pub depth: f64,
}

impl TrajectorySegment {
    pub fn at(&self, depth: f64) -> Point3<f64> {
        self.entry + self.direction * depth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NeedleEdit {
    SetDepth { depth_mm: f64 },
    /// Set depth and activate in one step.
    Place { depth_mm: f64 },
    Activate,
    Deactivate,
}

impl NeedlePlan {
    /// All holes inactive at depth 0 with the default dwell step.
    pub fn new(device: Arc<TemplateModel>, registration: RigidTransform, stage: Stage) -> Self {
        let needles = device
            .holes
            .iter()
            .map(|h| Needle { hole_id: h.id.clone(), depth: 0.0, active: false, dwell_step: DEFAULT_DWELL_STEP })
            .collect();
        NeedlePlan {
            device,
            needles,
            registration,
            stage,
            max_depth: DEFAULT_MAX_DEPTH,
            retract_margin: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.needles {
            if self.device.hole(&n.hole_id).is_none() {
                return Err(PlanError::UnknownHole(n.hole_id.clone()));
            }
            if !seen.insert(n.hole_id.as_str()) {
                return Err(PlanError::DuplicateHole(n.hole_id.clone()));
            }
            if !(n.depth >= 0.0 && n.depth <= self.max_depth) {
                return Err(PlanError::DepthOutOfRange { depth: n.depth, max: self.max_depth });
            }
            if !(n.dwell_step > 0.0 && n.dwell_step.is_finite()) {
                return Err(PlanError::InvalidStep(n.dwell_step));
            }
        }
        Ok(())
    }

    pub fn needle(&self, hole_id: &str) -> Result<&Needle, PlanError> {
        self.needles
            .iter()
            .find(|n| n.hole_id == hole_id)
            .ok_or_else(|| PlanError::UnknownHole(hole_id.to_string()))
    }

    pub fn active_needles(&self) -> impl Iterator<Item = &Needle> {
        self.needles.iter().filter(|n| n.active)
    }

    pub fn with_registration(&self, registration: RigidTransform) -> Self {
        NeedlePlan { registration, ..self.clone() }
    }
}

/// Entry and tip of an active needle in image space.
pub fn trajectory(plan: &NeedlePlan, hole_id: &str) -> Result<TrajectorySegment, PlanError> {
    let needle = plan.needle(hole_id)?;
    if !needle.active {
        return Err(PlanError::InactiveNeedle(hole_id.to_string()));
    }
    let hole = plan.device.hole(hole_id).ok_or_else(|| PlanError::UnknownHole(hole_id.to_string()))?;
    Ok(hole_segment(&plan.registration, &hole.position, &hole.direction, needle.depth))
}

fn hole_segment(reg: &RigidTransform, position: &Point3<f64>, direction: &Vector3<f64>, depth: f64) -> TrajectorySegment {
    let entry = reg.apply(position);
    let direction = reg.apply_vector(&direction.normalize());
    TrajectorySegment { entry, tip: entry + direction * depth, direction, depth }
}

/// Depth samples 0, h, 2h, … and always the segment depth itself.
fn march_depths(depth: f64, step: f64) -> Vec<f64> {
    let n = (depth / step).floor() as usize;
    let mut out: Vec<f64> = (0..=n).map(|m| m as f64 * step).collect();
    if *out.last().unwrap() < depth {
        out.push(depth);
    }
    out
}

/// Runs of samples whose nearest voxel carries `kind`, as (enter, exit)
/// depths from the entry. Samples are spaced at half the smallest voxel
/// spacing.
pub fn ray_structure_intersections(seg: &TrajectorySegment, labels: &LabelMap, kind: &StructureKind) -> Vec<(f64, f64)> {
    let step = labels.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
    ray_structure_intersections_with_step(seg, labels, kind, step)
}

pub fn ray_structure_intersections_with_step(
    seg: &TrajectorySegment,
    labels: &LabelMap,
    kind: &StructureKind,
    step: f64,
) -> Vec<(f64, f64)> {
    let Some(code) = labels.code_of(kind) else { return Vec::new() };
    if !(step > 0.0) || !(seg.depth >= 0.0) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for t in march_depths(seg.depth, step) {
        let hit = labels.label_at(&seg.at(t)) == Some(code);
        open = match (open, hit) {
            (None, true) => Some((t, t)),
            (Some((a, _)), true) => Some((a, t)),
            (Some(run), false) => {
                out.push(run);
                None
            }
            (None, false) => None,
        };
    }
    out.extend(open);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OarHit {
    pub structure: StructureKind,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityRow {
    pub hole_id: String,
    pub min_depth_to_target: Option<f64>,
    pub max_useful_depth: Option<f64>,
    pub target_path_length: f64,
    pub oar_hits: Vec<OarHit>,
}

impl FeasibilityRow {
    /// Reaches the target without crossing an OAR first.
    pub fn feasible(&self) -> bool {
        match self.min_depth_to_target {
            Some(d) => self.oar_hits.iter().all(|h| h.depth >= d),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub device: String,
    pub rows: Vec<FeasibilityRow>,
    pub summary: usize,
}

/// Casts every hole to `depth_range.1` and records where it meets the
/// HR-CTV and which OARs lie on the way.
pub fn evaluate_feasibility(
    device: &TemplateModel,
    registration: &RigidTransform,
    labels: &LabelMap,
    depth_range: (f64, f64),
) -> Result<FeasibilityReport, PlanError> {
    let (lo, hi) = depth_range;
    if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
        return Err(PlanError::InvalidRange(lo, hi));
    }
    if labels.count(&StructureKind::HrCtv) == 0 {
        return Err(PlanError::MissingTarget(StructureKind::HrCtv));
    }
    let oars: Vec<StructureKind> = labels.legend.values().filter(|k| k.is_oar()).cloned().collect();

    let rows: Vec<FeasibilityRow> = device
        .holes
        .par_iter()
        .map(|hole| {
            let seg = hole_segment(registration, &hole.position, &hole.direction, hi);
            let clip = |runs: Vec<(f64, f64)>| -> Vec<(f64, f64)> {
                runs.into_iter().filter(|&(_, b)| b >= lo).map(|(a, b)| (a.max(lo), b)).collect()
            };
            let target = clip(ray_structure_intersections(&seg, labels, &StructureKind::HrCtv));
            let min_depth_to_target = target.first().map(|r| r.0);
            let max_useful_depth = target.last().map(|r| r.1);
            let target_path_length = target.iter().map(|(a, b)| b - a).sum();
            let limit = max_useful_depth.unwrap_or(f64::INFINITY);
            let oar_hits = oars
                .iter()
                .filter_map(|kind| {
                    clip(ray_structure_intersections(&seg, labels, kind))
                        .first()
                        .filter(|r| r.0 <= limit)
                        .map(|r| OarHit { structure: kind.clone(), depth: r.0 })
                })
                .collect();
            FeasibilityRow {
                hole_id: hole.id.clone(),
                min_depth_to_target,
                max_useful_depth,
                target_path_length,
                oar_hits,
            }
        })
        .collect();
    let summary = rows.iter().filter(|r| r.feasible()).count();
    Ok(FeasibilityReport { device: device.name.clone(), rows, summary })
}

/// Dwell points from the tip back toward the entry.
pub fn dwell_positions(plan: &NeedlePlan, hole_id: &str) -> Result<Vec<Point3<f64>>, PlanError> {
    let seg = trajectory(plan, hole_id)?;
    let needle = plan.needle(hole_id)?;
    Ok(needle
        .dwell_offsets(plan.retract_margin)
        .into_iter()
        .map(|off| seg.tip - seg.direction * off)
        .collect())
}

/// Dwell points of every active needle, in plan order.
pub fn all_dwell_positions(plan: &NeedlePlan) -> Result<Vec<Point3<f64>>, PlanError> {
    let mut out = Vec::new();
    for n in plan.active_needles() {
        out.extend(dwell_positions(plan, &n.hole_id)?);
    }
    Ok(out)
}

/// Applies one edit and returns the new plan.
pub fn edit_needle(plan: &NeedlePlan, hole_id: &str, edit: &NeedleEdit) -> Result<NeedlePlan, PlanError> {
    if plan.device.hole(hole_id).is_none() {
        return Err(PlanError::UnknownHole(hole_id.to_string()));
    }
    let check = |d: f64| {
        if d >= 0.0 && d <= plan.max_depth {
            Ok(d)
        } else {
            Err(PlanError::DepthOutOfRange { depth: d, max: plan.max_depth })
        }
    };
    let mut next = plan.clone();
    let idx = next
        .needles
        .iter()
        .position(|n| n.hole_id == hole_id)
        .ok_or_else(|| PlanError::UnknownHole(hole_id.to_string()))?;
    let needle = &mut next.needles[idx];
    match *edit {
        NeedleEdit::SetDepth { depth_mm } => needle.depth = check(depth_mm)?,
        NeedleEdit::Place { depth_mm } => {
            needle.depth = check(depth_mm)?;
            needle.active = true;
        }
        NeedleEdit::Activate => needle.active = true,
        NeedleEdit::Deactivate => needle.active = false,
    }
    next.validate()?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleRow {
    pub hole_id: String,
    pub depth_mm: f64,
    pub active: bool,
    pub dwell_step_mm: f64,
}

/// JSON plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub device: String,
    pub registration: RigidTransform,
    pub needles: Vec<NeedleRow>,
    pub stage: Stage,
}

impl PlanFile {
    pub fn from_plan(plan: &NeedlePlan) -> Self {
        PlanFile {
            device: plan.device.name.clone(),
            registration: plan.registration,
            needles: plan
                .needles
                .iter()
                .map(|n| NeedleRow {
                    hole_id: n.hole_id.clone(),
                    depth_mm: n.depth,
                    active: n.active,
                    dwell_step_mm: n.dwell_step,
                })
                .collect(),
            stage: plan.stage,
        }
    }

    /// Rows missing from the file are inactive holes with default values.
    pub fn into_plan(self, device: Arc<TemplateModel>) -> Result<NeedlePlan, PlanError> {
        if self.device != device.name {
            return Err(PlanError::DeviceMismatch { expected: device.name.clone(), found: self.device });
        }
        let mut plan = NeedlePlan::new(device, self.registration, self.stage);
        let mut seen = std::collections::BTreeSet::new();
        for row in self.needles {
            if !seen.insert(row.hole_id.clone()) {
                return Err(PlanError::DuplicateHole(row.hole_id));
            }
            let slot = plan
                .needles
                .iter_mut()
                .find(|n| n.hole_id == row.hole_id)
                .ok_or_else(|| PlanError::UnknownHole(row.hole_id.clone()))?;
            slot.depth = row.depth_mm;
            slot.active = row.active;
            slot.dwell_step = row.dwell_step_mm;
        }
        plan.validate()?;
        Ok(plan)
    }
}
