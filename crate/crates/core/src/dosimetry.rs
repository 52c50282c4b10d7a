//! Point-source dose accumulation, cumulative DVHs, Dxcc / D% metrics and
//! constraint verdicts for the EBRT + brachytherapy course.

use std::path::Path;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planning::{all_dwell_positions, NeedlePlan, PlanError};
use crate::volume::{DType, Grid, LabelMap, ScalarVolume, StructureKind, VolumeError};

/// Near-field cap on the source distance (mm).
pub const DEFAULT_R_MIN: f64 = 0.5;
pub const DEFAULT_CUTOFF: f64 = 100.0;
/// Relative slack when comparing accumulated volume against a requested
/// volume, so that e.g. 2000 voxels of 0.001 cc count as 2 cc.
pub const DX_REL_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DoseError {
    #[error("dose and label grids differ")]
    GridMismatch,
    #[error("structure {0} has no voxels")]
    AbsentStructure(StructureKind),
    #[error("invalid dose parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DwellSource {
    pub position: Point3<f64>,
    /// Dose-rate scale in Gy·mm² per unit time.
    pub strength: f64,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseModel {
    pub r_min: f64,
    pub cutoff_radius: f64,
    /// Strength assigned to every dwell of a plan.
    pub dwell_strength: f64,
    /// Time assigned to every dwell of a plan.
    pub dwell_time: f64,
}

impl Default for DoseModel {
    fn default() -> Self {
        DoseModel { r_min: DEFAULT_R_MIN, cutoff_radius: DEFAULT_CUTOFF, dwell_strength: 100.0, dwell_time: 0.3 }
    }
}

/// Per-fraction absorbed dose in Gy on a planning grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseGrid {
    pub grid: Grid,
    pub dose: Vec<f64>,
}

impl DoseGrid {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.voxel_count();
        DoseGrid { grid, dose: vec![0.0; n] }
    }

    pub fn max(&self) -> f64 {
        self.dose.iter().cloned().fold(0.0, f64::max)
    }

    pub fn to_volume(&self) -> ScalarVolume {
        ScalarVolume {
            grid: self.grid.clone(),
            dtype: DType::Float32,
            voxels: self.dose.iter().map(|&d| d as f32).collect(),
            modality: "DOSE".into(),
        }
    }

    pub fn from_volume(vol: &ScalarVolume) -> Result<Self, DoseError> {
        let dose: Vec<f64> = vol.voxels.iter().map(|&v| v as f64).collect();
        if dose.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(DoseError::InvalidParameter("dose values must be finite and non-negative".into()));
        }
        Ok(DoseGrid { grid: vol.grid.clone(), dose })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DoseError> {
        Ok(crate::volume::save_volume(&self.to_volume(), path)?)
    }
}

/// `dose(v) = Σ strength·time / max(r, r_min)²` over sources within
/// `cutoff_radius` of the voxel center. Each voxel sums its sources in input
/// order, so the result does not depend on how the work is split.
pub fn accumulate_dose(sources: &[DwellSource], grid: &Grid, cutoff_radius: f64, r_min: f64) -> Result<DoseGrid, DoseError> {
    if !(cutoff_radius > 0.0) {
        return Err(DoseError::InvalidParameter(format!("cutoff radius {cutoff_radius}")));
    }
    if !(r_min > 0.0 && r_min.is_finite()) {
        return Err(DoseError::InvalidParameter(format!("r_min {r_min}")));
    }
    for s in sources {
        let finite = s.position.coords.iter().all(|c| c.is_finite()) && s.strength.is_finite() && s.time.is_finite();
        if !finite || s.strength < 0.0 || s.time < 0.0 {
            return Err(DoseError::InvalidParameter("sources must be finite with non-negative strength and time".into()));
        }
    }
    let [nx, ny, _] = grid.dims;
    let cutoff2 = cutoff_radius * cutoff_radius;
    let rmin2 = r_min * r_min;
    let weights: Vec<f64> = sources.iter().map(|s| s.strength * s.time).collect();
    let mut dose = vec![0.0; grid.voxel_count()];
    dose.par_chunks_mut(nx * ny).enumerate().for_each(|(k, slice)| {
        let near: Vec<usize> = {
            // sources that can reach this slice at all
            let center = grid.world_of_index([0, 0, k]);
            let normal = grid.axis_direction(2);
            (0..sources.len())
                .filter(|&s| (sources[s].position - center).dot(&normal).abs() <= cutoff_radius)
                .collect()
        };
        if near.is_empty() {
            return;
        }
        // row-wise, source-major: every voxel still adds its sources in input order
        let (mut px, mut py, mut pz) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
        for j in 0..ny {
            for i in 0..nx {
                let p = grid.world_of_index([i, j, k]);
                (px[i], py[i], pz[i]) = (p.x, p.y, p.z);
            }
            let row = &mut slice[nx * j..nx * (j + 1)];
            for &s in &near {
                let q = sources[s].position;
                let w = weights[s];
                for i in 0..nx {
                    let (dx, dy, dz) = (q.x - px[i], q.y - py[i], q.z - pz[i]);
                    let r2 = dx * dx + dy * dy + dz * dz;
                    if r2 <= cutoff2 {
                        row[i] += w / r2.max(rmin2);
                    }
                }
            }
        }
    });
    Ok(DoseGrid { grid: grid.clone(), dose })
}

/// Dwell sources for every active needle of a plan.
pub fn plan_sources(plan: &NeedlePlan, model: &DoseModel) -> Result<Vec<DwellSource>, DoseError> {
    Ok(all_dwell_positions(plan)?
        .into_iter()
        .map(|position| DwellSource { position, strength: model.dwell_strength, time: model.dwell_time })
        .collect())
}

pub fn plan_dose(plan: &NeedlePlan, grid: &Grid, model: &DoseModel) -> Result<DoseGrid, DoseError> {
    accumulate_dose(&plan_sources(plan, model)?, grid, model.cutoff_radius, model.r_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DvhPoint {
    pub dose_gy: f64,
    pub volume_cc: f64,
    pub volume_pct: f64,
}

/// Cumulative DVH built from the exact voxel doses of one structure.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhCurve {
    pub structure: StructureKind,
    /// Voxel doses, descending.
    pub doses: Vec<f64>,
    pub voxel_volume_cc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseMetric {
    pub dose_gy: f64,
    /// The structure is smaller than the requested volume.
    pub undersized: bool,
}

impl DvhCurve {
    pub fn total_volume_cc(&self) -> f64 {
        self.doses.len() as f64 * self.voxel_volume_cc
    }

    /// Volume receiving at least `d`.
    pub fn volume_at(&self, d: f64) -> f64 {
        self.doses.partition_point(|&x| x >= d) as f64 * self.voxel_volume_cc
    }

    /// One point per distinct dose level, plus the zero-dose point.
    pub fn points(&self) -> Vec<DvhPoint> {
        let total = self.total_volume_cc();
        let mut out = vec![DvhPoint { dose_gy: 0.0, volume_cc: total, volume_pct: 100.0 }];
        let mut levels: Vec<f64> = self.doses.iter().rev().cloned().filter(|&d| d > 0.0).collect();
        levels.dedup();
        let n = self.doses.len() as f64;
        for d in levels {
            // percentages from voxel counts so the full structure is exactly 100
            let k = self.doses.partition_point(|&x| x >= d) as f64;
            out.push(DvhPoint { dose_gy: d, volume_cc: k * self.voxel_volume_cc, volume_pct: 100.0 * k / n });
        }
        out
    }

    /// Number of hottest voxels whose volume first reaches `x_cc`.
    fn voxels_for(&self, x_cc: f64) -> usize {
        let need = x_cc * (1.0 - DX_REL_EPS);
        let mut k = ((need / self.voxel_volume_cc).ceil() as usize).max(1);
        while k > 1 && (k - 1) as f64 * self.voxel_volume_cc >= need {
            k -= 1;
        }
        while (k as f64) * self.voxel_volume_cc < need {
            k += 1;
        }
        k
    }
}

pub fn dvh(dose: &DoseGrid, labels: &LabelMap, kind: &StructureKind) -> Result<DvhCurve, DoseError> {
    if dose.grid != labels.grid {
        return Err(DoseError::GridMismatch);
    }
    let code = labels.code_of(kind).ok_or_else(|| DoseError::AbsentStructure(kind.clone()))?;
    let mut doses: Vec<f64> = labels
        .voxels
        .iter()
        .zip(&dose.dose)
        .filter(|(&l, _)| l == code)
        .map(|(_, &d)| d)
        .collect();
    if doses.is_empty() {
        return Err(DoseError::AbsentStructure(kind.clone()));
    }
    doses.sort_by(|a, b| b.total_cmp(a));
    Ok(DvhCurve { structure: kind.clone(), doses, voxel_volume_cc: labels.grid.voxel_volume_cc() })
}

/// Minimum dose within the hottest `x_cc` of the structure.
pub fn metric_dxcc(curve: &DvhCurve, x_cc: f64) -> DoseMetric {
    let k = curve.voxels_for(x_cc);
    if k > curve.doses.len() {
        return DoseMetric { dose_gy: *curve.doses.last().unwrap(), undersized: true };
    }
    DoseMetric { dose_gy: curve.doses[k - 1], undersized: false }
}

/// Minimum dose within the hottest `p` percent of the structure volume.
pub fn metric_d_percent(curve: &DvhCurve, p: f64) -> f64 {
    metric_dxcc(curve, p / 100.0 * curve.total_volume_cc()).dose_gy
}

/// Physical dose sum of the EBRT course and the brachytherapy fractions.
pub fn prescription_total(ebrt_gy: f64, n_fractions: u32, fraction_gy: f64) -> f64 {
    ebrt_gy + n_fractions as f64 * fraction_gy
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Range { min, max }
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    fn valid(&self) -> bool {
        self.min >= 0.0 && self.min <= self.max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct D2ccLimits {
    pub bladder: f64,
    pub rectum_sigmoid: f64,
    pub small_bowel: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub hrctv_total_gy: Range,
    pub d2cc_limits: D2ccLimits,
    pub ebrt_gy: Range,
    pub fractions: (u32, u32),
    pub fraction_dose_gy: Range,
}

impl Default for ConstraintSet {
    fn default() -> Self {
        ConstraintSet {
            hrctv_total_gy: Range::new(80.0, 90.0),
            d2cc_limits: D2ccLimits { bladder: 90.0, rectum_sigmoid: 70.0, small_bowel: 55.0 },
            ebrt_gy: Range::new(40.0, 50.0),
            fractions: (3, 5),
            fraction_dose_gy: Range::new(5.5, 7.0),
        }
    }
}

impl ConstraintSet {
    pub fn validate(&self) -> Result<(), DoseError> {
        let l = &self.d2cc_limits;
        let ok = self.hrctv_total_gy.valid()
            && self.ebrt_gy.valid()
            && self.fraction_dose_gy.valid()
            && self.fractions.0 <= self.fractions.1
            && [l.bladder, l.rectum_sigmoid, l.small_bowel].iter().all(|&x| x >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(DoseError::InvalidParameter("constraint ranges must be non-empty and non-negative".into()))
        }
    }

    pub fn d2cc_limit(&self, kind: &StructureKind) -> Option<f64> {
        match kind {
            StructureKind::OarBladder => Some(self.d2cc_limits.bladder),
            StructureKind::OarRectumSigmoid => Some(self.d2cc_limits.rectum_sigmoid),
            StructureKind::OarSmallBowel => Some(self.d2cc_limits.small_bowel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotEvaluable,
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub structure: String,
    pub metric: String,
    pub value_gy: Option<f64>,
    /// Upper limit; for range rows the upper end.
    pub limit_gy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_gy: Option<[f64; 2]>,
    pub verdict: Verdict,
}

impl VerdictRow {
    fn range(structure: &str, metric: &str, value: Option<f64>, r: Range) -> Self {
        let verdict = match value {
            Some(v) if r.contains(v) => Verdict::Pass,
            Some(_) => Verdict::Fail,
            None => Verdict::NotEvaluable,
        };
        VerdictRow {
            structure: structure.into(),
            metric: metric.into(),
            value_gy: value,
            limit_gy: Some(r.max),
            range_gy: Some([r.min, r.max]),
            verdict,
        }
    }
}

pub fn any_fail(rows: &[VerdictRow]) -> bool {
    rows.iter().any(|r| r.verdict == Verdict::Fail)
}

fn structure_curve(dose: &DoseGrid, labels: &LabelMap, kind: &StructureKind) -> Result<Option<DvhCurve>, DoseError> {
    match dvh(dose, labels, kind) {
        Ok(c) => Ok(Some(c)),
        Err(DoseError::AbsentStructure(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Verdict table in a fixed row order: HR-CTV D90 total and per fraction,
/// D2cc totals for each OAR, per-fraction D2cc and D0.1cc totals as
/// information, then the EBRT dose and fraction count.
pub fn check_constraints(
    dose: &DoseGrid,
    labels: &LabelMap,
    rx: &ConstraintSet,
    ebrt_gy: f64,
    n_fractions: u32,
) -> Result<Vec<VerdictRow>, DoseError> {
    if dose.grid != labels.grid {
        return Err(DoseError::GridMismatch);
    }
    rx.validate()?;
    let total = |per_fraction: f64| prescription_total(ebrt_gy, n_fractions, per_fraction);
    let mut rows = Vec::new();

    let hr = StructureKind::HrCtv;
    let d90 = structure_curve(dose, labels, &hr)?.map(|c| metric_d_percent(&c, 90.0));
    rows.push(VerdictRow::range(hr.name(), "D90_total", d90.map(total), rx.hrctv_total_gy));
    rows.push(VerdictRow::range(hr.name(), "D90_fraction", d90, rx.fraction_dose_gy));

    let mut oar_curves = Vec::new();
    for kind in StructureKind::OARS.iter() {
        let limit = rx.d2cc_limit(kind);
        let curve = structure_curve(dose, labels, kind)?;
        let value = curve.as_ref().map(|c| total(metric_dxcc(c, 2.0).dose_gy));
        let verdict = match value {
            Some(v) if v <= limit.unwrap() => Verdict::Pass,
            Some(_) => Verdict::Fail,
            None => Verdict::NotEvaluable,
        };
        rows.push(VerdictRow {
            structure: kind.name().into(),
            metric: "D2cc_total".into(),
            value_gy: value,
            limit_gy: limit,
            range_gy: None,
            verdict,
        });
        oar_curves.push((kind, curve));
    }
    for (metric, x_cc, scale_total) in [("D2cc_fraction", 2.0, false), ("D0.1cc_total", 0.1, true)] {
        for (kind, curve) in &oar_curves {
            let value = curve.as_ref().map(|c| {
                let d = metric_dxcc(c, x_cc).dose_gy;
                if scale_total {
                    total(d)
                } else {
                    d
                }
            });
            rows.push(VerdictRow {
                structure: kind.name().into(),
                metric: metric.into(),
                value_gy: value,
                limit_gy: None,
                range_gy: None,
                verdict: if value.is_some() { Verdict::Info } else { Verdict::NotEvaluable },
            });
        }
    }

    rows.push(VerdictRow::range("COURSE", "EBRT", Some(ebrt_gy), rx.ebrt_gy));
    let (fmin, fmax) = rx.fractions;
    rows.push(VerdictRow {
        structure: "COURSE".into(),
        metric: "fractions".into(),
        value_gy: None,
        limit_gy: None,
        range_gy: Some([fmin as f64, fmax as f64]),
        verdict: if (fmin..=fmax).contains(&n_fractions) { Verdict::Pass } else { Verdict::Fail },
    });
    Ok(rows)
}

/// Summary metrics per labeled structure for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub structure: StructureKind,
    pub volume_cc: f64,
    pub d90_gy: f64,
    pub d2cc_gy: DoseMetric,
    pub d0_1cc_gy: DoseMetric,
    pub max_gy: f64,
    pub mean_gy: f64,
}

pub fn structure_metrics(dose: &DoseGrid, labels: &LabelMap) -> Result<Vec<StructureMetrics>, DoseError> {
    let mut out = Vec::new();
    for kind in labels.legend.values() {
        if let Some(c) = structure_curve(dose, labels, kind)? {
            out.push(StructureMetrics {
                structure: kind.clone(),
                volume_cc: c.total_volume_cc(),
                d90_gy: metric_d_percent(&c, 90.0),
                d2cc_gy: metric_dxcc(&c, 2.0),
                d0_1cc_gy: metric_dxcc(&c, 0.1),
                max_gy: c.doses[0],
                mean_gy: c.doses.iter().sum::<f64>() / c.doses.len() as f64,
            });
        }
    }
    Ok(out)
}
