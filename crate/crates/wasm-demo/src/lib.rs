//! Browser front end over the planning core: toggle needles on the phantom
//! template, view a slice with contours and isodose lines, read the DVH and
//! constraint verdicts, and watch ICP converge.
//!
//! Everything below is plain Rust; the `#[wasm_bindgen]` exports only pass
//! strings and byte buffers, so the same code is tested natively.

use brachy_core::dosimetry::{check_constraints, dvh, plan_dose, ConstraintSet, DoseGrid, DoseModel, VerdictRow};
use brachy_core::mesh::sample_surface;
use brachy_core::phantom::{pelvis, PelvisPhantom, PhantomSpec, APPLICATOR};
use brachy_core::planning::{edit_needle, NeedleEdit, NeedlePlan};
use brachy_core::registration::{apply_transform, icp_refine, IcpConfig, RigidTransform};
use brachy_core::volume::StructureKind;
use brachy_core::Vector3;
use serde_json::json;
use wasm_bindgen::prelude::*;

pub const EBRT_GY: f64 = 50.0;
pub const FRACTIONS: u32 = 5;

/// Per-fraction dose that brings the course total to `total_gy`.
pub fn fraction_dose_for(total_gy: f64) -> f64 {
    (total_gy - EBRT_GY) / FRACTIONS as f64
}

/// Isodose levels drawn on slices: 50, 100 and 200 % of the fraction dose
/// that reaches an 85 Gy course.
pub fn isodose_levels() -> [(f64, [u8; 3]); 3] {
    let rx = fraction_dose_for(85.0);
    [(0.5 * rx, [80, 160, 255]), (rx, [255, 255, 0]), (2.0 * rx, [255, 90, 0])]
}

fn structure_color(kind: &StructureKind) -> [u8; 3] {
    match kind {
        StructureKind::HrCtv => [230, 40, 40],
        StructureKind::Gtv => [160, 0, 160],
        StructureKind::IrCtv => [255, 150, 150],
        StructureKind::OarBladder => [240, 200, 40],
        StructureKind::OarRectumSigmoid => [150, 90, 40],
        StructureKind::OarSmallBowel => [60, 190, 90],
        StructureKind::Other(n) if n == APPLICATOR => [90, 140, 220],
        StructureKind::Other(_) => [200, 200, 200],
    }
}

#[wasm_bindgen]
pub struct Demo {
    phantom: PelvisPhantom,
    plan: NeedlePlan,
    model: DoseModel,
    dose: DoseGrid,
    verdicts: Vec<VerdictRow>,
}

impl Demo {
    pub fn with_phantom(phantom: PelvisPhantom) -> Result<Demo, String> {
        let plan = phantom.reference_plan();
        let model = DoseModel::default();
        let dose = DoseGrid::zeros(phantom.labels.grid.clone());
        let mut demo = Demo { phantom, plan, model, dose, verdicts: Vec::new() };
        demo.recompute()?;
        Ok(demo)
    }

    fn recompute(&mut self) -> Result<(), String> {
        let labels = &self.phantom.labels;
        self.dose = plan_dose(&self.plan, &labels.grid, &self.model).map_err(|e| e.to_string())?;
        self.verdicts =
            check_constraints(&self.dose, labels, &ConstraintSet::default(), EBRT_GY, FRACTIONS).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn plan(&self) -> &NeedlePlan {
        &self.plan
    }

    pub fn dose(&self) -> &DoseGrid {
        &self.dose
    }

    pub fn verdicts(&self) -> &[VerdictRow] {
        &self.verdicts
    }

    /// Width and height of a slice across `axis`.
    pub fn slice_size(&self, axis: usize) -> (usize, usize) {
        let [nx, ny, nz] = self.phantom.labels.grid.dims;
        match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        }
    }

    fn voxel(&self, axis: usize, index: usize, u: usize, v: usize) -> usize {
        let g = &self.phantom.labels.grid;
        match axis {
            0 => g.linear_index(index, u, v),
            1 => g.linear_index(u, index, v),
            _ => g.linear_index(u, v, index),
        }
    }
}

#[wasm_bindgen]
impl Demo {
    /// Phantom with `size`³ voxels over a fixed 128 mm field of view.
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, seed: u64) -> Result<Demo, String> {
        if !(16..=96).contains(&size) {
            return Err(format!("size {size} outside 16..=96"));
        }
        Demo::with_phantom(pelvis(&PhantomSpec { size, spacing: 128.0 / size as f64, seed, ..PhantomSpec::default() }))
    }

    /// Holes of the template with their plate position and needle state.
    pub fn holes_json(&self) -> String {
        let rows: Vec<_> = self
            .plan
            .needles
            .iter()
            .zip(&self.phantom.device.holes)
            .map(|(n, h)| json!({ "id": n.hole_id, "x": h.position.x, "y": h.position.y, "active": n.active, "depth_mm": n.depth }))
            .collect();
        serde_json::Value::Array(rows).to_string()
    }

    /// Places (`active`) or withdraws a needle and re-evaluates the dose.
    /// Returns the new verdicts.
    pub fn set_needle(&mut self, hole_id: &str, active: bool, depth_mm: f64) -> Result<String, String> {
        let mut next = edit_needle(&self.plan, hole_id, &NeedleEdit::SetDepth { depth_mm }).map_err(|e| e.to_string())?;
        let toggle = if active { NeedleEdit::Activate } else { NeedleEdit::Deactivate };
        next = edit_needle(&next, hole_id, &toggle).map_err(|e| e.to_string())?;
        let previous = std::mem::replace(&mut self.plan, next);
        if let Err(e) = self.recompute() {
            self.plan = previous;
            return Err(e);
        }
        Ok(self.verdicts_json())
    }

    pub fn slice_count(&self, axis: usize) -> usize {
        self.phantom.labels.grid.dims[axis.min(2)]
    }

    pub fn slice_width(&self, axis: usize) -> usize {
        self.slice_size(axis).0
    }

    pub fn slice_height(&self, axis: usize) -> usize {
        self.slice_size(axis).1
    }

    /// RGBA pixels of one slice, top row first: image intensity, structure
    /// outlines and isodose lines.
    pub fn slice_rgba(&self, axis: usize, index: usize) -> Result<Vec<u8>, String> {
        let axis = axis.min(2);
        if index >= self.slice_count(axis) {
            return Err(format!("slice {index} outside 0..{}", self.slice_count(axis)));
        }
        let (w, h) = self.slice_size(axis);
        let vol = &self.phantom.volume;
        let labels = &self.phantom.labels;
        let hi = vol.voxels.iter().cloned().fold(1.0f32, f32::max);
        let mut out = vec![0u8; w * h * 4];
        let levels = isodose_levels();
        for v in 0..h {
            for u in 0..w {
                let idx = self.voxel(axis, index, u, v);
                let g = (vol.voxels[idx] / hi * 255.0) as u8;
                let mut rgb = [g, g, g];
                // a pixel is on an outline when a 4-neighbour differs
                let neighbours = [(u.wrapping_sub(1), v), (u + 1, v), (u, v.wrapping_sub(1)), (u, v + 1)];
                let inside = |a: usize, b: usize| a < w && b < h;
                let code = labels.voxels[idx];
                if code != 0
                    && neighbours.iter().any(|&(a, b)| !inside(a, b) || labels.voxels[self.voxel(axis, index, a, b)] != code)
                {
                    if let Some(k) = labels.kind_at(idx) {
                        rgb = structure_color(k);
                    }
                }
                let d = self.dose.dose[idx];
                for (level, color) in levels {
                    if d >= level
                        && neighbours.iter().any(|&(a, b)| inside(a, b) && self.dose.dose[self.voxel(axis, index, a, b)] < level)
                    {
                        rgb = color;
                    }
                }
                let at = 4 * ((h - 1 - v) * w + u);
                out[at..at + 3].copy_from_slice(&rgb);
                out[at + 3] = 255;
            }
        }
        Ok(out)
    }

    /// Cumulative DVH per structure, as course-total dose against percent
    /// volume.
    pub fn dvh_json(&self) -> String {
        let mut curves = Vec::new();
        for kind in self.phantom.labels.legend.values() {
            if matches!(kind, StructureKind::Other(_)) {
                continue;
            }
            if let Ok(c) = dvh(&self.dose, &self.phantom.labels, kind) {
                let pts: Vec<[f64; 2]> =
                    c.points().iter().map(|p| [EBRT_GY + FRACTIONS as f64 * p.dose_gy, p.volume_pct]).collect();
                let [r, g, b] = structure_color(kind);
                curves.push(json!({ "structure": kind.name(), "color": format!("rgb({r},{g},{b})"), "points": pts }));
            }
        }
        serde_json::Value::Array(curves).to_string()
    }

    pub fn verdicts_json(&self) -> String {
        serde_json::to_string(&self.verdicts).expect("verdicts serialize")
    }

    /// Template surface cloud displaced by a known rigid motion, then
    /// recovered by ICP from the identity.
    pub fn icp_demo(&self, angle_deg: f64, shift_mm: f64, seed: u64) -> Result<String, String> {
        let model = sample_surface(&self.phantom.device.mesh, 1000, seed).map_err(|e| e.to_string())?;
        let truth = RigidTransform::from_axis_angle(
            Vector3::new(0.3, 1.0, 0.2),
            angle_deg.to_radians(),
            Vector3::new(1.0, -0.5, 0.3).normalize() * shift_mm,
        );
        let target = apply_transform(&truth, &model);
        let report = icp_refine(&model, &target, &RigidTransform::identity(), &IcpConfig::default()).map_err(|e| e.to_string())?;
        Ok(json!({
            "iterations": report.iterations_used,
            "converged": report.converged,
            "rms_history": report.rms_history,
            "final_rms": report.final_rms,
            "rotation_error_deg": report.transform.rotation_error_deg(&truth),
            "translation_error_mm": report.transform.translation_error(&truth),
        })
        .to_string())
    }
}
