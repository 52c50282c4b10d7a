//! Synthetic pelvis used by examples, the CLI workflow, service tests and
//! the browser demo.
//!
//! Anatomy is laid out in the template frame (holes on z = 0, needles along
//! +z, y anterior) and carried into image space by the phantom's
//! registration, so the registration is the ground truth for device fitting.

use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mesh::{make_template, TemplateModel, TemplateSpec};
use crate::planning::{edit_needle, NeedleEdit, NeedlePlan, Stage};
use crate::registration::{invert, RigidTransform};
use crate::volume::{Grid, LabelMap, ScalarVolume, StructureKind};

pub const APPLICATOR: &str = "APPLICATOR";

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Voxels per axis.
    pub size: usize,
    pub spacing: f64,
    pub noise: f64,
    pub seed: u64,
    pub registration: RigidTransform,
    pub template: TemplateSpec,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            spacing: 2.0,
            noise: 5.0,
            seed: 7,
            registration: RigidTransform::from_axis_angle(
                Vector3::new(0.2, 1.0, 0.1),
                2f64.to_radians(),
                Vector3::new(1.5, -2.0, 3.0),
            ),
            template: TemplateSpec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PelvisPhantom {
    pub volume: ScalarVolume,
    pub labels: LabelMap,
    pub device: Arc<TemplateModel>,
    /// Device to image.
    pub registration: RigidTransform,
}

struct Ellipsoid {
    center: Point3<f64>,
    radii: Vector3<f64>,
}

impl Ellipsoid {
    fn contains(&self, p: &Point3<f64>) -> bool {
        let d = (p - self.center).component_div(&self.radii);
        d.norm_squared() <= 1.0
    }
}

/// Anatomy in the template frame.
const HRCTV: ([f64; 3], [f64; 3]) = ([0.0, 0.0, 60.0], [18.0, 15.0, 15.0]);
const GTV: ([f64; 3], [f64; 3]) = ([0.0, 0.0, 60.0], [8.0, 8.0, 8.0]);
const BLADDER: ([f64; 3], [f64; 3]) = ([0.0, 47.0, 55.0], [20.0, 18.0, 18.0]);
const SMALL_BOWEL: ([f64; 3], [f64; 3]) = ([0.0, 25.0, 100.0], [15.0, 8.0, 5.0]);
const RECTUM_Y: f64 = -40.0;
const RECTUM_RADIUS: f64 = 10.0;
const RECTUM_Z: (f64, f64) = (15.0, 100.0);

fn ellipsoid(e: ([f64; 3], [f64; 3])) -> Ellipsoid {
    Ellipsoid { center: Point3::from(e.0), radii: Vector3::from(e.1) }
}

/// Structure at a template-frame point, with the target drawn last so that
/// it wins overlaps.
fn structure_at(p: &Point3<f64>, plate: (f64, f64)) -> Option<StructureKind> {
    if p.z <= 0.0 && p.z >= -plate.1 && p.x.abs() <= plate.0 && p.y.abs() <= plate.0 {
        return Some(StructureKind::Other(APPLICATOR.into()));
    }
    if ellipsoid(GTV).contains(p) {
        return Some(StructureKind::Gtv);
    }
    if ellipsoid(HRCTV).contains(p) {
        return Some(StructureKind::HrCtv);
    }
    if ellipsoid(BLADDER).contains(p) {
        return Some(StructureKind::OarBladder);
    }
    let rectal = (p.x * p.x + (p.y - RECTUM_Y).powi(2)).sqrt() <= RECTUM_RADIUS && p.z >= RECTUM_Z.0 && p.z <= RECTUM_Z.1;
    if rectal {
        return Some(StructureKind::OarRectumSigmoid);
    }
    if ellipsoid(SMALL_BOWEL).contains(p) {
        return Some(StructureKind::OarSmallBowel);
    }
    None
}

fn intensity(kind: Option<&StructureKind>, p: &Point3<f64>) -> f32 {
    match kind {
        Some(StructureKind::Other(_)) => 20.0,
        Some(StructureKind::Gtv) => 210.0,
        Some(StructureKind::HrCtv) => 180.0,
        Some(StructureKind::OarBladder) => 250.0,
        Some(StructureKind::OarRectumSigmoid) => 60.0,
        Some(StructureKind::OarSmallBowel) => 140.0,
        _ if p.z < 0.0 => 0.0,
        _ => 100.0,
    }
}

pub fn pelvis(spec: &PhantomSpec) -> PelvisPhantom {
    let device = Arc::new(make_template(&spec.template).expect("phantom template spec is valid"));
    let half = (spec.size as f64 - 1.0) * spec.spacing / 2.0;
    // the grid covers the plate and 100+ mm beyond the template face
    let origin = [-half, -half, -20.0];
    let grid = Grid::axis_aligned([spec.size; 3], [spec.spacing; 3], origin).expect("phantom grid is valid");
    let to_device = invert(&spec.registration);
    let plate_half = spec.template.cols.max(spec.template.rows) as f64 * spec.template.pitch / 2.0 + spec.template.margin;
    let plate = (plate_half, spec.template.thickness);

    let mut labels = LabelMap::empty(grid.clone());
    let codes: Vec<(StructureKind, u8)> = [
        StructureKind::Gtv,
        StructureKind::HrCtv,
        StructureKind::OarBladder,
        StructureKind::OarRectumSigmoid,
        StructureKind::OarSmallBowel,
        StructureKind::Other(APPLICATOR.into()),
    ]
    .into_iter()
    .map(|k| {
        let c = labels.ensure_code(&k);
        (k, c)
    })
    .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut voxels = Vec::with_capacity(grid.voxel_count());
    for idx in 0..grid.voxel_count() {
        let p = to_device.apply(&grid.world_of_index(grid.ijk(idx)));
        let kind = structure_at(&p, plate);
        if let Some(k) = &kind {
            labels.voxels[idx] = codes.iter().find(|(c, _)| c == k).unwrap().1;
        }
        let noise = (rng.random::<f64>() - 0.5) * 2.0 * spec.noise;
        voxels.push((intensity(kind.as_ref(), &p) as f64 + noise).max(0.0) as f32);
    }
    let volume = ScalarVolume { grid, dtype: crate::volume::DType::Float32, voxels, modality: "MR-T2".into() };
    PelvisPhantom { volume, labels, device, registration: spec.registration }
}

impl PelvisPhantom {
    /// Needles through every hole whose line meets the HR-CTV, advanced to
    /// 2 mm short of the target's far side.
    pub fn reference_plan(&self) -> NeedlePlan {
        let mut plan = NeedlePlan::new(self.device.clone(), self.registration, Stage::Pre);
        let t = ellipsoid(HRCTV);
        for hole in self.device.holes.clone() {
            let dx = (hole.position.x - t.center.x) / t.radii.x;
            let dy = (hole.position.y - t.center.y) / t.radii.y;
            let r2 = dx * dx + dy * dy;
            if r2 < 0.85 {
                let far = t.center.z + t.radii.z * (1.0 - r2).sqrt() - 2.0;
                let depth = (far / 0.5).floor() * 0.5;
                plan = edit_needle(&plan, &hole.id, &NeedleEdit::Place { depth_mm: depth }).expect("reference depths are in range");
            }
        }
        plan
    }

    /// Three well-spread hole centers in the device frame with their image
    /// positions.
    pub fn fiducials(&self) -> (Vec<Point3<f64>>, Vec<Point3<f64>>) {
        let n = self.device.holes.len();
        let cols = (self.device.holes.iter().filter(|h| h.id.starts_with('A')).count()).max(1);
        let picks = [0, cols - 1, n - cols];
        let model: Vec<Point3<f64>> = picks.iter().map(|&i| self.device.holes[i].position).collect();
        let image = model.iter().map(|p| self.registration.apply(p)).collect();
        (model, image)
    }

    /// Template surface points as seen in the label map (image space).
    pub fn applicator_cloud(&self) -> Vec<Point3<f64>> {
        crate::segmentation::surface_cloud(&self.labels, &StructureKind::Other(APPLICATOR.into())).unwrap_or_default()
    }
}
