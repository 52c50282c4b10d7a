//! Rigid device-to-scan registration: closed-form landmark fit followed by
//! point-to-point Iterated Closest Point refinement.

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality tolerance for rotations handed to or produced by this module.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RegistrationError {
    #[error("need at least 3 landmark pairs, got {0}")]
    TooFewLandmarks(usize),
    #[error("landmark lists differ in length ({model} model vs {image} image)")]
    LengthMismatch { model: usize, image: usize },
    #[error("degenerate landmark configuration (eigenvalue ratio {ratio:e}); pick non-collinear points")]
    Degenerate { ratio: f64 },
    #[error("point cloud `{0}` is empty")]
    EmptyCloud(&'static str),
    #[error("not a proper rotation: {0}")]
    NotARotation(String),
    #[error("invalid ICP configuration: {0}")]
    InvalidConfig(String),
}

/// `p ↦ rotation · p + translation`, mapping device coordinates into image
/// coordinates. Serialized as the 12 entries of the row-major 3×4 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 12]", try_from = "[f64; 12]")]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation of `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        RigidTransform { rotation: rot.into_inner(), translation }
    }

    /// Checked constructor; the rotation must be proper and orthonormal within
    /// [`ROTATION_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, RegistrationError> {
        check_rotation(&rotation, ROTATION_TOL)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(RegistrationError::NotARotation("non-finite translation".into()));
        }
        Ok(RigidTransform { rotation, translation })
    }

    /// Accepts an approximately orthonormal rotation (within `tol`), e.g. one
    /// that went through single precision, and snaps it to the nearest rotation.
    pub fn from_approximate(rotation: Matrix3<f64>, translation: Vector3<f64>, tol: f64) -> Result<Self, RegistrationError> {
        check_rotation(&rotation, tol)?;
        Ok(RigidTransform { rotation: orthonormalize(&rotation), translation })
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    pub fn from_row_major(m: [f64; 12]) -> Result<Self, RegistrationError> {
        Self::new(
            Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            Vector3::new(m[3], m[7], m[11]),
        )
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Largest absolute entry difference of the 3×4 matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation).amax().max((self.translation - other.translation).amax())
    }

    /// Angle (degrees) of the relative rotation between two transforms.
    pub fn rotation_error_deg(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

impl From<RigidTransform> for [f64; 12] {
    fn from(t: RigidTransform) -> Self {
        t.to_row_major()
    }
}

impl TryFrom<[f64; 12]> for RigidTransform {
    type Error = RegistrationError;

    fn try_from(m: [f64; 12]) -> Result<Self, Self::Error> {
        RigidTransform::from_row_major(m)
    }
}

fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<(), RegistrationError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(RegistrationError::NotARotation("non-finite entries".into()));
    }
    let err = (r.transpose() * r - Matrix3::identity()).amax();
    if err > tol {
        return Err(RegistrationError::NotARotation(format!("|RᵀR − I| = {err:e}")));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(RegistrationError::NotARotation(format!("det = {det}")));
    }
    Ok(())
}

/// Nearest proper rotation to `m` (polar factor with determinant correction).
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        let weakest = svd.singular_values.imin();
        d[(weakest, weakest)] = -1.0;
    }
    u * d * v_t
}

/// Maps every point through `t`.
pub fn apply_transform(t: &RigidTransform, points: &[Point3<f64>]) -> Vec<Point3<f64>> {
    points.iter().map(|p| t.apply(p)).collect()
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: orthonormalize(&(a.rotation * b.rotation)),
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let rt = orthonormalize(&t.rotation.transpose());
    RigidTransform { rotation: rt, translation: -(rt * t.translation) }
}

/// Corresponding model/image landmark points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPairs {
    pub model_points: Vec<Point3<f64>>,
    pub image_points: Vec<Point3<f64>>,
}

/// Minimum ratio between the middle and largest eigenvalues of the model
/// landmark scatter; smaller means (near-)collinear landmarks.
pub const MIN_SPREAD_RATIO: f64 = 1e-9;

impl LandmarkPairs {
    pub fn new(model_points: Vec<Point3<f64>>, image_points: Vec<Point3<f64>>) -> Result<Self, RegistrationError> {
        let pairs = LandmarkPairs { model_points, image_points };
        pairs.validate()?;
        Ok(pairs)
    }

    pub fn validate(&self) -> Result<(), RegistrationError> {
        let (m, i) = (self.model_points.len(), self.image_points.len());
        if m != i {
            return Err(RegistrationError::LengthMismatch { model: m, image: i });
        }
        if m < 3 {
            return Err(RegistrationError::TooFewLandmarks(m));
        }
        let c = centroid(&self.model_points);
        let scatter = self
            .model_points
            .iter()
            .fold(Matrix3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose());
        let mut eig: Vec<f64> = scatter.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let ratio = if eig[0] > 0.0 { eig[1] / eig[0] } else { 0.0 };
        if !(ratio > MIN_SPREAD_RATIO) {
            return Err(RegistrationError::Degenerate { ratio });
        }
        Ok(())
    }
}

fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / points.len() as f64)
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (SVD of the
/// cross-covariance, with the sign of the weakest axis fixed so the result is
/// never a reflection).
fn best_fit(src: &[Point3<f64>], dst: &[Point3<f64>]) -> RigidTransform {
    debug_assert_eq!(src.len(), dst.len());
    let cs = centroid(src);
    let cd = centroid(dst);
    let h = src
        .iter()
        .zip(dst)
        .fold(Matrix3::zeros(), |acc, (s, d)| acc + (s - cs) * (d - cd).transpose());
    let svd = h.svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        let weakest = svd.singular_values.imin();
        d[(weakest, weakest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let mut fit = RigidTransform { rotation, translation: cd.coords - rotation * cs.coords };
    for _ in 0..8 {
        let (next, angle) = polish(&fit, src, dst);
        fit = next;
        if angle < 1e-15 {
            break;
        }
    }
    fit
}

/// Linearised correction step, returning the corrected transform and the
/// step angle. The SVD loses about σ1/σ2 digits on thin configurations;
/// solving for the small residual rotation directly keeps the rounding
/// relative to the correction. At the least-squares optimum the step is zero.
fn polish(t: &RigidTransform, src: &[Point3<f64>], dst: &[Point3<f64>]) -> (RigidTransform, f64) {
    let mapped: Vec<Point3<f64>> = src.iter().map(|p| t.apply(p)).collect();
    let cq = centroid(&mapped);
    let n = src.len() as f64;
    let mean_r = mapped.iter().zip(dst).fold(Vector3::zeros(), |acc, (q, d)| acc + (d - q)) / n;
    let mut inertia = Matrix3::zeros();
    let mut torque = Vector3::zeros();
    for (q, d) in mapped.iter().zip(dst) {
        let p = q - cq;
        inertia += Matrix3::identity() * p.norm_squared() - p * p.transpose();
        torque += p.cross(&((d - q) - mean_r));
    }
    let Some(omega) = inertia.cholesky().map(|c| c.solve(&torque)) else {
        return (t.clone(), 0.0);
    };
    let step = Rotation3::new(omega).into_inner();
    let next = RigidTransform {
        rotation: step * t.rotation,
        translation: step * (t.translation - cq.coords) + cq.coords + mean_r,
    };
    (next, omega.norm())
}

pub fn fit_landmarks(pairs: &LandmarkPairs) -> Result<RigidTransform, RegistrationError> {
    pairs.validate()?;
    Ok(best_fit(&pairs.model_points, &pairs.image_points))
}

/// RMS distance between `t(model_points)` and `image_points`.
pub fn landmark_residual(t: &RigidTransform, pairs: &LandmarkPairs) -> f64 {
    let sum: f64 = pairs
        .model_points
        .iter()
        .zip(&pairs.image_points)
        .map(|(m, i)| (t.apply(m) - i).norm_squared())
        .sum();
    (sum / pairs.model_points.len().max(1) as f64).sqrt()
}

/// Static 3-d tree over a point cloud for nearest-neighbour queries.
pub struct KdTree<'a> {
    points: &'a [Point3<f64>],
    // implicit balanced layout: node = (index into points, split axis)
    nodes: Vec<(usize, u8)>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = vec![(0usize, 0u8); points.len()];
        Self::build(points, &mut order, &mut nodes, 0);
        KdTree { points, nodes }
    }

    fn build(points: &[Point3<f64>], order: &mut [usize], nodes: &mut [(usize, u8)], depth: usize) {
        if order.is_empty() {
            return;
        }
        let axis = depth % 3;
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        nodes[mid] = (order[mid], axis as u8);
        let (left, rest) = order.split_at_mut(mid);
        let (lnodes, rnodes) = nodes.split_at_mut(mid);
        Self::build(points, left, lnodes, depth + 1);
        Self::build(points, &mut rest[1..], &mut rnodes[1..], depth + 1);
    }

    /// Index of and squared distance to the nearest point (lowest index on ties).
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, self.nodes.len(), q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn search(&self, lo: usize, hi: usize, q: &Point3<f64>, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let (idx, axis) = self.nodes[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let delta = q[axis as usize] - p[axis as usize];
        let (near, far) = if delta <= 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if delta * delta <= best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Correspondence {
    #[default]
    NearestPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once an iteration improves the RMS error by less than this (mm).
    pub rms_change_tol: f64,
    pub correspondence: Correspondence,
    /// Fraction of worst correspondences dropped every iteration.
    pub outlier_trim_fraction: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 100,
            rms_change_tol: 1e-4,
            correspondence: Correspondence::NearestPoint,
            outlier_trim_fraction: 0.0,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.max_iterations == 0 {
            return Err(RegistrationError::InvalidConfig("max_iterations must be ≥ 1".into()));
        }
        if !(self.rms_change_tol > 0.0) {
            return Err(RegistrationError::InvalidConfig("rms_change_tol must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_trim_fraction) {
            return Err(RegistrationError::InvalidConfig("outlier_trim_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpReport {
    pub transform: RigidTransform,
    pub iterations_used: usize,
    pub final_rms: f64,
    pub converged: bool,
    /// RMS correspondence distance at the start of every iteration.
    pub rms_history: Vec<f64>,
}

/// Below this RMS (mm) the clouds are considered coincident.
const EXACT_FIT_RMS: f64 = 1e-12;

/// Refines `init` by alternating nearest-point matching against `target`
/// with a closed-form rigid re-fit. `transform` in the report is the one at
/// which `final_rms` was measured.
pub fn icp_refine(
    model: &[Point3<f64>],
    target: &[Point3<f64>],
    init: &RigidTransform,
    cfg: &IcpConfig,
) -> Result<IcpReport, RegistrationError> {
    if model.is_empty() {
        return Err(RegistrationError::EmptyCloud("model"));
    }
    if target.is_empty() {
        return Err(RegistrationError::EmptyCloud("target"));
    }
    cfg.validate()?;
    check_rotation(&init.rotation, ROTATION_TOL)?;

    let tree = KdTree::new(target);
    let mut current = *init;
    let mut accepted = current;
    let mut history = Vec::new();
    let mut converged = false;

    for iteration in 1..=cfg.max_iterations {
        let moved = apply_transform(&current, model);
        let mut matches: Vec<(usize, usize, f64)> = moved
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (j, d2) = tree.nearest(p).expect("target is non-empty");
                (i, j, d2)
            })
            .collect();
        if cfg.outlier_trim_fraction > 0.0 {
            let drop = (cfg.outlier_trim_fraction * matches.len() as f64).floor() as usize;
            let keep = (matches.len() - drop).max(3.min(matches.len()));
            matches.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
            matches.truncate(keep);
            matches.sort_by_key(|m| m.0);
        }
        let rms = (matches.iter().map(|m| m.2).sum::<f64>() / matches.len() as f64).sqrt();
        let previous = history.last().copied();
        if previous.is_some_and(|prev| rms > prev) {
            // roundoff or trimming made the last step worse; keep the one before
            current = accepted;
            converged = true;
            break;
        }
        history.push(rms);
        accepted = current;

        let stalled = previous.is_some_and(|prev: f64| prev - rms < cfg.rms_change_tol);
        if rms <= EXACT_FIT_RMS || stalled {
            converged = true;
            break;
        }
        if iteration == cfg.max_iterations {
            break;
        }

        let src: Vec<Point3<f64>> = matches.iter().map(|m| moved[m.0]).collect();
        let dst: Vec<Point3<f64>> = matches.iter().map(|m| target[m.1]).collect();
        let step = best_fit(&src, &dst);
        current = compose(&step, &current);
    }

    Ok(IcpReport {
        transform: current,
        iterations_used: history.len(),
        final_rms: *history.last().expect("at least one iteration"),
        converged,
        rms_history: history,
    })
}
