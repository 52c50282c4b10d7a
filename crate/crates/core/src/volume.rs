//! Voxel grids: scalar volumes, label maps, the SVOL v1 file format and
//! slice extraction.
//!
//! All grids store voxels x-fastest, then y, then z. World (patient) space
//! coordinates of a voxel index `ijk` are `origin + R * (spacing ⊙ ijk)`
//! where the columns of `R` are the direction cosines of the grid axes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the orthonormality of orientation matrices and slice frames.
pub const ORTHO_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header field `{field}`: {reason}")]
    Format { field: String, reason: String },
    #[error("voxel payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("voxel payload has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("voxel value {value} at index {index} is not representable as {dtype}")]
    Unrepresentable { value: f32, index: usize, dtype: DType },
    #[error("label code {0} has no legend entry")]
    UnknownLabel(u8),
    #[error("invalid slice plane: {0}")]
    InvalidPlane(String),
}

fn format_err(field: &str, reason: impl Into<String>) -> VolumeError {
    VolumeError::Format { field: field.to_owned(), reason: reason.into() }
}

/// Anatomical structure classes carried by label maps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", from = "String")]
pub enum StructureKind {
    Gtv,
    HrCtv,
    IrCtv,
    OarBladder,
    OarRectumSigmoid,
    OarSmallBowel,
    Other(String),
}

impl StructureKind {
    pub fn name(&self) -> &str {
        match self {
            StructureKind::Gtv => "GTV",
            StructureKind::HrCtv => "HR_CTV",
            StructureKind::IrCtv => "IR_CTV",
            StructureKind::OarBladder => "OAR_BLADDER",
            StructureKind::OarRectumSigmoid => "OAR_RECTUM_SIGMOID",
            StructureKind::OarSmallBowel => "OAR_SMALL_BOWEL",
            StructureKind::Other(name) => name,
        }
    }

    pub fn is_oar(&self) -> bool {
        matches!(
            self,
            StructureKind::OarBladder | StructureKind::OarRectumSigmoid | StructureKind::OarSmallBowel
        )
    }

    pub const OARS: [StructureKind; 3] = [
        StructureKind::OarBladder,
        StructureKind::OarRectumSigmoid,
        StructureKind::OarSmallBowel,
    ];
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<&str> for StructureKind {
    fn from(s: &str) -> Self {
        match s {
            "GTV" => StructureKind::Gtv,
            "HR_CTV" => StructureKind::HrCtv,
            "IR_CTV" => StructureKind::IrCtv,
            "OAR_BLADDER" => StructureKind::OarBladder,
            "OAR_RECTUM_SIGMOID" => StructureKind::OarRectumSigmoid,
            "OAR_SMALL_BOWEL" => StructureKind::OarSmallBowel,
            other => StructureKind::Other(other.to_owned()),
        }
    }
}

impl From<String> for StructureKind {
    fn from(s: String) -> Self {
        StructureKind::from(s.as_str())
    }
}

impl From<StructureKind> for String {
    fn from(k: StructureKind) -> Self {
        k.name().to_owned()
    }
}

/// On-disk element type of a voxel payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Uint8,
    Int16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Uint8 => 1,
            DType::Int16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::Float32 => "float32",
            DType::Uint8 => "uint8",
            DType::Int16 => "int16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "float32" => Ok(DType::Float32),
            "uint8" => Ok(DType::Uint8),
            "int16" => Ok(DType::Int16),
            other => Err(format_err("dtype", format!("unsupported element type `{other}`"))),
        }
    }
}

/// Geometry shared by every voxel grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Direction cosines, row-major; column `a` is the world direction of grid axis `a`.
    pub orientation: [[f64; 3]; 3],
}

impl Grid {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        orientation: [[f64; 3]; 3],
    ) -> Result<Self, VolumeError> {
        let grid = Grid { dims, spacing, origin, orientation };
        grid.validate()?;
        Ok(grid)
    }

    /// Axis-aligned grid with identity orientation.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self, VolumeError> {
        Self::new(dims, spacing, origin, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGrid(format!("dims {:?} must be positive", self.dims)));
        }
        if self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(VolumeError::InvalidGrid("voxel count overflows".into()));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::InvalidGrid(format!("spacing {:?} must be positive", self.spacing)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::InvalidGrid("origin must be finite".into()));
        }
        let r = self.rotation();
        if r.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::InvalidGrid("orientation must be finite".into()));
        }
        let gram = r.transpose() * r;
        if (gram - Matrix3::identity()).amax() > ORTHO_TOL {
            return Err(VolumeError::InvalidGrid("orientation columns are not orthonormal".into()));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let o = &self.orientation;
        Matrix3::new(o[0][0], o[0][1], o[0][2], o[1][0], o[1][1], o[1][2], o[2][0], o[2][1], o[2][2])
    }

    /// World direction of grid axis `axis`.
    pub fn axis_direction(&self, axis: usize) -> Vector3<f64> {
        self.rotation().column(axis).into_owned()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn ijk(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let rest = index / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World position of a (possibly fractional) grid index.
    pub fn world_of_continuous(&self, index: Vector3<f64>) -> Point3<f64> {
        let scaled = Vector3::new(
            index.x * self.spacing[0],
            index.y * self.spacing[1],
            index.z * self.spacing[2],
        );
        Point3::from(self.rotation() * scaled) + Vector3::from(self.origin)
    }

    pub fn world_of_index(&self, ijk: [usize; 3]) -> Point3<f64> {
        self.world_of_continuous(Vector3::new(ijk[0] as f64, ijk[1] as f64, ijk[2] as f64))
    }

    /// Fractional grid index of a world point.
    pub fn continuous_index(&self, p: &Point3<f64>) -> Vector3<f64> {
        let local = self.rotation().transpose() * (p - Point3::from(self.origin));
        Vector3::new(local.x / self.spacing[0], local.y / self.spacing[1], local.z / self.spacing[2])
    }

    /// Index of the voxel whose cell contains `p`, if any.
    pub fn nearest_index(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let c = self.continuous_index(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = c[a].round();
            if !(r >= 0.0 && r < self.dims[a] as f64) {
                return None;
            }
            out[a] = r as usize;
        }
        Some(out)
    }

    /// Volume of a single voxel in cm³.
    pub fn voxel_volume_cc(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2] / 1000.0
    }
}

/// Intensity volume. Voxels are held as `f32`, which represents every
/// `uint8` and `int16` value exactly; `dtype` records the on-disk type.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub grid: Grid,
    pub dtype: DType,
    pub voxels: Vec<f32>,
    pub modality: String,
}

impl ScalarVolume {
    pub fn new(grid: Grid, dtype: DType, voxels: Vec<f32>, modality: impl Into<String>) -> Result<Self, VolumeError> {
        grid.validate()?;
        if voxels.len() != grid.voxel_count() {
            return Err(VolumeError::InvalidGrid(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                grid.dims
            )));
        }
        Ok(ScalarVolume { grid, dtype, voxels, modality: modality.into() })
    }

    pub fn from_fn(grid: Grid, modality: &str, mut f: impl FnMut([usize; 3]) -> f32) -> Result<Self, VolumeError> {
        let voxels = (0..grid.voxel_count()).map(|i| f(grid.ijk(i))).collect();
        Self::new(grid, DType::Float32, voxels, modality)
    }

    pub fn value(&self, ijk: [usize; 3]) -> f32 {
        self.voxels[self.grid.linear_index(ijk[0], ijk[1], ijk[2])]
    }

    pub fn sample(&self, p: &Point3<f64>, interp: Interpolation) -> Option<f64> {
        match interp {
            Interpolation::Nearest => self.grid.nearest_index(p).map(|ijk| self.value(ijk) as f64),
            Interpolation::Trilinear => self.sample_trilinear(p),
        }
    }

    fn sample_trilinear(&self, p: &Point3<f64>) -> Option<f64> {
        const EDGE: f64 = 1e-9;
        let c = self.grid.continuous_index(p);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut next = [0usize; 3];
        for a in 0..3 {
            let n = self.grid.dims[a];
            let x = c[a];
            if !(x >= -EDGE && x <= (n - 1) as f64 + EDGE) {
                return None;
            }
            if n == 1 {
                continue;
            }
            let i0 = (x.floor().max(0.0) as usize).min(n - 2);
            base[a] = i0;
            next[a] = i0 + 1;
            frac[a] = (x - i0 as f64).clamp(0.0, 1.0);
        }
        // nested lerps so that equal corner values interpolate exactly
        let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
        let at = |di: usize, dj: usize, dk: usize| -> f64 {
            let pick = |a: usize, hi: usize| if hi == 1 && self.grid.dims[a] > 1 { next[a] } else { base[a] };
            self.value([pick(0, di), pick(1, dj), pick(2, dk)]) as f64
        };
        let mut plane = [0.0f64; 2];
        for (dk, slot) in plane.iter_mut().enumerate() {
            let row0 = lerp(at(0, 0, dk), at(1, 0, dk), frac[0]);
            let row1 = lerp(at(0, 1, dk), at(1, 1, dk), frac[0]);
            *slot = lerp(row0, row1, frac[1]);
        }
        let acc = lerp(plane[0], plane[1], frac[2]);
        Some(acc)
    }

    pub fn to_svol_bytes(&self) -> Result<Vec<u8>, VolumeError> {
        let header = SvolHeader {
            grid: self.grid.clone(),
            dtype: self.dtype,
            modality: self.modality.clone(),
            labels: Vec::new(),
        };
        let mut out = header.render().into_bytes();
        encode_payload(&self.voxels, self.dtype, &mut out)?;
        Ok(out)
    }

    pub fn from_svol_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        let (header, payload) = SvolHeader::parse(bytes)?;
        let voxels = decode_payload(payload, header.dtype, header.grid.voxel_count())?;
        Ok(ScalarVolume { grid: header.grid, dtype: header.dtype, voxels, modality: header.modality })
    }
}

/// Structure label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub voxels: Vec<u8>,
    pub legend: BTreeMap<u8, StructureKind>,
}

impl LabelMap {
    pub fn new(grid: Grid, voxels: Vec<u8>, legend: BTreeMap<u8, StructureKind>) -> Result<Self, VolumeError> {
        grid.validate()?;
        if voxels.len() != grid.voxel_count() {
            return Err(VolumeError::InvalidGrid(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                grid.dims
            )));
        }
        let map = LabelMap { grid, voxels, legend };
        map.check_legend()?;
        Ok(map)
    }

    /// All-background label map on `grid`.
    pub fn empty(grid: Grid) -> Self {
        let n = grid.voxel_count();
        LabelMap { grid, voxels: vec![0; n], legend: BTreeMap::new() }
    }

    pub fn check_legend(&self) -> Result<(), VolumeError> {
        let mut seen = [false; 256];
        for &v in &self.voxels {
            seen[v as usize] = true;
        }
        for code in 1..=255u8 {
            if seen[code as usize] && !self.legend.contains_key(&code) {
                return Err(VolumeError::UnknownLabel(code));
            }
        }
        Ok(())
    }

    pub fn code_of(&self, kind: &StructureKind) -> Option<u8> {
        self.legend.iter().find(|(_, k)| *k == kind).map(|(c, _)| *c)
    }

    /// Code for `kind`, adding a legend entry with the lowest free code if needed.
    pub fn ensure_code(&mut self, kind: &StructureKind) -> u8 {
        if let Some(code) = self.code_of(kind) {
            return code;
        }
        let code = (1..=255u8)
            .find(|c| !self.legend.contains_key(c))
            .expect("label legend exhausted");
        self.legend.insert(code, kind.clone());
        code
    }

    pub fn kind_at(&self, index: usize) -> Option<&StructureKind> {
        self.legend.get(&self.voxels[index])
    }

    pub fn count(&self, kind: &StructureKind) -> usize {
        match self.code_of(kind) {
            Some(code) => self.voxels.iter().filter(|&&v| v == code).count(),
            None => 0,
        }
    }

    /// Nearest-voxel label at a world point; `None` outside the grid.
    pub fn label_at(&self, p: &Point3<f64>) -> Option<u8> {
        self.grid
            .nearest_index(p)
            .map(|ijk| self.voxels[self.grid.linear_index(ijk[0], ijk[1], ijk[2])])
    }

    pub fn to_svol_bytes(&self) -> Result<Vec<u8>, VolumeError> {
        let header = SvolHeader {
            grid: self.grid.clone(),
            dtype: DType::Uint8,
            modality: "LABELS".to_owned(),
            labels: self.legend.iter().map(|(c, k)| (*c, k.clone())).collect(),
        };
        let mut out = header.render().into_bytes();
        out.extend_from_slice(&self.voxels);
        Ok(out)
    }

    pub fn from_svol_bytes(bytes: &[u8]) -> Result<Self, VolumeError> {
        let (header, payload) = SvolHeader::parse(bytes)?;
        if header.dtype != DType::Uint8 {
            return Err(format_err("dtype", "label maps must be uint8"));
        }
        let n = header.grid.voxel_count();
        check_payload_len(payload.len(), n)?;
        let legend = header.labels.into_iter().collect();
        LabelMap::new(header.grid, payload.to_vec(), legend)
    }
}

/// Parsed SVOL v1 header.
#[derive(Debug, Clone, PartialEq)]
struct SvolHeader {
    grid: Grid,
    dtype: DType,
    modality: String,
    labels: Vec<(u8, StructureKind)>,
}

impl SvolHeader {
    fn render(&self) -> String {
        let g = &self.grid;
        let o = &g.orientation;
        let mut s = String::new();
        s.push_str("svol 1\n");
        s.push_str(&format!("dims {} {} {}\n", g.dims[0], g.dims[1], g.dims[2]));
        s.push_str(&format!("spacing {} {} {}\n", g.spacing[0], g.spacing[1], g.spacing[2]));
        s.push_str(&format!("origin {} {} {}\n", g.origin[0], g.origin[1], g.origin[2]));
        s.push_str(&format!(
            "orient {} {} {} {} {} {} {} {} {}\n",
            o[0][0], o[0][1], o[0][2], o[1][0], o[1][1], o[1][2], o[2][0], o[2][1], o[2][2]
        ));
        s.push_str(&format!("dtype {}\n", self.dtype));
        s.push_str(&format!("modality {}\n", self.modality));
        for (code, kind) in &self.labels {
            s.push_str(&format!("label {} {}\n", code, kind));
        }
        s.push('\n');
        s
    }

    fn parse(bytes: &[u8]) -> Result<(SvolHeader, &[u8]), VolumeError> {
        let end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| format_err("header", "missing blank line terminating the header"))?;
        let text = std::str::from_utf8(&bytes[..end]).map_err(|_| format_err("header", "not valid UTF-8"))?;
        let payload = &bytes[end + 2..];

        let mut lines = text.split('\n');
        match lines.next() {
            Some("svol 1") => {}
            Some(other) => return Err(format_err("svol", format!("expected `svol 1`, found `{other}`"))),
            None => return Err(format_err("svol", "empty header")),
        }

        let mut dims = None;
        let mut spacing = None;
        let mut origin = None;
        let mut orient = None;
        let mut dtype = None;
        let mut modality = None;
        let mut labels = Vec::new();

        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "dims" => dims = Some(parse_fixed::<usize, 3>("dims", rest)?),
                "spacing" => spacing = Some(parse_fixed::<f64, 3>("spacing", rest)?),
                "origin" => origin = Some(parse_fixed::<f64, 3>("origin", rest)?),
                "orient" => orient = Some(parse_fixed::<f64, 9>("orient", rest)?),
                "dtype" => dtype = Some(rest.parse::<DType>()?),
                "modality" => modality = Some(rest.to_owned()),
                "label" => {
                    let (code, name) = rest
                        .split_once(' ')
                        .ok_or_else(|| format_err("label", "expected `label CODE NAME`"))?;
                    let code: u8 = code
                        .parse()
                        .map_err(|_| format_err("label", format!("bad code `{code}`")))?;
                    if code == 0 {
                        return Err(format_err("label", "code 0 is reserved for background"));
                    }
                    if name.is_empty() {
                        return Err(format_err("label", "empty structure name"));
                    }
                    if labels.iter().any(|(c, _)| *c == code) {
                        return Err(format_err("label", format!("duplicate code {code}")));
                    }
                    labels.push((code, StructureKind::from(name)));
                }
                other => return Err(format_err(other, "unknown header field")),
            }
        }

        let dims = dims.ok_or_else(|| format_err("dims", "missing"))?;
        let spacing = spacing.ok_or_else(|| format_err("spacing", "missing"))?;
        let origin = origin.ok_or_else(|| format_err("origin", "missing"))?;
        let o = orient.ok_or_else(|| format_err("orient", "missing"))?;
        let dtype = dtype.ok_or_else(|| format_err("dtype", "missing"))?;
        if dims.iter().any(|&d| d == 0) {
            return Err(format_err("dims", "every axis must be positive"));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(format_err("spacing", "every axis must be positive"));
        }
        let orientation = [[o[0], o[1], o[2]], [o[3], o[4], o[5]], [o[6], o[7], o[8]]];
        let grid = Grid { dims, spacing, origin, orientation };
        grid.validate().map_err(|e| match e {
            VolumeError::InvalidGrid(reason) if reason.contains("orientation") => format_err("orient", reason),
            other => other,
        })?;
        Ok((
            SvolHeader { grid, dtype, modality: modality.unwrap_or_default(), labels },
            payload,
        ))
    }
}

fn parse_fixed<T: FromStr, const N: usize>(field: &str, rest: &str) -> Result<[T; N], VolumeError>
where
    T: Copy + Default,
{
    let parts: Vec<&str> = rest.split(' ').filter(|s| !s.is_empty()).collect();
    if parts.len() != N {
        return Err(format_err(field, format!("expected {N} values, found {}", parts.len())));
    }
    let mut out = [T::default(); N];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = part
            .parse()
            .map_err(|_| format_err(field, format!("cannot parse `{part}`")))?;
    }
    Ok(out)
}

fn check_payload_len(found: usize, expected: usize) -> Result<(), VolumeError> {
    if found < expected {
        Err(VolumeError::Truncated { expected, found })
    } else if found > expected {
        Err(VolumeError::TrailingBytes { extra: found - expected })
    } else {
        Ok(())
    }
}

fn decode_payload(payload: &[u8], dtype: DType, count: usize) -> Result<Vec<f32>, VolumeError> {
    check_payload_len(payload.len(), count * dtype.size())?;
    Ok(match dtype {
        DType::Float32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::Uint8 => payload.iter().map(|&b| b as f32).collect(),
        DType::Int16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    })
}

fn encode_payload(voxels: &[f32], dtype: DType, out: &mut Vec<u8>) -> Result<(), VolumeError> {
    out.reserve(voxels.len() * dtype.size());
    for (index, &value) in voxels.iter().enumerate() {
        match dtype {
            DType::Float32 => out.extend_from_slice(&value.to_le_bytes()),
            DType::Uint8 => {
                if value.fract() != 0.0 || !(0.0..=255.0).contains(&value) {
                    return Err(VolumeError::Unrepresentable { value, index, dtype });
                }
                out.push(value as u8);
            }
            DType::Int16 => {
                if value.fract() != 0.0 || !(-32768.0..=32767.0).contains(&value) {
                    return Err(VolumeError::Unrepresentable { value, index, dtype });
                }
                out.extend_from_slice(&(value as i16).to_le_bytes());
            }
        }
    }
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<ScalarVolume, VolumeError> {
    ScalarVolume::from_svol_bytes(&std::fs::read(path)?)
}

pub fn save_volume(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let bytes = vol.to_svol_bytes()?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap, VolumeError> {
    LabelMap::from_svol_bytes(&std::fs::read(path)?)
}

pub fn save_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let bytes = labels.to_svol_bytes()?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Voxel volume in cm³.
pub fn voxel_volume_cc(vol: &ScalarVolume) -> f64 {
    vol.grid.voxel_volume_cc()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolKind {
    T1,
    T2,
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(ProtocolKind::T1),
            "T2" => Ok(ProtocolKind::T2),
            other => Err(format!("unknown MR protocol `{other}`")),
        }
    }
}

/// Non-fatal protocol deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub protocol: ProtocolKind,
    pub through_plane_mm: f64,
    pub expected: String,
    pub message: String,
}

const T1_SLICE_MM: f64 = 3.0;
// T2 slices are 4-5 mm with either no gap or a 1 mm gap.
const T2_SLICE_MM: (f64, f64) = (4.0, 5.0);
const T2_MAX_GAP_MM: f64 = 1.0;
const PROTOCOL_TOL_MM: f64 = 1e-6;

/// Checks the through-plane spacing (slice thickness plus gap) against the
/// acquisition protocol for `kind`.
pub fn validate_protocol(vol: &ScalarVolume, kind: ProtocolKind) -> Vec<Advisory> {
    let through = vol.grid.spacing[2];
    let (ok, expected) = match kind {
        ProtocolKind::T1 => ((through - T1_SLICE_MM).abs() <= PROTOCOL_TOL_MM, "3 mm slices, no gap".to_owned()),
        ProtocolKind::T2 => (
            through >= T2_SLICE_MM.0 - PROTOCOL_TOL_MM && through <= T2_SLICE_MM.1 + T2_MAX_GAP_MM + PROTOCOL_TOL_MM,
            "4-5 mm slices with 0 or 1 mm gap (4-6 mm spacing)".to_owned(),
        ),
    };
    if ok {
        Vec::new()
    } else {
        vec![Advisory {
            protocol: kind,
            through_plane_mm: through,
            message: format!("{kind:?} through-plane spacing {through} mm; expected {expected}"),
            expected,
        }]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

/// Sampling plane: pixel `(i, j)` sits at `origin + u * (extent[0] / resolution[0]) * i
/// + v * (extent[1] / resolution[1]) * j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    pub origin: Point3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub extent: [f64; 2],
    pub resolution: [usize; 2],
}

impl SlicePlane {
    pub fn new(
        origin: Point3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        extent: [f64; 2],
        resolution: [usize; 2],
    ) -> Result<Self, VolumeError> {
        let plane = SlicePlane { origin, normal: u.cross(&v), u, v, extent, resolution };
        plane.validate()?;
        Ok(plane)
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        for (name, vec) in [("u", &self.u), ("v", &self.v), ("normal", &self.normal)] {
            if (vec.norm() - 1.0).abs() > ORTHO_TOL {
                return Err(VolumeError::InvalidPlane(format!("{name} is not unit length")));
            }
        }
        if self.u.dot(&self.v).abs() > ORTHO_TOL
            || self.u.dot(&self.normal).abs() > ORTHO_TOL
            || self.v.dot(&self.normal).abs() > ORTHO_TOL
        {
            return Err(VolumeError::InvalidPlane("frame vectors are not orthogonal".into()));
        }
        if self.resolution.iter().any(|&r| r == 0) {
            return Err(VolumeError::InvalidPlane("resolution must be positive".into()));
        }
        if self.extent.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
            return Err(VolumeError::InvalidPlane("extent must be positive".into()));
        }
        Ok(())
    }

    pub fn pixel_pitch(&self) -> [f64; 2] {
        [self.extent[0] / self.resolution[0] as f64, self.extent[1] / self.resolution[1] as f64]
    }

    pub fn pixel_position(&self, i: usize, j: usize) -> Point3<f64> {
        let [su, sv] = self.pixel_pitch();
        self.origin + self.u * (su * i as f64) + self.v * (sv * j as f64)
    }

    /// Plane through the voxel centers of grid slice `index` normal to grid
    /// axis `axis` (0 = sagittal, 1 = coronal, 2 = axial for a standard grid).
    pub fn grid_aligned(grid: &Grid, axis: usize, index: usize) -> Result<Self, VolumeError> {
        if axis > 2 || index >= grid.dims[axis] {
            return Err(VolumeError::InvalidPlane(format!("slice {index} on axis {axis} out of range")));
        }
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut ijk = [0usize; 3];
        ijk[axis] = index;
        let origin = grid.world_of_index(ijk);
        let u = grid.axis_direction(a);
        let v = grid.axis_direction(b);
        let plane = SlicePlane {
            origin,
            normal: u.cross(&v),
            u,
            v,
            extent: [grid.dims[a] as f64 * grid.spacing[a], grid.dims[b] as f64 * grid.spacing[b]],
            resolution: [grid.dims[a], grid.dims[b]],
        };
        plane.validate()?;
        Ok(plane)
    }

    /// Square plane centered on `center` and orthogonal to `axis` (para-axial view
    /// of an applicator).
    pub fn orthogonal_to_axis(
        center: Point3<f64>,
        axis: Vector3<f64>,
        extent: f64,
        resolution: usize,
    ) -> Result<Self, VolumeError> {
        let normal = axis
            .try_normalize(1e-12)
            .ok_or_else(|| VolumeError::InvalidPlane("zero axis".into()))?;
        let u = any_perpendicular(&normal);
        let v = normal.cross(&u);
        Self::centered(center, u, v, extent, resolution)
    }

    /// Square plane centered on `center` containing `axis`; `hint` picks the
    /// rotation about the axis (para-sagittal / para-coronal views).
    pub fn parallel_to_axis(
        center: Point3<f64>,
        axis: Vector3<f64>,
        hint: Vector3<f64>,
        extent: f64,
        resolution: usize,
    ) -> Result<Self, VolumeError> {
        let v = axis
            .try_normalize(1e-12)
            .ok_or_else(|| VolumeError::InvalidPlane("zero axis".into()))?;
        let u = (hint - v * hint.dot(&v))
            .try_normalize(1e-12)
            .ok_or_else(|| VolumeError::InvalidPlane("hint parallel to axis".into()))?;
        Self::centered(center, u, v, extent, resolution)
    }

    fn centered(
        center: Point3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        extent: f64,
        resolution: usize,
    ) -> Result<Self, VolumeError> {
        let half = extent / 2.0;
        Self::new(center - u * half - v * half, u, v, [extent, extent], [resolution, resolution])
    }
}

fn any_perpendicular(n: &Vector3<f64>) -> Vector3<f64> {
    let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    (seed - n * seed.dot(n)).normalize()
}

/// Row-major 2D image: pixel `(i, j)` is `pixels[j * width + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl SliceImage {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pixels[j * self.width + i]
    }
}

/// Value written for samples that fall outside the grid.
pub const SLICE_FILL: f64 = 0.0;

pub fn extract_slice(vol: &ScalarVolume, plane: &SlicePlane, interp: Interpolation) -> SliceImage {
    let [width, height] = plane.resolution;
    let mut pixels = Vec::with_capacity(width * height);
    for j in 0..height {
        for i in 0..width {
            let p = plane.pixel_position(i, j);
            pixels.push(vol.sample(&p, interp).unwrap_or(SLICE_FILL));
        }
    }
    SliceImage { width, height, pixels }
}
