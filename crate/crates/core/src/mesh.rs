//! Triangle meshes: STL input/output, parametric device models and surface
//! sampling.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const HEADER_LEN: usize = 80;
const FACET_LEN: usize = 50;
/// Triangles with less area than this (mm²) are degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;
/// Allowed deviation between a stored normal and the right-hand-rule normal.
pub const NORMAL_TOL: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("binary STL truncated: {len} bytes cannot hold the 84-byte preamble")]
    Truncated { len: usize },
    #[error("binary STL declares {declared} facets but holds {found}")]
    CountMismatch { declared: u32, found: usize },
    #[error("facet {facet}: {reason}")]
    Parse { facet: usize, reason: String },
    #[error("triangle {triangle} is degenerate (area {area:e} mm²)")]
    Degenerate { triangle: usize, area: f64 },
    #[error("triangle {triangle} references vertex {vertex} of {count}")]
    IndexOutOfRange { triangle: usize, vertex: u32, count: usize },
    #[error("mesh has no triangles")]
    Empty,
    #[error("invalid device parameters: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StlFormat {
    Binary,
    Ascii,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Keep degenerate triangles instead of rejecting the file.
    pub permissive: bool,
}

/// Indexed triangle mesh with single-precision vertices, as stored in STL.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    pub name: String,
    pub vertices: Vec<[f32; 3]>,
    pub triangles: Vec<[u32; 3]>,
    /// One stored normal per triangle.
    pub normals: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Facet {
    normal: [f32; 3],
    vertices: [[f32; 3]; 3],
}

fn to_point(v: [f32; 3]) -> Point3<f64> {
    Point3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            to_point(self.vertices[a as usize]),
            to_point(self.vertices[b as usize]),
            to_point(self.vertices[c as usize]),
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Right-hand-rule unit normal, or zero for a degenerate triangle.
    pub fn computed_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).try_normalize(0.0).unwrap_or_else(Vector3::zeros)
    }

    /// Triangles whose stored normal disagrees with the winding.
    pub fn inconsistent_normals(&self) -> Vec<usize> {
        (0..self.triangles.len())
            .filter(|&t| {
                let n = self.normals[t];
                let stored = Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64);
                (stored - self.computed_normal(t)).amax() > NORMAL_TOL
            })
            .collect()
    }

    pub fn validate(&self, opts: LoadOptions) -> Result<(), MeshError> {
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                if v as usize >= self.vertices.len() {
                    return Err(MeshError::IndexOutOfRange { triangle: t, vertex: v, count: self.vertices.len() });
                }
            }
            if !opts.permissive {
                let area = self.triangle_area(t);
                if !(area > MIN_TRIANGLE_AREA) {
                    return Err(MeshError::Degenerate { triangle: t, area });
                }
            }
        }
        Ok(())
    }

    fn from_facets(name: String, facets: &[Facet]) -> TriangleMesh {
        let mut welder = Welder::default();
        let mut triangles = Vec::with_capacity(facets.len());
        let mut normals = Vec::with_capacity(facets.len());
        for f in facets {
            triangles.push([welder.index(f.vertices[0]), welder.index(f.vertices[1]), welder.index(f.vertices[2])]);
            normals.push(f.normal);
        }
        TriangleMesh { name, vertices: welder.vertices, triangles, normals }
    }

    fn facets(&self) -> impl Iterator<Item = Facet> + '_ {
        self.triangles.iter().zip(&self.normals).map(|(tri, n)| Facet {
            normal: *n,
            vertices: [
                self.vertices[tri[0] as usize],
                self.vertices[tri[1] as usize],
                self.vertices[tri[2] as usize],
            ],
        })
    }

    pub fn to_binary_stl(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 + FACET_LEN * self.triangles.len());
        let mut header = [0u8; HEADER_LEN];
        let name = truncate_utf8(&self.name, HEADER_LEN);
        header[..name.len()].copy_from_slice(name.as_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for f in self.facets() {
            for v in std::iter::once(&f.normal).chain(f.vertices.iter()) {
                for c in v {
                    out.extend_from_slice(&c.to_le_bytes());
                }
            }
            out.extend_from_slice(&0u16.to_le_bytes());
        }
        out
    }

    pub fn to_ascii_stl(&self) -> String {
        let name = self.name.replace(['\n', '\r'], " ");
        let mut s = format!("solid {name}\n");
        for f in self.facets() {
            let [nx, ny, nz] = f.normal;
            s.push_str(&format!("  facet normal {nx:e} {ny:e} {nz:e}\n    outer loop\n"));
            for [x, y, z] in f.vertices {
                s.push_str(&format!("      vertex {x:e} {y:e} {z:e}\n"));
            }
            s.push_str("    endloop\n  endfacet\n");
        }
        s.push_str(&format!("endsolid {name}\n"));
        s
    }
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

/// Exact-coordinate vertex welding in first-appearance order.
#[derive(Default)]
struct Welder {
    vertices: Vec<[f32; 3]>,
    lookup: HashMap<[u32; 3], u32>,
}

impl Welder {
    fn index(&mut self, v: [f32; 3]) -> u32 {
        // bitwise, so -0.0 stays distinct and binary round trips are exact
        let key = v.map(f32::to_bits);
        *self.lookup.entry(key).or_insert_with(|| {
            self.vertices.push(v);
            (self.vertices.len() - 1) as u32
        })
    }
}

/// Parses binary or ASCII STL, detecting the encoding from the content.
pub fn parse_stl(bytes: &[u8], opts: LoadOptions) -> Result<TriangleMesh, MeshError> {
    let binary_size_matches = bytes.len() >= HEADER_LEN + 4 && {
        let declared = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        declared.checked_mul(FACET_LEN).and_then(|n| n.checked_add(HEADER_LEN + 4)) == Some(bytes.len())
    };
    let mesh = if !binary_size_matches && looks_ascii(bytes) {
        parse_ascii(std::str::from_utf8(bytes).expect("checked by looks_ascii"))?
    } else {
        parse_binary(bytes)?
    };
    mesh.validate(opts)?;
    Ok(mesh)
}

fn looks_ascii(bytes: &[u8]) -> bool {
    let trimmed = bytes.iter().position(|b| !b.is_ascii_whitespace()).map_or(&[][..], |p| &bytes[p..]);
    trimmed.starts_with(b"solid") && std::str::from_utf8(bytes).is_ok()
}

fn parse_binary(bytes: &[u8]) -> Result<TriangleMesh, MeshError> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(MeshError::Truncated { len: bytes.len() });
    }
    let declared = u32::from_le_bytes(bytes[80..84].try_into().unwrap());
    let body = &bytes[HEADER_LEN + 4..];
    if body.len() != declared as usize * FACET_LEN {
        return Err(MeshError::CountMismatch { declared, found: body.len() / FACET_LEN });
    }
    let name_end = bytes[..HEADER_LEN].iter().position(|&b| b == 0).unwrap_or(HEADER_LEN);
    let name = String::from_utf8_lossy(&bytes[..name_end]).trim_end().to_owned();

    let mut facets = Vec::with_capacity(declared as usize);
    for (index, chunk) in body.chunks_exact(FACET_LEN).enumerate() {
        let mut floats = [0f32; 12];
        for (k, f) in floats.iter_mut().enumerate() {
            *f = f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().unwrap());
        }
        if let Some(bad) = floats.iter().position(|v| !v.is_finite()) {
            return Err(MeshError::Parse { facet: index, reason: format!("non-finite value at float {bad}") });
        }
        facets.push(Facet {
            normal: [floats[0], floats[1], floats[2]],
            vertices: [
                [floats[3], floats[4], floats[5]],
                [floats[6], floats[7], floats[8]],
                [floats[9], floats[10], floats[11]],
            ],
        });
    }
    Ok(TriangleMesh::from_facets(name, &facets))
}

fn parse_ascii(text: &str) -> Result<TriangleMesh, MeshError> {
    let text = text.trim_start();
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let name = first.trim_start_matches("solid").trim().to_owned();
    let mut tokens = rest.split_ascii_whitespace();
    let mut facets = Vec::new();

    let expect = |tok: Option<&str>, want: &str, facet: usize| -> Result<(), MeshError> {
        match tok {
            Some(t) if t == want => Ok(()),
            Some(t) => Err(MeshError::Parse { facet, reason: format!("expected `{want}`, found `{t}`") }),
            None => Err(MeshError::Parse { facet, reason: format!("unexpected end of file, expected `{want}`") }),
        }
    };
    let triple = |tokens: &mut std::str::SplitAsciiWhitespace<'_>, facet: usize| -> Result<[f32; 3], MeshError> {
        let mut out = [0f32; 3];
        for slot in &mut out {
            let tok = tokens
                .next()
                .ok_or_else(|| MeshError::Parse { facet, reason: "missing coordinate".into() })?;
            let v: f32 = tok
                .parse()
                .map_err(|_| MeshError::Parse { facet, reason: format!("bad number `{tok}`") })?;
            if !v.is_finite() {
                return Err(MeshError::Parse { facet, reason: format!("non-finite coordinate `{tok}`") });
            }
            *slot = v;
        }
        Ok(out)
    };

    loop {
        let facet = facets.len();
        match tokens.next() {
            Some("facet") => {}
            Some("endsolid") | None => break,
            Some(other) => {
                return Err(MeshError::Parse { facet, reason: format!("expected `facet`, found `{other}`") })
            }
        }
        expect(tokens.next(), "normal", facet)?;
        let normal = triple(&mut tokens, facet)?;
        expect(tokens.next(), "outer", facet)?;
        expect(tokens.next(), "loop", facet)?;
        let mut vertices = [[0f32; 3]; 3];
        for v in &mut vertices {
            expect(tokens.next(), "vertex", facet)?;
            *v = triple(&mut tokens, facet)?;
        }
        expect(tokens.next(), "endloop", facet)?;
        expect(tokens.next(), "endfacet", facet)?;
        facets.push(Facet { normal, vertices });
    }
    Ok(TriangleMesh::from_facets(name, &facets))
}

pub fn load_stl(path: impl AsRef<Path>) -> Result<TriangleMesh, MeshError> {
    load_stl_with(path, LoadOptions::default())
}

pub fn load_stl_with(path: impl AsRef<Path>, opts: LoadOptions) -> Result<TriangleMesh, MeshError> {
    parse_stl(&std::fs::read(path)?, opts)
}

pub fn save_stl(mesh: &TriangleMesh, path: impl AsRef<Path>, format: StlFormat) -> Result<(), MeshError> {
    let bytes = match format {
        StlFormat::Binary => mesh.to_binary_stl(),
        StlFormat::Ascii => mesh.to_ascii_stl().into_bytes(),
    };
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Accumulates triangles in f64, storing them as welded f32 vertices with
/// right-hand-rule normals. Degenerate triangles (after rounding) are dropped.
#[derive(Default)]
pub struct MeshBuilder {
    welder: Welder,
    triangles: Vec<[u32; 3]>,
    normals: Vec<[f32; 3]>,
}

impl MeshBuilder {
    pub fn triangle(&mut self, a: Point3<f64>, b: Point3<f64>, c: Point3<f64>) {
        let f = |p: Point3<f64>| [p.x as f32, p.y as f32, p.z as f32];
        let (fa, fb, fc) = (f(a), f(b), f(c));
        let (pa, pb, pc) = (to_point(fa), to_point(fb), to_point(fc));
        let cross = (pb - pa).cross(&(pc - pa));
        if !(cross.norm() / 2.0 > MIN_TRIANGLE_AREA) {
            return;
        }
        let n = cross.normalize();
        let tri = [self.welder.index(fa), self.welder.index(fb), self.welder.index(fc)];
        self.triangles.push(tri);
        self.normals.push([n.x as f32, n.y as f32, n.z as f32]);
    }

    pub fn quad(&mut self, a: Point3<f64>, b: Point3<f64>, c: Point3<f64>, d: Point3<f64>) {
        self.triangle(a, b, c);
        self.triangle(a, c, d);
    }

    pub fn build(self, name: impl Into<String>) -> TriangleMesh {
        TriangleMesh {
            name: name.into(),
            vertices: self.welder.vertices,
            triangles: self.triangles,
            normals: self.normals,
        }
    }
}

/// A needle guide hole on the template face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateHole {
    pub id: String,
    pub position: Point3<f64>,
    pub direction: Vector3<f64>,
}

/// Perineal template: a plate whose patient-facing side lies in z = 0 with a
/// regular grid of holes; needles advance along +z.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateModel {
    pub name: String,
    pub mesh: TriangleMesh,
    pub holes: Vec<TemplateHole>,
    pub face_normal: Vector3<f64>,
    pub plate_thickness: f64,
    pub pitch: f64,
}

impl TemplateModel {
    pub fn hole(&self, id: &str) -> Option<&TemplateHole> {
        self.holes.iter().find(|h| h.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Center-to-center hole distance (mm).
    pub pitch: f64,
    /// Plate border beyond the hole grid cells (mm).
    pub margin: f64,
    pub thickness: f64,
    pub hole_radius: f64,
    /// Polygon sides approximating each hole.
    pub segments: usize,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        TemplateSpec {
            name: "template-6x6".into(),
            rows: 6,
            cols: 6,
            pitch: 10.0,
            margin: 10.0,
            thickness: 15.0,
            hole_radius: 1.0,
            segments: 16,
        }
    }
}

/// Spreadsheet-style row letters: A..Z, AA, AB, ...
pub fn row_label(mut row: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (row % 26) as u8);
        if row < 26 {
            break;
        }
        row = row / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).unwrap()
}

pub fn make_template(spec: &TemplateSpec) -> Result<TemplateModel, MeshError> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(MeshError::InvalidSpec("rows and cols must be at least 1".into()));
    }
    if !(spec.pitch > 0.0 && spec.thickness > 0.0 && spec.margin >= 0.0) {
        return Err(MeshError::InvalidSpec("pitch and thickness must be positive, margin non-negative".into()));
    }
    if !(spec.hole_radius > 0.0 && spec.hole_radius < spec.pitch / 2.0) {
        return Err(MeshError::InvalidSpec("hole radius must lie in (0, pitch/2)".into()));
    }
    if spec.segments < 3 {
        return Err(MeshError::InvalidSpec("holes need at least 3 segments".into()));
    }

    let half_rows = (spec.rows as f64 - 1.0) / 2.0;
    let half_cols = (spec.cols as f64 - 1.0) / 2.0;
    let mut holes = Vec::with_capacity(spec.rows * spec.cols);
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            holes.push(TemplateHole {
                id: format!("{}{}", row_label(r), c + 1),
                position: Point3::new(
                    (c as f64 - half_cols) * spec.pitch,
                    (half_rows - r as f64) * spec.pitch,
                    0.0,
                ),
                direction: Vector3::z(),
            });
        }
    }

    let t = spec.thickness;
    let h = spec.pitch / 2.0;
    let grid_w = spec.cols as f64 * h;
    let grid_h = spec.rows as f64 * h;
    let plate_w = grid_w + spec.margin;
    let plate_h = grid_h + spec.margin;
    let mut b = MeshBuilder::default();

    let at = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
    let face = |b: &mut MeshBuilder, p: [Point3<f64>; 3]| {
        // front (z = 0, normal +z) and mirrored back (z = -t, normal -z)
        b.triangle(p[0], p[1], p[2]);
        let back = p.map(|q| at(q.x, q.y, -t));
        b.triangle(back[0], back[2], back[1]);
    };

    let n = spec.segments;
    let corners = [PI / 4.0, 3.0 * PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0];
    for hole in &holes {
        let (cx, cy) = (hole.position.x, hole.position.y);
        let ring = |k: usize| {
            let th = 2.0 * PI * (k % n) as f64 / n as f64;
            at(cx + spec.hole_radius * th.cos(), cy + spec.hole_radius * th.sin(), 0.0)
        };
        let boundary = |th: f64| {
            let (s, c) = th.sin_cos();
            let scale = h / c.abs().max(s.abs());
            at(cx + scale * c, cy + scale * s, 0.0)
        };
        for k in 0..n {
            let th0 = 2.0 * PI * k as f64 / n as f64;
            let th1 = 2.0 * PI * (k + 1) as f64 / n as f64;
            let mut outline = vec![boundary(th0)];
            for &cor in &corners {
                if cor > th0 + 1e-12 && cor < th1 - 1e-12 {
                    outline.push(boundary(cor));
                }
            }
            outline.push(boundary(th1));
            outline.push(ring(k + 1));
            let pivot = ring(k);
            for w in outline.windows(2) {
                face(&mut b, [pivot, w[0], w[1]]);
            }
            // hole wall, facing the hole axis
            let (r0, r1) = (ring(k), ring(k + 1));
            b.quad(r0, at(r0.x, r0.y, -t), at(r1.x, r1.y, -t), r1);
        }
    }

    if spec.margin > 0.0 {
        let band = |b: &mut MeshBuilder, x0: f64, y0: f64, x1: f64, y1: f64| {
            face(b, [at(x0, y0, 0.0), at(x1, y0, 0.0), at(x1, y1, 0.0)]);
            face(b, [at(x0, y0, 0.0), at(x1, y1, 0.0), at(x0, y1, 0.0)]);
        };
        band(&mut b, -plate_w, -plate_h, plate_w, -grid_h);
        band(&mut b, -plate_w, grid_h, plate_w, plate_h);
        band(&mut b, -plate_w, -grid_h, -grid_w, grid_h);
        band(&mut b, grid_w, -grid_h, plate_w, grid_h);
    }

    // outer side walls
    let outline = [
        at(-plate_w, -plate_h, 0.0),
        at(plate_w, -plate_h, 0.0),
        at(plate_w, plate_h, 0.0),
        at(-plate_w, plate_h, 0.0),
    ];
    for k in 0..4 {
        let (p, q) = (outline[k], outline[(k + 1) % 4]);
        b.quad(p, at(p.x, p.y, -t), at(q.x, q.y, -t), q);
    }

    Ok(TemplateModel {
        name: spec.name.clone(),
        mesh: b.build(spec.name.clone()),
        holes,
        face_normal: Vector3::z(),
        plate_thickness: t,
        pitch: spec.pitch,
    })
}

/// Vaginal obturator: a capped cylinder.
#[derive(Debug, Clone, PartialEq)]
pub struct ObturatorModel {
    pub mesh: TriangleMesh,
    pub axis_origin: Point3<f64>,
    pub axis_direction: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObturatorSpec {
    pub name: String,
    pub radius: f64,
    pub length: f64,
    pub segments: usize,
    pub axis_origin: [f64; 3],
    pub axis_direction: [f64; 3],
}

impl Default for ObturatorSpec {
    fn default() -> Self {
        ObturatorSpec {
            name: "obturator".into(),
            radius: 10.0,
            length: 120.0,
            segments: 32,
            axis_origin: [0.0, 0.0, 0.0],
            axis_direction: [0.0, 0.0, 1.0],
        }
    }
}

fn orthonormal_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let seed = if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = (seed - axis * seed.dot(axis)).normalize();
    (u, axis.cross(&u))
}

pub fn make_obturator(spec: &ObturatorSpec) -> Result<ObturatorModel, MeshError> {
    let axis = Vector3::from(spec.axis_direction)
        .try_normalize(1e-12)
        .ok_or_else(|| MeshError::InvalidSpec("axis direction must be non-zero".into()))?;
    if !(spec.radius > 0.0 && spec.length > 0.0) || spec.segments < 3 {
        return Err(MeshError::InvalidSpec("radius and length must be positive, segments ≥ 3".into()));
    }
    let origin = Point3::from(spec.axis_origin);
    let (u, v) = orthonormal_frame(&axis);
    let n = spec.segments;
    let rim = |k: usize, along: f64| {
        let th = 2.0 * PI * (k % n) as f64 / n as f64;
        origin + axis * along + (u * th.cos() + v * th.sin()) * spec.radius
    };
    let tip = origin + axis * spec.length;
    let mut b = MeshBuilder::default();
    for k in 0..n {
        b.quad(rim(k, 0.0), rim(k + 1, 0.0), rim(k + 1, spec.length), rim(k, spec.length));
        b.triangle(origin, rim(k + 1, 0.0), rim(k, 0.0));
        b.triangle(tip, rim(k, spec.length), rim(k + 1, spec.length));
    }
    Ok(ObturatorModel { mesh: b.build(spec.name.clone()), axis_origin: origin, axis_direction: axis, radius: spec.radius })
}

/// Tandem and ring applicator, display/registration geometry only: a ring
/// torus around the axis origin plus a straight tandem tube along the axis.
pub fn make_tandem_ring(ring_radius: f64, tube_radius: f64, tandem_length: f64, segments: usize) -> Result<TriangleMesh, MeshError> {
    if !(ring_radius > tube_radius && tube_radius > 0.0 && tandem_length > 0.0) || segments < 3 {
        return Err(MeshError::InvalidSpec("need ring_radius > tube_radius > 0, tandem_length > 0".into()));
    }
    let n = segments;
    let angle = |k: usize| 2.0 * PI * (k % n) as f64 / n as f64;
    let torus = |i: usize, j: usize| {
        let (a, b) = (angle(i), angle(j));
        let r = ring_radius + tube_radius * b.cos();
        Point3::new(r * a.cos(), r * a.sin(), tube_radius * b.sin())
    };
    let mut m = MeshBuilder::default();
    for i in 0..n {
        for j in 0..n {
            m.quad(torus(i, j), torus(i + 1, j), torus(i + 1, j + 1), torus(i, j + 1));
        }
    }
    let tube = |k: usize, z: f64| Point3::new(tube_radius * angle(k).cos(), tube_radius * angle(k).sin(), z);
    let top = Point3::new(0.0, 0.0, tandem_length);
    for k in 0..n {
        m.quad(tube(k, 0.0), tube(k + 1, 0.0), tube(k + 1, tandem_length), tube(k, tandem_length));
        m.triangle(top, tube(k, tandem_length), tube(k + 1, tandem_length));
    }
    Ok(m.build("tandem-ring"))
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<Vec<Point3<f64>>, MeshError> {
    if mesh.is_empty() {
        return Err(MeshError::Empty);
    }
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.random::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= pick).min(cumulative.len() - 1);
        let [a, b, c] = mesh.corners(t);
        let s = rng.random::<f64>().sqrt();
        let r = rng.random::<f64>();
        out.push(Point3::from(a.coords * (1.0 - s) + b.coords * (s * (1.0 - r)) + c.coords * (s * r)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tetrahedron() -> TriangleMesh {
        let p = |x, y, z| Point3::new(x, y, z);
        let (o, x, y, z) = (p(0.0, 0.0, 0.0), p(1.0, 0.0, 0.0), p(0.0, 1.0, 0.0), p(0.0, 0.0, 1.0));
        let mut b = MeshBuilder::default();
        b.triangle(o, y, x);
        b.triangle(o, x, z);
        b.triangle(o, z, y);
        b.triangle(x, y, z);
        b.build("tetra")
    }

    #[test]
    fn tetrahedron_binary_and_ascii_agree() {
        let mesh = tetrahedron();
        let bin = parse_stl(&mesh.to_binary_stl(), LoadOptions::default()).unwrap();
        let ascii = parse_stl(mesh.to_ascii_stl().as_bytes(), LoadOptions::default()).unwrap();
        assert_eq!(bin.triangles.len(), 4);
        assert_eq!(bin.vertices.len(), 4);
        assert_eq!(bin, mesh);
        assert_eq!(ascii, bin);
        assert!(bin.inconsistent_normals().is_empty());
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let bytes = tetrahedron().to_binary_stl();
        let again = parse_stl(&bytes, LoadOptions::default()).unwrap().to_binary_stl();
        assert_eq!(bytes, again);
    }

    #[test]
    fn declared_count_must_match() {
        let mut mesh = tetrahedron();
        let extra = mesh.triangles[0];
        for _ in 0..6 {
            mesh.triangles.push(extra);
            mesh.normals.push(mesh.normals[0]);
        }
        let mut bytes = mesh.to_binary_stl();
        assert_eq!(u32::from_le_bytes(bytes[80..84].try_into().unwrap()), 10);
        bytes.truncate(bytes.len() - FACET_LEN);
        let err = parse_stl(&bytes, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, MeshError::CountMismatch { declared: 10, found: 9 }), "{err}");
        assert!(matches!(parse_stl(&[0u8; 20], LoadOptions::default()), Err(MeshError::Truncated { .. })));
    }

    #[test]
    fn empty_mesh_writes_valid_file() {
        let empty = TriangleMesh { name: "none".into(), ..Default::default() };
        let bytes = empty.to_binary_stl();
        assert_eq!(bytes.len(), 84);
        assert_eq!(parse_stl(&bytes, LoadOptions::default()).unwrap(), empty);
        assert_eq!(parse_stl(empty.to_ascii_stl().as_bytes(), LoadOptions::default()).unwrap(), empty);
    }

    #[test]
    fn non_finite_coordinates_name_the_facet() {
        let text = "solid x\nfacet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\n\
                    facet normal 0 0 1\nouter loop\nvertex 0 0 0\nvertex nan 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid x\n";
        match parse_stl(text.as_bytes(), LoadOptions::default()).unwrap_err() {
            MeshError::Parse { facet, .. } => assert_eq!(facet, 1),
            other => panic!("unexpected {other}"),
        }
        let mut bytes = tetrahedron().to_binary_stl();
        let at = 84 + 2 * FACET_LEN + 12;
        bytes[at..at + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(parse_stl(&bytes, LoadOptions::default()), Err(MeshError::Parse { facet: 2, .. })));
    }

    #[test]
    fn degenerate_triangles_need_permissive_mode() {
        let text = "solid d\nfacet normal 0 0 0\nouter loop\nvertex 0 0 0\nvertex 1 0 0\nvertex 2 0 0\nendloop\nendfacet\nendsolid d\n";
        assert!(matches!(parse_stl(text.as_bytes(), LoadOptions::default()), Err(MeshError::Degenerate { .. })));
        let mesh = parse_stl(text.as_bytes(), LoadOptions { permissive: true }).unwrap();
        assert_eq!(mesh.triangles.len(), 1);
    }

    #[test]
    fn flags_disagreeing_normals() {
        let mut mesh = tetrahedron();
        mesh.normals[1] = [0.0, 0.0, 0.0];
        assert_eq!(mesh.inconsistent_normals(), vec![1]);
    }

    #[test]
    fn single_hole_template_is_centered() {
        let t = make_template(&TemplateSpec { rows: 1, cols: 1, ..Default::default() }).unwrap();
        assert_eq!(t.holes.len(), 1);
        assert_eq!(t.holes[0].id, "A1");
        assert_eq!(t.holes[0].position, Point3::origin());
    }

    #[test]
    fn six_by_six_grid_arithmetic() {
        let t = make_template(&TemplateSpec::default()).unwrap();
        assert_eq!(t.holes.len(), 36);
        let a1 = t.hole("A1").unwrap().position;
        let a6 = t.hole("A6").unwrap().position;
        assert_eq!((a6 - a1).norm(), 50.0);
        for h in &t.holes {
            let nearest = t
                .holes
                .iter()
                .filter(|o| o.id != h.id)
                .map(|o| (o.position - h.position).norm())
                .fold(f64::INFINITY, f64::min);
            assert_eq!(nearest, t.pitch);
            assert_eq!(h.direction, t.face_normal);
        }
        assert!(t.mesh.validate(LoadOptions::default()).is_ok());
    }

    #[test]
    fn two_by_three_labels() {
        let t = make_template(&TemplateSpec { rows: 2, cols: 3, ..Default::default() }).unwrap();
        let ids: Vec<_> = t.holes.iter().map(|h| h.id.as_str()).collect();
        assert_eq!(ids, ["A1", "A2", "A3", "B1", "B2", "B3"]);
        assert!(t.holes.iter().all(|h| h.position.z.abs() <= 1e-3));
    }

    #[test]
    fn row_labels_extend_past_z() {
        assert_eq!(row_label(0), "A");
        assert_eq!(row_label(25), "Z");
        assert_eq!(row_label(26), "AA");
        assert_eq!(row_label(27), "AB");
    }

    #[test]
    fn template_face_area_matches_plate_minus_holes() {
        let spec = TemplateSpec::default();
        let t = make_template(&spec).unwrap();
        let front: f64 = (0..t.mesh.triangles.len())
            .filter(|&i| t.mesh.computed_normal(i).z > 0.999)
            .map(|i| t.mesh.triangle_area(i))
            .sum();
        let w = spec.cols as f64 * spec.pitch + 2.0 * spec.margin;
        let h = spec.rows as f64 * spec.pitch + 2.0 * spec.margin;
        let n = spec.segments as f64;
        let polygon = 0.5 * n * spec.hole_radius.powi(2) * (2.0 * PI / n).sin();
        let expected = w * h - 36.0 * polygon;
        assert!((front - expected).abs() < 1e-3, "{front} vs {expected}");
    }

    #[test]
    fn sampled_points_lie_in_their_triangle() {
        let mut b = MeshBuilder::default();
        b.triangle(Point3::new(0.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0), Point3::new(0.0, 3.0, 0.0));
        let mesh = b.build("one");
        let pts = sample_surface(&mesh, 100, 7).unwrap();
        assert_eq!(pts.len(), 100);
        for p in pts {
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.x / 4.0 + p.y / 3.0 <= 1.0 + 1e-12 && p.z == 0.0);
        }
        assert_eq!(sample_surface(&mesh, 50, 3).unwrap(), sample_surface(&mesh, 50, 3).unwrap());
        assert!(matches!(sample_surface(&TriangleMesh::default(), 1, 0), Err(MeshError::Empty)));
    }

    #[test]
    fn obturator_and_ring_are_valid() {
        let o = make_obturator(&ObturatorSpec::default()).unwrap();
        assert!(o.mesh.validate(LoadOptions::default()).is_ok());
        assert!(o.mesh.inconsistent_normals().is_empty());
        let n = 32.0;
        let side = n * 2.0 * 10.0 * (PI / n).sin() * 120.0;
        let caps = 2.0 * 0.5 * n * 100.0 * (2.0 * PI / n).sin();
        assert!((o.mesh.surface_area() - side - caps).abs() / side < 1e-4);
        let ring = make_tandem_ring(20.0, 3.0, 60.0, 24).unwrap();
        assert!(ring.validate(LoadOptions::default()).is_ok());
    }
}
