//! Meshes, point clouds, rigid poses and the pinhole camera.
//!
//! Frames are right-handed. Model frames use +z up. Camera frames follow the
//! vision convention: +x right, +y down, +z along the optical axis, so that a
//! point in front of the camera has positive depth.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Orthonormality tolerance for rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Bounding-box diagonal above which a mesh is assumed to be in millimetres.
const MM_SCALE_DIAGONAL: f64 = 50.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (max deviation {deviation:.3e})")]
    InvalidPose { deviation: f64 },
    #[error("{path}:{line}: {message}")]
    MalformedFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error("mesh has no geometry")]
    EmptyMesh,
    #[error("triangle {triangle} references vertex {index} but mesh has {count} vertices")]
    IndexOutOfRange {
        triangle: usize,
        index: u32,
        count: usize,
    },
    #[error("every triangle of the mesh has zero area")]
    DegenerateMesh,
    #[error("unsupported mesh format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A rotation plus translation, `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation from intrinsic roll-pitch-yaw angles: `R = Rx(roll) · Ry(pitch) · Rz(yaw)`.
///
/// This is the only Euler convention used in the crate.
pub fn euler_to_matrix(angles: [f64; 3]) -> Matrix3<f64> {
    rot_x(angles[0]) * rot_y(angles[1]) * rot_z(angles[2])
}

/// Inverse of [`euler_to_matrix`]. At gimbal lock (|pitch| = π/2) yaw is set to 0.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> [f64; 3] {
    let sp = r[(0, 2)].clamp(-1.0, 1.0);
    let pitch = sp.asin();
    if sp.abs() < 1.0 - 1e-12 {
        let yaw = (-r[(0, 1)]).atan2(r[(0, 0)]);
        let roll = (-r[(1, 2)]).atan2(r[(2, 2)]);
        [roll, pitch, yaw]
    } else {
        let roll = r[(2, 1)].atan2(r[(1, 1)]);
        [roll, pitch, 0.0]
    }
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        let worst = deviation.max((det - 1.0).abs());
        if !worst.is_finite() || worst > ROTATION_TOLERANCE || !translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidPose { deviation: worst });
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_euler(angles: [f64; 3], translation: Vec3) -> Self {
        Self {
            rotation: euler_to_matrix(angles),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn euler(&self) -> [f64; 3] {
        matrix_to_euler(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ inner`: apply `inner` first, then `self`.
    pub fn compose(&self, inner: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        for (t, tri) in triangles.iter().enumerate() {
            for &index in tri {
                if index as usize >= vertices.len() {
                    return Err(GeometryError::IndexOutOfRange {
                        triangle: t,
                        index,
                        count: vertices.len(),
                    });
                }
            }
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn transformed(&self, pose: &RigidPose) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|p| pose.transform_point(p)).collect(),
            triangles: self.triangles.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|p| p * factor).collect(),
            triangles: self.triangles.clone(),
        }
    }

    /// Concatenates two meshes, re-indexing the second.
    pub fn merge(&mut self, other: &Mesh) {
        let offset = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + offset, t[1] + offset, t[2] + offset]));
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }

    /// The vertex set as a cloud. Its diameter equals the surface diameter.
    pub fn vertex_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.vertices.clone(),
        }
    }

    pub fn to_off(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "OFF");
        let _ = writeln!(out, "{} {} 0", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(out, "3 {} {} {}", t[0], t[1], t[2]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: &Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p + t).collect(),
        }
    }
}

/// Pinhole intrinsics. Pixel `(i, j)` is centred on the integer coordinate `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// Kinect-like 640×480 sensor.
    fn default() -> Self {
        Self {
            fx: 575.0,
            fy: 575.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("zero-area framebuffer".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidCamera(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    /// Camera-space point to `(u, v, z)`. Meaningful only for `z > 0`.
    pub fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        )
    }

    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Whether a projected coordinate falls on a pixel of the image.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Reads an OFF or OBJ mesh, chosen by file extension.
pub fn load_mesh(path: &Path) -> Result<Mesh, GeometryError> {
    load_mesh_scaled(path, 1.0)
}

/// Reads a mesh and multiplies every coordinate by `scale`.
pub fn load_mesh_scaled(path: &Path, scale: f64) -> Result<Mesh, GeometryError> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let mesh = match ext.as_str() {
        "off" => parse_off(&text, &name)?,
        "obj" => parse_obj(&text, &name)?,
        other => return Err(GeometryError::UnsupportedFormat(other.to_string())),
    };
    let mesh = if scale != 1.0 { mesh.scaled(scale) } else { mesh };
    if let Some((lo, hi)) = mesh.bounding_box() {
        let diagonal = (hi - lo).norm();
        if diagonal > MM_SCALE_DIAGONAL {
            log::warn!(
                "{name}: bounding-box diagonal {diagonal:.1} looks like millimetres; set a rescale factor"
            );
        }
    }
    Ok(mesh)
}

fn malformed(path: &str, line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::MalformedFile {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn fan(poly: &[u32], out: &mut Vec<[u32; 3]>) {
    for i in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[i], poly[i + 1]]);
    }
}

fn check_mesh(
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
    face_lines: &[usize],
    path: &str,
) -> Result<Mesh, GeometryError> {
    if vertices.is_empty() || triangles.is_empty() {
        return Err(GeometryError::EmptyMesh);
    }
    Mesh::new(vertices, triangles).map_err(|e| match e {
        GeometryError::IndexOutOfRange { triangle, index, count } => malformed(
            path,
            face_lines[triangle],
            format!("vertex index {index} out of range ({count} vertices)"),
        ),
        other => other,
    })
}

/// Parses Object File Format text. Comments (`#`) and blank lines are skipped;
/// the `OFF` keyword may share a line with the counts (ModelNet quirk).
pub fn parse_off(text: &str, path: &str) -> Result<Mesh, GeometryError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (first_no, first) = lines.next().ok_or(GeometryError::EmptyMesh)?;
    let counts_line = if let Some(rest) = first.strip_prefix("OFF") {
        if rest.trim().is_empty() {
            lines.next().ok_or_else(|| malformed(path, first_no, "missing counts"))?
        } else {
            (first_no, rest.trim())
        }
    } else {
        return Err(malformed(path, first_no, "missing OFF header"));
    };
    let counts: Vec<usize> = counts_line
        .1
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| malformed(path, counts_line.0, format!("bad counts: {e}")))?;
    if counts.len() < 2 {
        return Err(malformed(path, counts_line.0, "expected vertex and face counts"));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, line) = lines
            .next()
            .ok_or_else(|| malformed(path, counts_line.0, "file ends inside vertex list"))?;
        let xyz: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(path, no, format!("bad vertex: {e}")))?;
        if xyz.len() != 3 || !xyz.iter().all(|v| v.is_finite()) {
            return Err(malformed(path, no, "vertex needs three finite coordinates"));
        }
        vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
    }

    let mut triangles = Vec::with_capacity(nf);
    let mut face_lines = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (no, line) = lines
            .next()
            .ok_or_else(|| malformed(path, counts_line.0, "file ends inside face list"))?;
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(path, no, format!("bad face: {e}")))?;
        let n = *ids.first().ok_or_else(|| malformed(path, no, "empty face"))? as usize;
        if n < 3 || ids.len() < n + 1 {
            return Err(malformed(path, no, "face needs at least three indices"));
        }
        let before = triangles.len();
        fan(&ids[1..=n], &mut triangles);
        face_lines.extend(std::iter::repeat(no).take(triangles.len() - before));
    }
    check_mesh(vertices, triangles, &face_lines, path)
}

/// Parses the geometric subset of Wavefront OBJ (`v` and `f` records).
pub fn parse_obj(text: &str, path: &str) -> Result<Mesh, GeometryError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut face_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let xyz: Vec<f64> = tokens
                    .take(3)
                    .map(str::parse)
                    .collect::<Result<_, _>>()
                    .map_err(|e| malformed(path, no, format!("bad vertex: {e}")))?;
                if xyz.len() != 3 {
                    return Err(malformed(path, no, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let mut poly = Vec::new();
                for tok in tokens {
                    let idx: i64 = tok
                        .split('/')
                        .next()
                        .unwrap_or("")
                        .parse()
                        .map_err(|e| malformed(path, no, format!("bad face index: {e}")))?;
                    let resolved = if idx < 0 { vertices.len() as i64 + idx } else { idx - 1 };
                    if resolved < 0 {
                        return Err(malformed(path, no, format!("face index {idx} out of range")));
                    }
                    poly.push(resolved as u32);
                }
                if poly.len() < 3 {
                    return Err(malformed(path, no, "face needs at least three indices"));
                }
                let before = triangles.len();
                fan(&poly, &mut triangles);
                face_lines.extend(std::iter::repeat(no).take(triangles.len() - before));
            }
            _ => {}
        }
    }
    check_mesh(vertices, triangles, &face_lines, path)
}

fn triangle_area(t: &[Vec3; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

/// Area-weighted centroid of the mesh surface.
pub fn center_of_mass(mesh: &Mesh) -> Result<Vec3, GeometryError> {
    let mut total = 0.0;
    let mut acc = Vec3::zeros();
    for i in 0..mesh.triangles.len() {
        let t = mesh.triangle(i);
        let area = triangle_area(&t);
        acc += (t[0] + t[1] + t[2]) * (area / 3.0);
        total += area;
    }
    if total <= 0.0 {
        return Err(GeometryError::DegenerateMesh);
    }
    Ok(acc / total)
}

/// Maximum pairwise distance. Zero for a single point.
pub fn model_diameter(cloud: &PointCloud) -> f64 {
    let pts = &cloud.points;
    let mut best = 0.0f64;
    for (i, p) in pts.iter().enumerate() {
        for q in &pts[i + 1..] {
            best = best.max((p - q).norm_squared());
        }
    }
    best.sqrt()
}

pub fn apply_pose(pose: &RigidPose, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
    }
}

/// Uniform random samples over the mesh surface.
pub fn sample_surface(mesh: &Mesh, count: usize, seed: u64) -> Result<PointCloud, GeometryError> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for i in 0..mesh.triangles.len() {
        total += triangle_area(&mesh.triangle(i));
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(GeometryError::DegenerateMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..count)
        .map(|_| {
            let pick = rng.gen::<f64>() * total;
            let idx = cumulative.partition_point(|&c| c <= pick).min(cumulative.len() - 1);
            let [a, b, c] = mesh.triangle(idx);
            let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            a + (b - a) * r1 + (c - a) * r2
        })
        .collect();
    Ok(PointCloud { points })
}

/// Axis-aligned box as 8 vertices and 12 outward-wound triangles.
pub fn box_mesh(min: Vec3, max: Vec3) -> Mesh {
    let v = |x: f64, y: f64, z: f64| Vec3::new(x, y, z);
    let vertices = vec![
        v(min.x, min.y, min.z),
        v(max.x, min.y, min.z),
        v(max.x, max.y, min.z),
        v(min.x, max.y, min.z),
        v(min.x, min.y, max.z),
        v(max.x, min.y, max.z),
        v(max.x, max.y, max.z),
        v(min.x, max.y, max.z),
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    Mesh {
        vertices,
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    const CUBE_OFF: &str = "OFF\n8 12 0\n\
        -0.5 -0.5 -0.5\n0.5 -0.5 -0.5\n0.5 0.5 -0.5\n-0.5 0.5 -0.5\n\
        -0.5 -0.5 0.5\n0.5 -0.5 0.5\n0.5 0.5 0.5\n-0.5 0.5 0.5\n\
        3 0 2 1\n3 0 3 2\n3 4 5 6\n3 4 6 7\n3 0 1 5\n3 0 5 4\n\
        3 1 2 6\n3 1 6 5\n3 2 3 7\n3 2 7 6\n3 3 0 4\n3 3 4 7\n";

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        let angles = [
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-3.0..3.0),
        ];
        let t = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        RigidPose::from_euler(angles, t)
    }

    #[test]
    fn off_cube_parses() {
        let mesh = parse_off(CUBE_OFF, "cube.off").unwrap();
        assert_eq!(mesh.vertices().len(), 8);
        assert_eq!(mesh.triangles().len(), 12);
    }

    #[test]
    fn off_index_out_of_range_names_line() {
        let bad = CUBE_OFF.replace("3 3 4 7", "3 3 4 9");
        match parse_off(&bad, "bad.off") {
            Err(GeometryError::MalformedFile { line, .. }) => assert_eq!(line, 22),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn off_header_on_count_line() {
        let text = "OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        let mesh = parse_off(text, "m.off").unwrap();
        assert_eq!(mesh.triangles().len(), 1);
    }

    #[test]
    fn obj_quads_are_fanned() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1 2/2 3/3 4/4\n";
        let mesh = parse_obj(text, "q.obj").unwrap();
        assert_eq!(mesh.triangles(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn empty_mesh_rejected() {
        assert!(matches!(parse_obj("# nothing\n", "e.obj"), Err(GeometryError::EmptyMesh)));
        assert!(matches!(parse_off("OFF\n0 0 0\n", "e.off"), Err(GeometryError::EmptyMesh)));
    }

    #[test]
    fn cube_com_is_origin_and_translates() {
        let cube = parse_off(CUBE_OFF, "cube.off").unwrap();
        let com = center_of_mass(&cube).unwrap();
        assert!(com.norm() < 1e-12);
        let shifted = cube.transformed(&RigidPose::from_translation(Vec3::new(1.0, 2.0, 3.0)));
        let com = center_of_mass(&shifted).unwrap();
        assert!((com - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
    }

    #[test]
    fn degenerate_mesh_com_errors() {
        let mesh = Mesh::new(vec![Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(center_of_mass(&mesh), Err(GeometryError::DegenerateMesh)));
    }

    #[test]
    fn tetrahedron_com_matches_surface_sampling() {
        let verts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.3, 0.1, 0.0),
            Vec3::new(0.2, 0.7, 0.1),
            Vec3::new(0.4, 0.3, 0.9),
        ];
        let mesh = Mesh::new(verts, vec![[0, 1, 2], [0, 1, 3], [1, 2, 3], [0, 2, 3]]).unwrap();
        // Monte-Carlo oracle: area-proportional triangle choice, uniform barycentrics.
        let areas: Vec<f64> = (0..4).map(|i| triangle_area(&mesh.triangle(i))).collect();
        let total: f64 = areas.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mut acc = Vec3::zeros();
        for _ in 0..n {
            let mut pick = rng.gen::<f64>() * total;
            let mut idx = 0;
            while idx < 3 && pick >= areas[idx] {
                pick -= areas[idx];
                idx += 1;
            }
            let [a, b, c] = mesh.triangle(idx);
            let (s, t): (f64, f64) = (rng.gen(), rng.gen());
            let (s, t) = if s + t > 1.0 { (1.0 - s, 1.0 - t) } else { (s, t) };
            acc += a + (b - a) * s + (c - a) * t;
        }
        let mc = acc / n as f64;
        let com = center_of_mass(&mesh).unwrap();
        assert!((mc - com).norm() < 1e-3, "mc {mc:?} vs com {com:?}");
    }

    #[test]
    fn diameter_cases() {
        let cube = parse_off(CUBE_OFF, "cube.off").unwrap();
        assert!(close(model_diameter(&cube.vertex_cloud()), 3f64.sqrt(), 1e-15));
        assert_eq!(model_diameter(&PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)])), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let mut brute = 0.0f64;
        for a in &pts {
            for b in &pts {
                brute = brute.max((a - b).norm());
            }
        }
        assert_eq!(model_diameter(&PointCloud::new(pts)), brute);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let skew = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(skew, Vec3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidPose::new(reflect, Vec3::zeros()).is_err());
        assert!(RigidPose::new(euler_to_matrix([0.3, 0.2, 0.1]), Vec3::zeros()).is_ok());
    }

    #[test]
    fn identity_and_translation() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.0, 3.0, 1.0)]);
        assert_eq!(apply_pose(&RigidPose::identity(), &cloud), cloud);
        let t = Vec3::new(0.25, -1.0, 2.0);
        let moved = apply_pose(&RigidPose::from_translation(t), &cloud);
        for (p, q) in cloud.points.iter().zip(&moved.points) {
            assert_eq!(q, &(p + t));
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let cloud = PointCloud::new(
                (0..20)
                    .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
            );
            let seq = apply_pose(&b, &apply_pose(&a, &cloud));
            let once = apply_pose(&b.compose(&a), &cloud);
            for (p, q) in seq.points.iter().zip(&once.points) {
                assert!((p - q).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_round_trip() {
        let angles = [0.4, -0.7, 2.9];
        let back = matrix_to_euler(&euler_to_matrix(angles));
        for (a, b) in angles.iter().zip(back) {
            assert!(close(*a, b, 1e-12));
        }
    }

    #[test]
    fn camera_validation() {
        assert!(CameraIntrinsics::new(575.0, 575.0, 320.0, 240.0, 640, 480).is_ok());
        assert!(CameraIntrinsics::new(575.0, 575.0, 320.0, 240.0, 0, 480).is_err());
        assert!(CameraIntrinsics::new(-1.0, 575.0, 320.0, 240.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(575.0, 575.0, 640.0, 240.0, 640, 480).is_err());
        let cam = CameraIntrinsics::default();
        let p = Vec3::new(0.3, -0.2, 2.5);
        let (u, v, z) = cam.project(&p);
        assert!((cam.back_project(u, v, z) - p).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn diameter_invariant_under_pose(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = PointCloud::new((0..30).map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen())).collect());
            let pose = random_pose(&mut rng);
            let d0 = model_diameter(&cloud);
            let d1 = model_diameter(&apply_pose(&pose, &cloud));
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn com_is_equivariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mesh = box_mesh(Vec3::new(-0.3, -0.1, 0.0), Vec3::new(0.5, 0.4, rng.gen_range(0.1..1.0)));
            let pose = random_pose(&mut rng);
            let lhs = center_of_mass(&mesh.transformed(&pose)).unwrap();
            let rhs = pose.transform_point(&center_of_mass(&mesh).unwrap());
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }
    }
}
