//! Foreground-only depth rendering of posed meshes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Mesh, RigidPose, Vec3};

pub const DEPTH_MAGIC: &[u8; 4] = b"ISAD";

/// Marker for pixels not covered by any surface.
pub const BACKGROUND: f32 = f32::INFINITY;

/// Triangles are clipped against this camera-space depth.
const NEAR_PLANE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("depth file has bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("depth file truncated")]
    Truncated,
    #[error("depth image {width}x{height} does not match {expected} pixels")]
    SizeMismatch {
        width: u32,
        height: u32,
        expected: usize,
    },
    #[error("unsupported depth PNG: {0}")]
    Png(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major metric depth raster. Background pixels hold [`BACKGROUND`].
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    pixels: Vec<f32>,
}

impl DepthImage {
    pub fn background(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![BACKGROUND; width as usize * height as usize],
        }
    }

    /// Non-positive or non-finite entries are stored as background.
    pub fn from_pixels(width: u32, height: u32, mut pixels: Vec<f32>) -> Result<Self, RenderError> {
        let expected = width as usize * height as usize;
        if pixels.len() != expected {
            return Err(RenderError::SizeMismatch {
                width,
                height,
                expected: pixels.len(),
            });
        }
        for p in &mut pixels {
            if !(p.is_finite() && *p > 0.0) {
                *p = BACKGROUND;
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Depth at integer pixel, `None` outside the image.
    pub fn get(&self, u: i64, v: i64) -> Option<f32> {
        if u < 0 || v < 0 || u >= self.width as i64 || v >= self.height as i64 {
            return None;
        }
        Some(self.pixels[v as usize * self.width as usize + u as usize])
    }

    pub fn is_foreground(&self, u: i64, v: i64) -> bool {
        self.get(u, v).is_some_and(|d| d.is_finite())
    }

    pub fn foreground_count(&self) -> usize {
        self.pixels.iter().filter(|d| d.is_finite()).count()
    }

    /// Pixel-wise nearest-surface composite of two images of equal size.
    pub fn composite(&self, other: &DepthImage) -> Option<DepthImage> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        Some(DepthImage {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().zip(&other.pixels).map(|(a, b)| a.min(*b)).collect(),
        })
    }

    /// Shifts content by whole pixels; vacated pixels become background.
    pub fn shifted(&self, du: i64, dv: i64) -> DepthImage {
        let mut out = DepthImage::background(self.width, self.height);
        for v in 0..self.height as i64 {
            for u in 0..self.width as i64 {
                if let Some(d) = self.get(u - du, v - dv) {
                    out.pixels[v as usize * self.width as usize + u as usize] = d;
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len() * 4);
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, RenderError> {
        let mut header = [0u8; 16];
        bytes.read_exact(&mut header).map_err(|_| RenderError::Truncated)?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if &magic != DEPTH_MAGIC {
            return Err(RenderError::BadMagic(magic));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let n = width as usize * height as usize;
        if bytes.len() < n * 4 {
            return Err(RenderError::Truncated);
        }
        let pixels = bytes[..n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RenderError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Loads a raw `ISAD` file, or a 16-bit PNG in millimetres (0 = background).
    pub fn load(path: &Path) -> Result<Self, RenderError> {
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            return Self::load_png_mm(path);
        }
        Self::from_bytes(&fs::read(path)?)
    }

    fn load_png_mm(path: &Path) -> Result<Self, RenderError> {
        let img = image::open(path).map_err(|e| RenderError::Png(e.to_string()))?;
        let luma = match img {
            image::DynamicImage::ImageLuma16(l) => l,
            other => return Err(RenderError::Png(format!("expected 16-bit grayscale, got {:?}", other.color()))),
        };
        let (w, h) = luma.dimensions();
        let pixels = luma
            .pixels()
            .map(|p| if p.0[0] == 0 { BACKGROUND } else { p.0[0] as f32 / 1000.0 })
            .collect();
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn save_png_mm(&self, path: &Path) -> Result<(), RenderError> {
        let data: Vec<u16> = self
            .pixels
            .iter()
            .map(|d| if d.is_finite() { (d * 1000.0).round().clamp(1.0, 65535.0) as u16 } else { 0 })
            .collect();
        let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width, self.height, data)
            .expect("buffer size matches dimensions");
        buf.save(path).map_err(|e| RenderError::Png(e.to_string()))
    }
}

/// A camera placement: `pose` maps model coordinates into camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub pose: RigidPose,
    pub index: usize,
}

/// Camera-from-model pose for a camera at `eye` (model frame) looking at the
/// origin with zero roll relative to model +z.
pub fn look_at_origin(eye: Vec3) -> RigidPose {
    let forward = (-eye).normalize();
    let up = Vec3::z();
    let mut right = forward.cross(&up);
    if right.norm() < 1e-9 {
        // Looking straight along ±z: take model +y as the up reference.
        right = forward.cross(&Vec3::y());
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -(rotation * eye);
    RigidPose::new(rotation, translation).expect("look-at basis is orthonormal")
}

/// Fibonacci-spiral viewpoints at `radius` around the origin. With `hemisphere`
/// the cameras cover z > 0 only; the first camera sits on the +z pole.
pub fn sample_viewpoints(count: usize, radius: f64, hemisphere: bool) -> Vec<Viewpoint> {
    assert!(count >= 1 && radius > 0.0, "need count >= 1 and radius > 0");
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = if hemisphere {
                1.0 - i as f64 / count as f64
            } else if count == 1 {
                1.0
            } else {
                1.0 - 2.0 * i as f64 / (count - 1) as f64
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            let eye = Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius;
            Viewpoint {
                pose: look_at_origin(eye),
                index: i,
            }
        })
        .collect()
}

struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
}

fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// With interior on the positive side (y down), top edges run in +x and left edges run in -y.
fn is_top_left(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

fn clip_near(tri: [Vec3; 3]) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a.z >= NEAR_PLANE;
        let b_in = b.z >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

fn raster_triangle(v: [ScreenVertex; 3], cam: &CameraIntrinsics, buf: &mut [f32]) {
    let area = edge(&v[0], &v[1], v[2].x, v[2].y);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    // Orient so that the interior is on the positive side of every edge.
    let v = if area < 0.0 { [&v[0], &v[2], &v[1]] } else { [&v[0], &v[1], &v[2]] };
    let area = area.abs();

    let min_x = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_x = v
        .iter()
        .map(|p| p.x)
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(cam.width as f64 - 1.0);
    let min_y = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let max_y = v
        .iter()
        .map(|p| p.y)
        .fold(f64::NEG_INFINITY, f64::max)
        .floor()
        .min(cam.height as f64 - 1.0);
    if min_x > max_x || min_y > max_y {
        return;
    }
    let edges = [(1usize, 2usize), (2, 0), (0, 1)];
    let top_left: Vec<bool> = edges.iter().map(|&(a, b)| is_top_left(v[a], v[b])).collect();
    let width = cam.width as usize;
    for py in min_y as usize..=max_y as usize {
        for px in min_x as usize..=max_x as usize {
            let (fx, fy) = (px as f64, py as f64);
            let mut w = [0.0; 3];
            let mut inside = true;
            for (k, &(a, b)) in edges.iter().enumerate() {
                let e = edge(v[a], v[b], fx, fy);
                if e < 0.0 || (e == 0.0 && !top_left[k]) {
                    inside = false;
                    break;
                }
                w[k] = e;
            }
            if !inside {
                continue;
            }
            // Screen-space barycentrics interpolate 1/z linearly.
            let inv_z = (w[0] * v[0].inv_z + w[1] * v[1].inv_z + w[2] * v[2].inv_z) / area;
            if inv_z <= 0.0 {
                continue;
            }
            let depth = (1.0 / inv_z) as f32;
            let slot = &mut buf[py * width + px];
            if depth < *slot {
                *slot = depth;
            }
        }
    }
}

/// Z-buffer rasterization of `mesh` seen from `view`.
pub fn render_depth(mesh: &Mesh, view: &Viewpoint, cam: &CameraIntrinsics) -> DepthImage {
    let mut image = DepthImage::background(cam.width, cam.height);
    let camera_vertices: Vec<Vec3> = mesh.vertices().iter().map(|p| view.pose.transform_point(p)).collect();
    for tri in mesh.triangles() {
        let corners = [
            camera_vertices[tri[0] as usize],
            camera_vertices[tri[1] as usize],
            camera_vertices[tri[2] as usize],
        ];
        if corners.iter().all(|p| p.z < NEAR_PLANE) {
            continue;
        }
        let poly = clip_near(corners);
        let screen: Vec<ScreenVertex> = poly
            .iter()
            .map(|p| {
                let (x, y, z) = cam.project(p);
                ScreenVertex { x, y, inv_z: 1.0 / z }
            })
            .collect();
        for i in 1..screen.len().saturating_sub(1) {
            let s = |k: usize| ScreenVertex {
                x: screen[k].x,
                y: screen[k].y,
                inv_z: screen[k].inv_z,
            };
            raster_triangle([s(0), s(i), s(i + 1)], cam, &mut image.pixels);
        }
    }
    image
}
