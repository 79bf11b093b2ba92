//! Annotated part extraction and the persisted training set.
//!
//! Parts are square depth crops centred on a stride grid over foreground
//! pixels. Training parts additionally carry the centre offset to the
//! projected SSC, the view rotation, and the privileged skeleton features.
//!
//! # File layout (`ISAS`, little-endian)
//!
//! ```text
//! magic "ISAS" | u32 version
//! str category | u32 c_s | u32 k | u32 stride | f64 min_foreground
//! u32 s_n | u32 link_count | camera: f64 fx, fy, cx, cy, u32 width, height
//! u64 topology_digest | u32 n_labels, u32 ssc_labels[n_labels]
//! u64 n_views, per view:
//!     u32 instance | u32 view_index | f64 rotation[3]
//!     u32 n_angles, per angle: u32 link | f64 angle | u8 degenerate
//! per instance (c_s times): u64 n_parts, per part:
//!     u32 view_id | f64 c[3] | f64 offset[3]
//!     s_n rows of: u8 valid | f64 row[3]
//!     f32 patch[k*k] (row-major, +inf = background)
//! u64 checksum (first 8 bytes of SHA-256 over everything above)
//! ```
//! Strings are `u32 length` followed by UTF-8 bytes.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::codec::{checksum, CodecError, Reader, Writer};
use crate::config::PartConfig;
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::render::{DepthImage, Viewpoint, BACKGROUND};
use crate::skeleton::{
    link_angles, node_offsets, LinkAngle, LinkAngleVector, NodeOffsetMatrix, ProjectedSkeleton, SkeletonGraph,
};

pub const DATASET_MAGIC: &[u8; 4] = b"ISAS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset version error: {0}")]
    Version(String),
    #[error("dataset file truncated")]
    Truncated,
    #[error("dataset digest mismatch: {0}")]
    Digest(String),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CodecError> for DatasetError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated => DatasetError::Truncated,
            CodecError::Invalid(m) => DatasetError::Malformed(m),
        }
    }
}

/// Square depth crop; the part centre sits at `(size / 2, size / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    data: Vec<f32>,
}

impl Patch {
    pub fn new(size: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), size * size, "patch data must be size²");
        Self { size, data }
    }

    /// Crops `size × size` pixels centred on `(u, v)`; outside pixels are background.
    pub fn crop(depth: &DepthImage, u: i64, v: i64, size: usize) -> Self {
        let half = (size / 2) as i64;
        let mut data = Vec::with_capacity(size * size);
        for dy in 0..size as i64 {
            for dx in 0..size as i64 {
                data.push(depth.get(u - half + dx, v - half + dy).unwrap_or(BACKGROUND));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn center(&self) -> (i64, i64) {
        ((self.size / 2) as i64, (self.size / 2) as i64)
    }

    /// Depth at patch pixel `(x, y)`; `None` outside the patch.
    #[inline]
    pub fn get(&self, x: i64, y: i64) -> Option<f32> {
        if x < 0 || y < 0 || x >= self.size as i64 || y >= self.size as i64 {
            return None;
        }
        Some(self.data[y as usize * self.size + x as usize])
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.data.iter().filter(|d| d.is_finite()).count() as f64 / self.data.len() as f64
    }
}

/// Appearance-only part: centre `(u px, v px, z m)` and the depth patch.
/// This is all the inference path ever sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Part {
    pub center: [f64; 3],
    pub patch: Patch,
}

/// Training part: appearance plus pose targets and privileged skeleton features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedPart {
    pub part: Part,
    /// Projected SSC minus part centre, (px, px, m).
    pub offset: [f64; 3],
    /// View rotation as roll-pitch-yaw, radians.
    pub rotation: [f64; 3],
    /// Index into [`TrainingSet::views`].
    pub view: u32,
    pub link_angles: Arc<LinkAngleVector>,
    pub node_offsets: NodeOffsetMatrix,
}

/// Stride-grid part extraction shared by training and test time.
pub fn grid_parts(depth: &DepthImage, cfg: &PartConfig) -> Vec<Part> {
    let mut parts = Vec::new();
    let stride = cfg.stride.max(1);
    for v in (0..depth.height() as i64).step_by(stride) {
        for u in (0..depth.width() as i64).step_by(stride) {
            let Some(d) = depth.get(u, v).filter(|d| d.is_finite()) else {
                continue;
            };
            let patch = Patch::crop(depth, u, v, cfg.patch_size);
            if patch.foreground_fraction() < cfg.min_foreground {
                continue;
            }
            parts.push(Part {
                center: [u as f64, v as f64, d as f64],
                patch,
            });
        }
    }
    parts
}

/// Extracts annotated parts from one rendered training view.
///
/// `ssc_point` is the instance SSC in its model frame; `proj` must come from
/// the same view. The returned parts have `view = 0` until added to a set.
pub fn extract_training_parts(
    depth: &DepthImage,
    view: &Viewpoint,
    ssc_point: &Vec3,
    proj: &ProjectedSkeleton,
    cam: &CameraIntrinsics,
    cfg: &PartConfig,
) -> Vec<AnnotatedPart> {
    let parts = grid_parts(depth, cfg);
    if parts.is_empty() {
        log::warn!("view {} has no foreground parts", view.index);
        return Vec::new();
    }
    let ssc_cam = view.pose.transform_point(ssc_point);
    let (su, sv, sz) = cam.project(&ssc_cam);
    let rotation = view.pose.euler();
    let a = Arc::new(link_angles(proj));
    parts
        .into_iter()
        .map(|part| {
            let c = part.center;
            AnnotatedPart {
                offset: [su - c[0], sv - c[1], sz - c[2]],
                rotation,
                view: 0,
                link_angles: Arc::clone(&a),
                node_offsets: node_offsets(c, proj),
                part,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub instance: u32,
    pub view_index: u32,
    pub rotation: [f64; 3],
    pub link_angles: Arc<LinkAngleVector>,
}

/// Training set for one category: per-instance part lists plus shared view records.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub category: String,
    pub config: PartConfig,
    pub camera: CameraIntrinsics,
    /// Rows of every node-offset matrix (projected node count).
    pub node_count: usize,
    pub link_count: usize,
    pub topology_digest: u64,
    pub ssc_labels: Vec<u32>,
    pub views: Vec<ViewRecord>,
    pub instances: Vec<Vec<AnnotatedPart>>,
}

/// Digest of the parts of a skeleton that fix feature layout.
pub fn topology_digest(graph: &SkeletonGraph) -> u64 {
    #[derive(serde::Serialize)]
    struct Topology<'a> {
        nodes: usize,
        links: &'a [(u32, u32)],
        projected: Vec<u32>,
    }
    crate::codec::digest_of(&Topology {
        nodes: graph.node_count(),
        links: graph.links(),
        projected: graph.projected_labels(),
    })
}

impl TrainingSet {
    pub fn new(
        category: &str,
        instance_count: usize,
        config: PartConfig,
        camera: CameraIntrinsics,
        reference: &SkeletonGraph,
        ssc_labels: Vec<u32>,
    ) -> Self {
        let projected = reference.projected_labels();
        let link_count = reference
            .links()
            .iter()
            .filter(|(a, b)| projected.contains(a) && projected.contains(b))
            .count();
        Self {
            category: category.to_string(),
            config,
            camera,
            node_count: projected.len(),
            link_count,
            topology_digest: topology_digest(reference),
            ssc_labels,
            views: Vec::new(),
            instances: vec![Vec::new(); instance_count],
        }
    }

    /// Registers the parts of one view; assigns their view id.
    pub fn push_view(&mut self, instance: usize, view_index: u32, mut parts: Vec<AnnotatedPart>) {
        let Some(first) = parts.first() else {
            return;
        };
        let id = self.views.len() as u32;
        self.views.push(ViewRecord {
            instance: instance as u32,
            view_index,
            rotation: first.rotation,
            link_angles: Arc::clone(&first.link_angles),
        });
        for p in &mut parts {
            p.view = id;
        }
        self.instances[instance].extend(parts);
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn part_count(&self) -> usize {
        self.instances.iter().map(Vec::len).sum()
    }

    /// All parts in (instance, view, grid) order.
    pub fn parts(&self) -> impl Iterator<Item = &AnnotatedPart> {
        self.instances.iter().flatten()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        w.str(&self.category);
        w.u32(self.instances.len() as u32);
        w.u32(self.config.patch_size as u32);
        w.u32(self.config.stride as u32);
        w.f64(self.config.min_foreground);
        w.u32(self.node_count as u32);
        w.u32(self.link_count as u32);
        write_camera(&mut w, &self.camera);
        w.u64(self.topology_digest);
        w.u32(self.ssc_labels.len() as u32);
        for &l in &self.ssc_labels {
            w.u32(l);
        }
        w.u64(self.views.len() as u64);
        for view in &self.views {
            w.u32(view.instance);
            w.u32(view.view_index);
            for r in view.rotation {
                w.f64(r);
            }
            w.u32(view.link_angles.entries.len() as u32);
            for e in &view.link_angles.entries {
                w.u32(e.link as u32);
                w.f64(e.angle);
                w.u8(e.degenerate as u8);
            }
        }
        for parts in &self.instances {
            w.u64(parts.len() as u64);
            for p in parts {
                w.u32(p.view);
                for c in p.part.center {
                    w.f64(c);
                }
                for o in p.offset {
                    w.f64(o);
                }
                for (row, &valid) in p.node_offsets.rows.iter().zip(&p.node_offsets.valid) {
                    w.u8(valid as u8);
                    for x in row {
                        w.f64(*x);
                    }
                }
                for d in p.part.patch.data() {
                    w.f32(*d);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(DatasetError::Version(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(DatasetError::Version(format!(
                "file version {version}, expected {DATASET_VERSION}"
            )));
        }
        let category = r.str()?;
        let instance_count = r.u32()? as usize;
        let patch_size = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let min_foreground = r.f64()?;
        let node_count = r.u32()? as usize;
        let link_count = r.u32()? as usize;
        let camera = read_camera(&mut r)?;
        let topology_digest = r.u64()?;
        let n_labels = r.u32()? as usize;
        let ssc_labels = (0..n_labels).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;

        let n_views = r.count(24)?;
        let mut views = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            let instance = r.u32()?;
            let view_index = r.u32()?;
            let rotation = [r.f64()?, r.f64()?, r.f64()?];
            let n = r.u32()? as usize;
            let mut entries = Vec::with_capacity(n.min(r.remaining()));
            for _ in 0..n {
                entries.push(LinkAngle {
                    link: r.u32()? as usize,
                    angle: r.f64()?,
                    degenerate: r.u8()? != 0,
                });
            }
            views.push(ViewRecord {
                instance,
                view_index,
                rotation,
                link_angles: Arc::new(LinkAngleVector { entries }),
            });
        }

        let config = PartConfig {
            patch_size,
            stride,
            min_foreground,
        };
        let part_bytes = 4 + 48 + node_count * 25 + patch_size * patch_size * 4;
        let mut instances = Vec::with_capacity(instance_count);
        for _ in 0..instance_count {
            let n = r.count(part_bytes)?;
            let mut parts = Vec::with_capacity(n);
            for _ in 0..n {
                let view = r.u32()?;
                let record = views
                    .get(view as usize)
                    .ok_or_else(|| DatasetError::Malformed(format!("part references missing view {view}")))?;
                let center = [r.f64()?, r.f64()?, r.f64()?];
                let offset = [r.f64()?, r.f64()?, r.f64()?];
                let mut rows = Vec::with_capacity(node_count);
                let mut valid = Vec::with_capacity(node_count);
                for _ in 0..node_count {
                    valid.push(r.u8()? != 0);
                    rows.push([r.f64()?, r.f64()?, r.f64()?]);
                }
                let data = (0..patch_size * patch_size)
                    .map(|_| r.f32())
                    .collect::<Result<Vec<_>, _>>()?;
                parts.push(AnnotatedPart {
                    part: Part {
                        center,
                        patch: Patch::new(patch_size, data),
                    },
                    offset,
                    rotation: record.rotation,
                    view,
                    link_angles: Arc::clone(&record.link_angles),
                    node_offsets: NodeOffsetMatrix { rows, valid },
                });
            }
            instances.push(parts);
        }
        if !r.verify_checksum()? {
            return Err(DatasetError::Digest("content checksum does not match".into()));
        }
        Ok(Self {
            category,
            config,
            camera,
            node_count,
            link_count,
            topology_digest,
            ssc_labels,
            views,
            instances,
        })
    }

    /// Content digest; forests record it to tie a model to its data.
    pub fn digest(&self) -> u64 {
        checksum(&self.to_bytes())
    }

    pub fn check_topology(&self, graph: &SkeletonGraph) -> Result<(), DatasetError> {
        let expected = topology_digest(graph);
        if expected != self.topology_digest {
            return Err(DatasetError::Digest(format!(
                "skeleton topology {expected:016x} differs from dataset {:016x}",
                self.topology_digest
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_camera(w: &mut Writer, cam: &CameraIntrinsics) {
    w.f64(cam.fx);
    w.f64(cam.fy);
    w.f64(cam.cx);
    w.f64(cam.cy);
    w.u32(cam.width);
    w.u32(cam.height);
}

pub(crate) fn read_camera(r: &mut Reader) -> Result<CameraIntrinsics, CodecError> {
    Ok(CameraIntrinsics {
        fx: r.f64()?,
        fy: r.f64()?,
        cx: r.f64()?,
        cy: r.f64()?,
        width: r.u32()?,
        height: r.u32()?,
    })
}
