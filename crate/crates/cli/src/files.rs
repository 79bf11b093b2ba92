//! On-disk records passed between stages. Every record carries the digest of
//! the inputs it was built from so a later stage can refuse stale outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use catpose::codec::digest_of;
use catpose::geometry::{load_mesh, CameraIntrinsics};
use catpose::pipeline::Instance;
use catpose::skeleton::{load_skeleton, SscResult};
use catpose::config::{PipelineConfig, ViewConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::InputError;

pub const MANIFEST: &str = "manifest.json";
pub const SSC: &str = "ssc.json";
pub const VIEWS: &str = "renders/views.json";
pub const DATASET: &str = "dataset.isas";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// OFF or OBJ, relative to the manifest.
    pub mesh: PathBuf,
    /// Skeleton JSON, relative to the manifest.
    pub skeleton: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryManifest {
    pub category: String,
    pub instances: Vec<ManifestEntry>,
}

impl CategoryManifest {
    pub fn validate(&self) -> Result<()> {
        if !self.instances.iter().any(|e| e.split == Split::Train) {
            return Err(InputError::new("manifest has no train instance").into());
        }
        Ok(())
    }

    pub fn digest(&self) -> u64 {
        digest_of(self)
    }

    /// Meshes and skeletons of one split, in manifest order.
    pub fn load(&self, root: &Path, split: Split) -> Result<Vec<Instance>> {
        self.instances
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                let mesh = load_mesh(&root.join(&e.mesh))
                    .map_err(|err| InputError::new(format!("instance {}: {err}", e.name)))?;
                let skeleton = load_skeleton(&root.join(&e.skeleton))
                    .map_err(|err| InputError::new(format!("instance {}: {err}", e.name)))?;
                Ok(Instance { name: e.name.clone(), mesh, skeleton })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SscRecord {
    pub manifest_digest: u64,
    /// Train instance names in the order of `ssc.points`.
    pub instances: Vec<String>,
    pub ssc: SscResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFile {
    pub instance: String,
    pub split: Split,
    pub index: usize,
    /// Relative to the output directory.
    pub depth: PathBuf,
    pub euler_rad: [f64; 3],
    pub translation_m: [f64; 3],
}

/// Index of the rendered depth images. Viewpoints are recomputed from
/// `views`, `radius_m` and `seed` downstream; the stored poses are for people.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewIndex {
    pub manifest_digest: u64,
    pub config_digest: u64,
    pub camera: CameraIntrinsics,
    pub views: ViewConfig,
    pub radius_m: f64,
    pub seed: u64,
    pub files: Vec<ViewFile>,
}

/// Digest of the settings that fix the rendered images.
pub fn render_digest(cfg: &PipelineConfig, seed: u64) -> u64 {
    digest_of(&(cfg.camera, cfg.views, seed))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| InputError::new(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| InputError::new(format!("{}: {e}", path.display())).into())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

pub fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, data).with_context(|| format!("writing {}", path.display()))
}
