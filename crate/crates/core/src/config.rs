//! Pipeline configuration. Every field has a default, so a config file only
//! needs the keys it overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraIntrinsics;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Which quality terms drive split selection. Q1 is always required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct QualityMask {
    pub q1: bool,
    pub q2: bool,
    pub q3: bool,
}

impl QualityMask {
    pub const Q1: QualityMask = QualityMask { q1: true, q2: false, q3: false };
    pub const ALL: QualityMask = QualityMask { q1: true, q2: true, q3: true };
}

impl Default for QualityMask {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for QualityMask {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut mask = QualityMask { q1: false, q2: false, q3: false };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match tok.to_ascii_lowercase().as_str() {
                "q1" => mask.q1 = true,
                "q2" => mask.q2 = true,
                "q3" => mask.q3 = true,
                other => return Err(invalid(format!("unknown quality term '{other}'"))),
            }
        }
        if !mask.q1 {
            return Err(invalid("quality mask must include q1"));
        }
        Ok(mask)
    }
}

impl fmt::Display for QualityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (on, name) in [(self.q1, "q1"), (self.q2, "q2"), (self.q3, "q3")] {
            if on {
                parts.push(name);
            }
        }
        f.write_str(&parts.join(","))
    }
}

impl TryFrom<String> for QualityMask {
    type Error = ConfigError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<QualityMask> for String {
    fn from(m: QualityMask) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    pub train_views: usize,
    pub test_views: usize,
    /// Camera distance as a multiple of the instance diameter.
    pub radius_factor: f64,
    /// Fixed camera distance in metres shared by every instance of the
    /// category; overrides `radius_factor` when set.
    pub radius_m: Option<f64>,
    pub hemisphere: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            train_views: 89,
            test_views: 20,
            radius_factor: 2.0,
            radius_m: None,
            hemisphere: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartConfig {
    /// Side of the square depth patch, pixels.
    pub patch_size: usize,
    pub stride: usize,
    /// Minimum fraction of foreground pixels inside a patch.
    pub min_foreground: f64,
}

impl Default for PartConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            stride: 8,
            min_foreground: 0.5,
        }
    }
}

impl PartConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch_size < 2 || self.stride == 0 {
            return Err(invalid("patch_size must be >= 2 and stride >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_foreground) {
            return Err(invalid("min_foreground must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Nodes with fewer samples become leaves.
    pub min_samples: usize,
    /// Split candidates sampled per node.
    pub candidates: usize,
    /// Fraction of the training set drawn (without replacement) per tree.
    pub subset_fraction: f64,
    /// Cap on votes stored per leaf.
    pub leaf_votes: usize,
    /// Covariance regulariser added to the diagonal before determinants.
    pub epsilon: f64,
    /// Splits whose quality does not exceed this become leaves.
    pub gain_floor: f64,
    /// Radius of the disc from which probe offsets are drawn, px·m.
    pub probe_radius: f64,
    /// Depth read for probes that leave the patch or hit background, metres.
    pub background_depth: f64,
    pub quality: QualityMask,
    /// Weights on (Q1, Q2, Q3) in the summed quality.
    pub weights: [f64; 3],
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            trees: 8,
            max_depth: 20,
            min_samples: 20,
            candidates: 200,
            subset_fraction: 0.5,
            leaf_votes: 50,
            epsilon: 1e-6,
            gain_floor: 1e-7,
            probe_radius: 30.0,
            background_depth: 10.0,
            quality: QualityMask::ALL,
            weights: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trees == 0 || self.candidates == 0 || self.leaf_votes == 0 {
            return Err(invalid("trees, candidates and leaf_votes must be positive"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(invalid("subset_fraction must lie in (0, 1]"));
        }
        if !(self.epsilon > 0.0) || !(self.probe_radius > 0.0) || !(self.background_depth > 0.0) {
            return Err(invalid("epsilon, probe_radius and background_depth must be positive"));
        }
        if !self.quality.q1 {
            return Err(invalid("quality mask must include q1"));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("quality weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub bin_u: f64,
    pub bin_v: f64,
    pub bin_z: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Gaussian smoothing width in bins; 0 disables smoothing.
    pub smoothing_sigma: f64,
    /// Half-width of the non-maximum suppression window, bins.
    pub nms_radius: usize,
    pub top_k: usize,
    /// Angular radius used when clustering rotation votes, radians.
    pub rotation_kernel: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            bin_u: 4.0,
            bin_v: 4.0,
            bin_z: 0.05,
            z_min: 0.2,
            z_max: 8.0,
            smoothing_sigma: 1.0,
            nms_radius: 1,
            top_k: 5,
            rotation_kernel: 0.35,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.bin_u > 0.0 && self.bin_v > 0.0 && self.bin_z > 0.0) {
            return Err(invalid("bin sizes must be positive"));
        }
        if !(self.z_max > self.z_min) {
            return Err(invalid("z_max must exceed z_min"));
        }
        if self.top_k == 0 {
            return Err(invalid("top_k must be positive"));
        }
        if self.smoothing_sigma < 0.0 || !(self.rotation_kernel > 0.0) {
            return Err(invalid("smoothing_sigma must be >= 0 and rotation_kernel > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Coarseness factor: correct iff distance <= z * diameter.
    pub z: f64,
    /// Surface samples in the evaluation cloud.
    pub sample_count: usize,
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            z: 0.3,
            sample_count: 4096,
            sample_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub camera: CameraIntrinsics,
    pub views: ViewConfig,
    pub parts: PartConfig,
    pub forest: ForestConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.camera.validate().map_err(|e| invalid(e.to_string()))?;
        if self.views.train_views == 0 || self.views.test_views == 0 || !(self.views.radius_factor > 0.0) {
            return Err(invalid("view counts and radius_factor must be positive"));
        }
        if self.views.radius_m.is_some_and(|r| !(r > 0.0)) {
            return Err(invalid("radius_m must be positive"));
        }
        self.parts.validate()?;
        self.forest.validate()?;
        self.inference.validate()?;
        if !(self.eval.z > 0.0) || self.eval.sample_count == 0 {
            return Err(invalid("eval z and sample_count must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A quarter-resolution setup for quick end-to-end runs: 320×240 camera,
    /// 16 px patches, Hough bins scaled to match, and a four-tree forest with
    /// 100 candidates per node so a seed trains in well under a minute on one core.
    pub fn desk() -> Self {
        Self {
            camera: CameraIntrinsics {
                fx: 287.5,
                fy: 287.5,
                cx: 160.0,
                cy: 120.0,
                width: 320,
                height: 240,
            },
            parts: PartConfig {
                patch_size: 16,
                stride: 6,
                min_foreground: 0.5,
            },
            forest: ForestConfig {
                trees: 4,
                candidates: 100,
                ..ForestConfig::default()
            },
            inference: InferenceConfig {
                bin_u: 2.0,
                bin_v: 2.0,
                ..InferenceConfig::default()
            },
            ..Self::default()
        }
    }
}
