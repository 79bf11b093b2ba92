//! Privileged one-class Hough forest.
//!
//! Splits test two-pixel depth differences on the patch (appearance only).
//! Split *selection* maximises an information gain built from covariance
//! log-determinants of three target families:
//!
//! * Q1: centre offset Δx and view rotation θ,
//! * Q2: the per-view link-angle vector `a`,
//! * Q3: the per-part node-offset matrix `s`.
//!
//! `a` and `s` are read only while scoring candidates; leaves keep (Δx, θ)
//! votes and a trained [`Forest`] holds no skeleton data at all.
//!
//! Angles enter covariances through a (cos, sin) embedding. Covariances are
//! population covariances regularised by `εI`; sets with fewer than two
//! samples use `εI` outright.
//!
//! # File layout (`ISAF`, little-endian)
//!
//! ```text
//! magic "ISAF" | u32 version | str config_json
//! str category | u32 patch_size | u32 stride | f64 min_foreground
//! u32 s_n | u32 link_count
//! camera: f64 fx, fy, cx, cy, u32 width, height | u64 dataset_digest
//! u32 n_trees, per tree: u32 n_nodes, per node:
//!     u8 0 (split): f64 u.x, u.y, v.x, v.y, tau | u32 left | u32 right
//!     u8 1 (leaf):  u32 sample_count | u32 n_votes | n_votes × f64[6] (Δx, θ)
//! u64 checksum (first 8 bytes of SHA-256 over everything above)
//! ```

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{checksum, CodecError, Reader, Writer};
use crate::config::{ForestConfig, PartConfig, QualityMask};
use crate::dataset::{read_camera, write_camera, AnnotatedPart, Part, Patch, TrainingSet};
use crate::geometry::CameraIntrinsics;

pub const FOREST_MAGIC: &[u8; 4] = b"ISAF";
pub const FOREST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("part centre pixel is background")]
    InvalidPart,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid forest config: {0}")]
    Config(String),
    #[error("forest file version error: {0}")]
    Version(String),
    #[error("forest file corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<CodecError> for ForestError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::Truncated => ForestError::Corrupt("file truncated".into()),
            CodecError::Invalid(m) => ForestError::Corrupt(m),
        }
    }
}

/// Split parameters φ = (ψ, τ): probe offsets `u`, `v` in px·m and threshold τ in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCandidate {
    pub u: [f64; 2],
    pub v: [f64; 2],
    pub tau: f64,
}

#[inline]
fn probe(patch: &Patch, w: (i64, i64), offset: [f64; 2], depth: f64, background: f64) -> f64 {
    let x = (w.0 as f64 + offset[0] / depth).round() as i64;
    let y = (w.1 as f64 + offset[1] / depth).round() as i64;
    match patch.get(x, y) {
        Some(d) if d.is_finite() => d as f64,
        _ => background,
    }
}

/// Depth-normalised two-pixel difference at pixel `w` of `patch`.
/// Probes off the patch or on background read `background`.
pub fn split_feature(u: [f64; 2], v: [f64; 2], patch: &Patch, w: (i64, i64), background: f64) -> Result<f64, ForestError> {
    let d = match patch.get(w.0, w.1) {
        Some(d) if d.is_finite() && d > 0.0 => d as f64,
        _ => return Err(ForestError::InvalidPart),
    };
    Ok(probe(patch, w, u, d, background) - probe(patch, w, v, d, background))
}

/// Feature at the part centre. Parts are built with a foreground centre.
#[inline]
fn part_feature(part: &Part, c: &SplitCandidate, background: f64) -> f64 {
    let w = part.patch.center();
    let d = part.center[2];
    probe(&part.patch, w, c.u, d, background) - probe(&part.patch, w, c.v, d, background)
}

/// Splits into (feature < τ, the rest).
pub fn partition<'a, T: AsRef<Part>>(parts: &'a [T], c: &SplitCandidate, background: f64) -> (Vec<&'a T>, Vec<&'a T>) {
    parts
        .iter()
        .partition(|p| part_feature(p.as_ref(), c, background) < c.tau)
}

impl AsRef<Part> for Part {
    fn as_ref(&self) -> &Part {
        self
    }
}

impl AsRef<Part> for AnnotatedPart {
    fn as_ref(&self) -> &Part {
        &self.part
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QualityBreakdown {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    /// Weighted sum of the enabled terms.
    pub q: f64,
}

// ---------------------------------------------------------------------------
// Log-determinants

/// `ln det` of a symmetric positive-definite `d × d` matrix (row-major,
/// overwritten). Falls back to LU for matrices that fail Cholesky.
fn log_det(a: &mut [f64], d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    let backup = a.to_vec();
    let mut acc = 0.0;
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > 0.0) {
            let m = DMatrix::from_row_slice(d, d, &backup);
            return m.lu().determinant().abs().ln();
        }
        let l = diag.sqrt();
        a[j * d + j] = l;
        acc += l.ln();
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    2.0 * acc
}

/// `ln det(cov + εI)` from a sample count, sum vector and (upper-filled)
/// sum of outer products.
fn log_det_from_sums(n: f64, sum: &[f64], sq: &[f64], eps: f64) -> f64 {
    let d = sum.len();
    if n < 2.0 {
        return d as f64 * eps.ln();
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        let mi = sum[i] / n;
        for j in i..d {
            let v = sq[i * d + j] / n - mi * (sum[j] / n);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
        cov[i * d + i] += eps;
    }
    log_det(&mut cov, d)
}

/// Square-root factor `R` (upper triangular) with `RᵀR = εI + Σ xxᵀ`, grown
/// one row at a time by Givens rotations. Near-singular scatters keep their
/// ε directions exact because no covariance matrix is ever formed.
#[derive(Clone)]
struct RidgeFactor {
    d: usize,
    r: Vec<f64>,
}

impl RidgeFactor {
    fn new(d: usize, eps: f64) -> Self {
        let mut f = Self { d, r: vec![0.0; d * d] };
        f.reset(eps);
        f
    }

    fn reset(&mut self, eps: f64) {
        self.r.iter_mut().for_each(|x| *x = 0.0);
        let diag = eps.sqrt();
        for j in 0..self.d {
            self.r[j * self.d + j] = diag;
        }
    }

    /// Folds the row `x` (overwritten) into the factor.
    fn add_row(&mut self, x: &mut [f64]) {
        let d = self.d;
        for j in 0..d {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            let row = &mut self.r[j * d..(j + 1) * d];
            let rjj = row[j];
            let h = (rjj * rjj + xj * xj).sqrt();
            let (c, s) = (rjj / h, xj / h);
            row[j] = h;
            for k in j + 1..d {
                let (rk, xk) = (row[k], x[k]);
                row[k] = c * rk + s * xk;
                x[k] = c * xk - s * rk;
            }
        }
    }

    fn log_det(&self) -> f64 {
        (0..self.d).map(|j| self.r[j * self.d + j].abs().ln()).sum::<f64>() * 2.0
    }

    fn row(&self, j: usize) -> &[f64] {
        &self.r[j * self.d..(j + 1) * self.d]
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `parent − Σ_children (|child| / Σ|child|) · child`.
fn gain(parent: f64, left: (f64, f64), right: (f64, f64)) -> f64 {
    let total = left.0 + right.0;
    parent - (left.0 / total * left.1 + right.0 / total * right.1)
}

// ---------------------------------------------------------------------------
// Direct per-sample route (reference semantics of Q1/Q2/Q3)

fn embed_rotation(r: &[f64; 3]) -> [f64; 6] {
    [r[0].cos(), r[0].sin(), r[1].cos(), r[1].sin(), r[2].cos(), r[2].sin()]
}

/// Links present in every sample's `a`, ascending.
fn common_links(parent: &[&AnnotatedPart]) -> Vec<usize> {
    let Some(first) = parent.first() else {
        return Vec::new();
    };
    let mut links: Vec<usize> = first.link_angles.entries.iter().map(|e| e.link).collect();
    links.sort_unstable();
    links.retain(|l| parent.iter().all(|p| p.link_angles.angle_of(*l).is_some()));
    links
}

/// Node rows valid in every sample's `s`.
fn common_rows(parent: &[&AnnotatedPart]) -> Vec<usize> {
    let Some(first) = parent.first() else {
        return Vec::new();
    };
    (0..first.node_offsets.row_count())
        .filter(|&r| parent.iter().all(|p| p.node_offsets.valid.get(r).copied().unwrap_or(false)))
        .collect()
}

fn direct_log_det(rows: &[Vec<f64>], d: usize, eps: f64) -> f64 {
    let n = rows.len();
    if n < 2 {
        return d as f64 * eps.ln();
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let scale = 1.0 / (n as f64).sqrt();
    let mut f = RidgeFactor::new(d, eps);
    let mut x = vec![0.0; d];
    for r in rows {
        for ((xi, ri), m) in x.iter_mut().zip(r).zip(&mean) {
            *xi = (ri - m) * scale;
        }
        f.add_row(&mut x);
    }
    f.log_det()
}

fn direct_gain<F>(parent: &[&AnnotatedPart], left: &[&AnnotatedPart], right: &[&AnnotatedPart], score: F) -> f64
where
    F: Fn(&[&AnnotatedPart]) -> f64,
{
    gain(
        score(parent),
        (left.len() as f64, score(left)),
        (right.len() as f64, score(right)),
    )
}

/// 6D pose gain over Δx and θ.
pub fn q1(parent: &[&AnnotatedPart], left: &[&AnnotatedPart], right: &[&AnnotatedPart], eps: f64) -> f64 {
    let score = |set: &[&AnnotatedPart]| {
        let dx: Vec<Vec<f64>> = set.iter().map(|p| p.offset.to_vec()).collect();
        let th: Vec<Vec<f64>> = set.iter().map(|p| embed_rotation(&p.rotation).to_vec()).collect();
        log_add_exp(direct_log_det(&dx, 3, eps), direct_log_det(&th, 6, eps))
    };
    direct_gain(parent, left, right, score)
}

/// Link-angle gain over the links visible in every parent sample.
pub fn q2(parent: &[&AnnotatedPart], left: &[&AnnotatedPart], right: &[&AnnotatedPart], eps: f64) -> f64 {
    let links = common_links(parent);
    let score = |set: &[&AnnotatedPart]| {
        let rows: Vec<Vec<f64>> = set
            .iter()
            .map(|p| {
                links
                    .iter()
                    .flat_map(|&l| {
                        let a = p.link_angles.angle_of(l).expect("common link");
                        [a.cos(), a.sin()]
                    })
                    .collect()
            })
            .collect();
        direct_log_det(&rows, 2 * links.len(), eps)
    };
    direct_gain(parent, left, right, score)
}

/// Node-offset gain over the rows valid in every parent sample.
pub fn q3(parent: &[&AnnotatedPart], left: &[&AnnotatedPart], right: &[&AnnotatedPart], eps: f64) -> f64 {
    let rows_idx = common_rows(parent);
    let score = |set: &[&AnnotatedPart]| {
        let rows: Vec<Vec<f64>> = set
            .iter()
            .map(|p| rows_idx.iter().flat_map(|&r| p.node_offsets.rows[r]).collect())
            .collect();
        direct_log_det(&rows, 3 * rows_idx.len(), eps)
    };
    direct_gain(parent, left, right, score)
}

/// Masked, weighted sum of the three gains via the direct route.
pub fn quality(
    parent: &[&AnnotatedPart],
    left: &[&AnnotatedPart],
    right: &[&AnnotatedPart],
    mask: QualityMask,
    weights: [f64; 3],
    eps: f64,
) -> QualityBreakdown {
    let mut b = QualityBreakdown::default();
    if mask.q1 {
        b.q1 = q1(parent, left, right, eps);
        b.q += weights[0] * b.q1;
    }
    if mask.q2 {
        b.q2 = q2(parent, left, right, eps);
        b.q += weights[1] * b.q2;
    }
    if mask.q3 {
        b.q3 = q3(parent, left, right, eps);
        b.q += weights[2] * b.q3;
    }
    b
}

// ---------------------------------------------------------------------------
// Grouped route used during training
//
// Parts from one view share `a`, and their `s` rows are the view's projected
// nodes minus the part centre. Grouping samples by view turns the Q2/Q3
// scatter matrices into sums over views instead of over parts.

struct Group {
    /// (cos, sin) of roll, pitch and yaw.
    rotation: [f64; 6],
    /// (cos, sin) per link, zero where the link is not visible.
    angles: Vec<f64>,
    link_valid: Vec<bool>,
    /// Projected node coordinates (centred), zero where invalid.
    nodes: Vec<f64>,
    node_valid: Vec<bool>,
}

/// Training samples with centred targets, grouped by view.
struct TrainingData<'a> {
    parts: Vec<&'a AnnotatedPart>,
    offset: Vec<[f64; 3]>,
    center: Vec<[f64; 3]>,
    group: Vec<u32>,
    groups: Vec<Group>,
    link_count: usize,
    node_count: usize,
}

const GROUP_TOLERANCE: f64 = 1e-6;

/// Sets up to this size compute the Δx term from their rows; they are
/// rank-deficient, and sums lose the ε directions there.
const EXACT_OFFSET_ROWS: usize = 3;

impl<'a> TrainingData<'a> {
    fn new(parts: Vec<&'a AnnotatedPart>) -> Self {
        let n = parts.len().max(1) as f64;
        let link_count = parts
            .iter()
            .flat_map(|p| p.link_angles.entries.iter().map(|e| e.link + 1))
            .max()
            .unwrap_or(0);
        let node_count = parts.first().map_or(0, |p| p.node_offsets.row_count());

        let mut dx_mean = [0.0; 3];
        let mut c_mean = [0.0; 3];
        let mut s_sum = vec![0.0; 3 * node_count];
        let mut s_cnt = vec![0.0; node_count];
        for p in &parts {
            for k in 0..3 {
                dx_mean[k] += p.offset[k] / n;
                c_mean[k] += p.part.center[k] / n;
            }
            for r in 0..node_count {
                if p.node_offsets.valid[r] {
                    s_cnt[r] += 1.0;
                    for k in 0..3 {
                        s_sum[3 * r + k] += p.node_offsets.rows[r][k];
                    }
                }
            }
        }
        let s_mean: Vec<f64> = (0..3 * node_count)
            .map(|i| if s_cnt[i / 3] > 0.0 { s_sum[i] / s_cnt[i / 3] } else { 0.0 })
            .collect();

        let offset = parts
            .iter()
            .map(|p| std::array::from_fn(|k| p.offset[k] - dx_mean[k]))
            .collect();
        let center: Vec<[f64; 3]> = parts
            .iter()
            .map(|p| std::array::from_fn(|k| p.part.center[k] - c_mean[k]))
            .collect();

        // Node coordinates relative to c_mean and the mean offset, so that
        // `nodes - B·center` reproduces the centred `s`.
        let group_of = |p: &AnnotatedPart, c: &[f64; 3]| -> Group {
            let mut angles = vec![0.0; 2 * link_count];
            let mut link_valid = vec![false; link_count];
            for e in &p.link_angles.entries {
                angles[2 * e.link] = e.angle.cos();
                angles[2 * e.link + 1] = e.angle.sin();
                link_valid[e.link] = true;
            }
            let mut nodes = vec![0.0; 3 * node_count];
            for r in 0..node_count {
                if p.node_offsets.valid[r] {
                    for k in 0..3 {
                        nodes[3 * r + k] = p.node_offsets.rows[r][k] + c[k] - s_mean[3 * r + k];
                    }
                }
            }
            Group {
                rotation: embed_rotation(&p.rotation),
                angles,
                link_valid,
                nodes,
                node_valid: p.node_offsets.valid.clone(),
            }
        };
        let near = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, b)| (a - b).abs() <= GROUP_TOLERANCE * (1.0 + a.abs()));
        let same = |a: &Group, b: &Group| {
            a.link_valid == b.link_valid
                && a.node_valid == b.node_valid
                && near(&a.rotation, &b.rotation)
                && near(&a.angles, &b.angles)
                && near(&a.nodes, &b.nodes)
        };

        let mut groups: Vec<Group> = Vec::new();
        let mut by_view: HashMap<u32, Vec<u32>> = HashMap::new();
        let mut group = Vec::with_capacity(parts.len());
        for (p, c) in parts.iter().zip(&center) {
            let candidate = group_of(p, c);
            let slots = by_view.entry(p.view).or_default();
            let id = match slots.iter().find(|&&g| same(&groups[g as usize], &candidate)) {
                Some(&g) => g,
                None => {
                    let g = groups.len() as u32;
                    groups.push(candidate);
                    slots.push(g);
                    g
                }
            };
            group.push(id);
        }

        Self {
            parts,
            offset,
            center,
            group,
            groups,
            link_count,
            node_count,
        }
    }
}

/// Δx sums for one side; the larger child is parent minus the smaller.
#[derive(Clone, Copy, Default)]
struct OffsetSums {
    n: f64,
    sum: [f64; 3],
    sq: [f64; 9],
}

impl OffsetSums {
    fn add(&mut self, e: &[f64; 3]) {
        self.n += 1.0;
        for a in 0..3 {
            self.sum[a] += e[a];
            for b in a..3 {
                self.sq[a * 3 + b] += e[a] * e[b];
            }
        }
    }

    fn minus(&self, o: &OffsetSums) -> OffsetSums {
        OffsetSums {
            n: self.n - o.n,
            sum: std::array::from_fn(|i| self.sum[i] - o.sum[i]),
            sq: std::array::from_fn(|i| self.sq[i] - o.sq[i]),
        }
    }
}

/// One child's statistics: per-group counts and centre sums, Δx sums, the
/// factor of the within-group centre scatter, and (for tiny sets) the samples.
#[derive(Clone)]
struct SideStats {
    counts: Vec<f64>,
    csums: Vec<[f64; 3]>,
    offsets: OffsetSums,
    within: RidgeFactor,
    members: Vec<u32>,
}

impl SideStats {
    fn new(groups: usize) -> Self {
        Self {
            counts: vec![0.0; groups],
            csums: vec![[0.0; 3]; groups],
            offsets: OffsetSums::default(),
            within: RidgeFactor::new(3, 0.0),
            members: Vec::new(),
        }
    }

    fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0.0);
        self.csums.iter_mut().for_each(|c| *c = [0.0; 3]);
        self.offsets = OffsetSums::default();
        self.within.reset(0.0);
        self.members.clear();
    }

    fn set_complement(&mut self, parent: &SideStats, small: &SideStats) {
        for (g, c) in self.counts.iter_mut().enumerate() {
            *c = parent.counts[g] - small.counts[g];
        }
        for (g, c) in self.csums.iter_mut().enumerate() {
            *c = std::array::from_fn(|a| parent.csums[g][a] - small.csums[g][a]);
        }
        self.offsets = parent.offsets.minus(&small.offsets);
    }
}

/// Per-node scratch: which samples, which groups, which feature dimensions.
struct NodeEval<'d, 'a> {
    data: &'d TrainingData<'a>,
    samples: &'d [u32],
    local_group: Vec<u32>,
    /// Per local group: rotation embedding, `a` on the node's links and
    /// node coordinates on the node's rows.
    g_rotation: Vec<[f64; 6]>,
    g_angles: Vec<f64>,
    g_nodes: Vec<f64>,
    da: usize,
    ds: usize,
    mask: QualityMask,
    weights: [f64; 3],
    eps: f64,
    parent: SideStats,
    parent_terms: (f64, f64, f64),
    sides: [SideStats; 2],
    // scratch factors and rows
    f_rot: RidgeFactor,
    f_a: RidgeFactor,
    f_s: RidgeFactor,
    row: Vec<f64>,
    mean: Vec<f64>,
}

impl<'d, 'a> NodeEval<'d, 'a> {
    fn new(data: &'d TrainingData<'a>, samples: &'d [u32], mask: QualityMask, weights: [f64; 3], eps: f64) -> Self {
        let mut local = HashMap::new();
        let mut groups: Vec<u32> = Vec::new();
        let local_group = samples
            .iter()
            .map(|&i| {
                let g = data.group[i as usize];
                *local.entry(g).or_insert_with(|| {
                    groups.push(g);
                    groups.len() as u32 - 1
                })
            })
            .collect();
        let a_dims: Vec<usize> = if mask.q2 {
            (0..data.link_count)
                .filter(|&l| groups.iter().all(|&g| data.groups[g as usize].link_valid[l]))
                .flat_map(|l| [2 * l, 2 * l + 1])
                .collect()
        } else {
            Vec::new()
        };
        let s_rows: Vec<usize> = if mask.q3 {
            (0..data.node_count)
                .filter(|&r| groups.iter().all(|&g| data.groups[g as usize].node_valid[r]))
                .collect()
        } else {
            Vec::new()
        };
        let g_rotation = groups.iter().map(|&g| data.groups[g as usize].rotation).collect();
        let g_angles = groups
            .iter()
            .flat_map(|&g| a_dims.iter().map(move |&d| data.groups[g as usize].angles[d]))
            .collect();
        let g_nodes = groups
            .iter()
            .flat_map(|&g| {
                s_rows
                    .iter()
                    .flat_map(move |&r| (0..3).map(move |k| data.groups[g as usize].nodes[3 * r + k]))
            })
            .collect();
        let (da, ds, ng) = (a_dims.len(), 3 * s_rows.len(), groups.len());
        let mut eval = NodeEval {
            data,
            samples,
            local_group,
            g_rotation,
            g_angles,
            g_nodes,
            da,
            ds,
            mask,
            weights,
            eps,
            parent: SideStats::new(ng),
            parent_terms: (0.0, 0.0, 0.0),
            sides: [SideStats::new(ng), SideStats::new(ng)],
            f_rot: RidgeFactor::new(6, eps),
            f_a: RidgeFactor::new(da, eps),
            f_s: RidgeFactor::new(ds, eps),
            row: vec![0.0; ds.max(da).max(6)],
            mean: vec![0.0; ds.max(da).max(6)],
        };
        let all = vec![true; samples.len()];
        eval.fill_sides(&all, samples.len());
        eval.parent = eval.sides[1].clone();
        eval.parent_terms = eval.terms(1);
        eval
    }

    /// Fills `sides[1]` with the flagged samples and `sides[0]` with the rest.
    fn fill_sides(&mut self, flags: &[bool], n_true: usize) {
        let n = self.samples.len();
        let counts = [n - n_true, n_true];
        // Accumulate sums on the smaller side only (or directly at the root).
        let small = usize::from(2 * n_true <= n);
        let from_parent = n_true < n && !self.parent.counts.is_empty();
        for st in &mut self.sides {
            st.clear();
        }
        for (k, &i) in self.samples.iter().enumerate() {
            let side = usize::from(flags[k]);
            let st = &mut self.sides[side];
            if counts[side] <= EXACT_OFFSET_ROWS {
                st.members.push(i);
            }
            if !from_parent || side == small {
                let g = self.local_group[k] as usize;
                st.offsets.add(&self.data.offset[i as usize]);
                st.counts[g] += 1.0;
                let c = &self.data.center[i as usize];
                for a in 0..3 {
                    st.csums[g][a] += c[a];
                }
            }
        }
        if from_parent {
            let (lo, hi) = self.sides.split_at_mut(1);
            let (small_st, other) = if small == 1 { (&hi[0], &mut lo[0]) } else { (&lo[0], &mut hi[0]) };
            other.set_complement(&self.parent, small_st);
        }
        if self.mask.q3 && self.ds > 0 {
            // Within-group centre scatter K, streamed from exact deviations.
            let mut e = [0.0; 3];
            for (k, &i) in self.samples.iter().enumerate() {
                let st = &mut self.sides[usize::from(flags[k])];
                let g = self.local_group[k] as usize;
                let (cnt, cs) = (st.counts[g], st.csums[g]);
                let c = &self.data.center[i as usize];
                for a in 0..3 {
                    e[a] = c[a] - cs[a] / cnt;
                }
                st.within.add_row(&mut e);
            }
        }
    }

    /// Log-determinant terms (Q1, Q2, Q3) of `sides[side]`.
    fn terms(&mut self, side: usize) -> (f64, f64, f64) {
        let eps = self.eps;
        let st = &self.sides[side];
        let n = st.offsets.n;
        if n < 2.0 {
            let t1 = log_add_exp(3.0 * eps.ln(), 6.0 * eps.ln());
            return (
                if self.mask.q1 { t1 } else { 0.0 },
                if self.mask.q2 { self.da as f64 * eps.ln() } else { 0.0 },
                if self.mask.q3 { self.ds as f64 * eps.ln() } else { 0.0 },
            );
        }
        let t1 = if self.mask.q1 {
            let dx = if st.members.is_empty() {
                log_det_from_sums(n, &st.offsets.sum, &st.offsets.sq, eps)
            } else {
                let rows: Vec<Vec<f64>> = st.members.iter().map(|&i| self.data.offset[i as usize].to_vec()).collect();
                direct_log_det(&rows, 3, eps)
            };
            let th = group_log_det(&mut self.f_rot, &st.counts, n, 6, |g| &self.g_rotation[g][..], &mut self.row, &mut self.mean, eps);
            log_add_exp(dx, th)
        } else {
            0.0
        };
        let da = self.da;
        let t2 = if self.mask.q2 {
            group_log_det(&mut self.f_a, &st.counts, n, da, |g| &self.g_angles[g * da..(g + 1) * da], &mut self.row, &mut self.mean, eps)
        } else {
            0.0
        };
        let t3 = if self.mask.q3 { self.node_term(side) } else { 0.0 };
        (t1, t2, t3)
    }

    /// Q3 term. Rows of `s` are `N_g − B c_i`, so the scatter splits into
    /// between-group rows √n_g (N_g − B h_g − s̄) and the within-group centre
    /// scatter lifted through B, `h_g` being the group's mean centre.
    fn node_term(&mut self, side: usize) -> f64 {
        let ds = self.ds;
        let st = &self.sides[side];
        let n = st.offsets.n;
        self.f_s.reset(self.eps);
        if ds == 0 {
            return 0.0;
        }
        let mean = &mut self.mean[..ds];
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (g, &cnt) in st.counts.iter().enumerate() {
            if cnt == 0.0 {
                continue;
            }
            let h: [f64; 3] = std::array::from_fn(|a| st.csums[g][a] / cnt);
            for (j, m) in mean.iter_mut().enumerate() {
                *m += cnt / n * (self.g_nodes[g * ds + j] - h[j % 3]);
            }
        }
        let row = &mut self.row[..ds];
        for (g, &cnt) in st.counts.iter().enumerate() {
            if cnt == 0.0 {
                continue;
            }
            let h: [f64; 3] = std::array::from_fn(|a| st.csums[g][a] / cnt);
            let w = (cnt / n).sqrt();
            for (j, x) in row.iter_mut().enumerate() {
                *x = w * (self.g_nodes[g * ds + j] - h[j % 3] - mean[j]);
            }
            self.f_s.add_row(row);
        }
        let w = 1.0 / n.sqrt();
        for j in 0..3 {
            let k = st.within.row(j);
            for (c, x) in row.iter_mut().enumerate() {
                *x = w * k[c % 3];
            }
            self.f_s.add_row(row);
        }
        self.f_s.log_det()
    }

    /// Quality of sending the flagged samples left and the rest right.
    fn evaluate(&mut self, left: &[bool], n_left: usize) -> QualityBreakdown {
        self.fill_sides(left, n_left);
        let lt = self.terms(1);
        let rt = self.terms(0);
        let (nl, nr) = (self.sides[1].offsets.n, self.sides[0].offsets.n);
        let p = self.parent_terms;
        let mut b = QualityBreakdown::default();
        if self.mask.q1 {
            b.q1 = gain(p.0, (nl, lt.0), (nr, rt.0));
            b.q += self.weights[0] * b.q1;
        }
        if self.mask.q2 {
            b.q2 = gain(p.1, (nl, lt.1), (nr, rt.1));
            b.q += self.weights[1] * b.q2;
        }
        if self.mask.q3 {
            b.q3 = gain(p.2, (nl, lt.2), (nr, rt.2));
            b.q += self.weights[2] * b.q3;
        }
        b
    }
}

/// `ln |Σ + εI|` of a set whose rows are constant within each group:
/// factor rows √(n_g/n) (v_g − v̄).
#[allow(clippy::too_many_arguments)]
fn group_log_det<'v>(
    f: &mut RidgeFactor,
    counts: &[f64],
    n: f64,
    d: usize,
    value: impl Fn(usize) -> &'v [f64],
    row: &mut [f64],
    mean: &mut [f64],
    eps: f64,
) -> f64 {
    f.reset(eps);
    if d == 0 {
        return 0.0;
    }
    let (row, mean) = (&mut row[..d], &mut mean[..d]);
    mean.iter_mut().for_each(|m| *m = 0.0);
    for (g, &cnt) in counts.iter().enumerate() {
        if cnt > 0.0 {
            for (m, v) in mean.iter_mut().zip(value(g)) {
                *m += cnt / n * v;
            }
        }
    }
    for (g, &cnt) in counts.iter().enumerate() {
        if cnt > 0.0 {
            let w = (cnt / n).sqrt();
            for ((x, v), m) in row.iter_mut().zip(value(g)).zip(mean.iter()) {
                *x = w * (v - m);
            }
            f.add_row(row);
        }
    }
    f.log_det()
}

/// Probe features of every sample for every offset pair, candidate-major.
/// Sample-major traversal keeps each patch in cache across all candidates.
fn feature_matrix(data: &TrainingData, samples: &[u32], probes: &[([f64; 2], [f64; 2])], background: f64) -> Vec<f64> {
    let n = samples.len();
    let mut out = vec![0.0; probes.len() * n];
    for (k, &i) in samples.iter().enumerate() {
        let part = &data.parts[i as usize].part;
        let w = part.patch.center();
        let d = part.center[2];
        for (c, (u, v)) in probes.iter().enumerate() {
            out[c * n + k] = probe(&part.patch, w, *u, d, background) - probe(&part.patch, w, *v, d, background);
        }
    }
    out
}

/// Best split among `candidates` for the node holding `samples`, given each
/// candidate's features in `features` (candidate-major). Candidates leaving a
/// child empty are skipped; ties keep the lowest index.
fn best_split_grouped(
    data: &TrainingData,
    samples: &[u32],
    candidates: &[SplitCandidate],
    features: &[f64],
    cfg: &ForestConfig,
) -> Option<(usize, QualityBreakdown)> {
    let n = samples.len();
    let mut eval = NodeEval::new(data, samples, cfg.quality, cfg.weights, cfg.epsilon);
    let mut best: Option<(usize, QualityBreakdown)> = None;
    let mut left = vec![false; n];
    for (ci, c) in candidates.iter().enumerate() {
        let mut n_left = 0;
        for (flag, f) in left.iter_mut().zip(&features[ci * n..(ci + 1) * n]) {
            *flag = *f < c.tau;
            n_left += *flag as usize;
        }
        if n_left == 0 || n_left == n {
            continue;
        }
        let q = eval.evaluate(&left, n_left);
        if best.as_ref().is_none_or(|(_, b)| q.q > b.q) {
            best = Some((ci, q));
        }
    }
    best
}

/// Index and quality of the best candidate, or `None` if no candidate yields
/// two non-empty children (the node should become a leaf).
pub fn best_split(
    parts: &[&AnnotatedPart],
    candidates: &[SplitCandidate],
    cfg: &ForestConfig,
) -> Option<(usize, QualityBreakdown)> {
    let data = TrainingData::new(parts.to_vec());
    let samples: Vec<u32> = (0..parts.len() as u32).collect();
    let probes: Vec<_> = candidates.iter().map(|c| (c.u, c.v)).collect();
    let features = feature_matrix(&data, &samples, &probes, cfg.background_depth);
    best_split_grouped(&data, &samples, candidates, &features, cfg)
}

// ---------------------------------------------------------------------------
// Trees

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    /// Centre offset (px, px, m).
    pub offset: [f64; 3],
    /// Roll-pitch-yaw, radians.
    pub rotation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub votes: Vec<Vote>,
    pub sample_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        candidate: SplitCandidate,
        left: u32,
        right: u32,
    },
    Leaf(Leaf),
}

/// Nodes in depth-first order; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(&self, id: u32) -> Option<&Leaf> {
        match &self.nodes[id as usize] {
            TreeNode::Leaf(l) => Some(l),
            TreeNode::Split { .. } => None,
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, id: u32) -> usize {
            match &t.nodes[id as usize] {
                TreeNode::Leaf(_) => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf(_))).count()
    }
}

/// Per-depth growth statistics for one tree.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GrowthLog {
    /// (nodes, splits, summed gain) per depth.
    pub levels: Vec<(usize, usize, f64)>,
}

impl GrowthLog {
    fn record(&mut self, depth: usize, gain: Option<f64>) {
        if self.levels.len() <= depth {
            self.levels.resize(depth + 1, (0, 0, 0.0));
        }
        let level = &mut self.levels[depth];
        level.0 += 1;
        if let Some(g) = gain {
            level.1 += 1;
            level.2 += g;
        }
    }

    /// CSV rows: `tree,depth,nodes,splits,mean_gain`.
    pub fn to_csv_rows(&self, tree: usize) -> String {
        let mut out = String::new();
        for (depth, &(nodes, splits, gain)) in self.levels.iter().enumerate() {
            let mean = if splits > 0 { gain / splits as f64 } else { 0.0 };
            let _ = writeln!(out, "{tree},{depth},{nodes},{splits},{mean:.6}");
        }
        out
    }
}

pub const GROWTH_CSV_HEADER: &str = "tree,depth,nodes,splits,mean_gain";

fn random_candidate_offsets(rng: &mut ChaCha8Rng, radius: f64) -> ([f64; 2], [f64; 2]) {
    let mut disc = || {
        let r = radius * rng.gen::<f64>().sqrt();
        let a = 2.0 * PI * rng.gen::<f64>();
        [r * a.cos(), r * a.sin()]
    };
    let u = disc();
    let v = disc();
    (u, v)
}

struct Grower<'d, 'a> {
    data: &'d TrainingData<'a>,
    cfg: &'d ForestConfig,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
    log: GrowthLog,
}

impl Grower<'_, '_> {
    /// Draws the node's candidates and returns them with their features.
    /// Offsets come first, then one τ per offset pair between the extreme
    /// feature values; pairs with constant features are discarded.
    fn sample_candidates(&mut self, samples: &[u32]) -> (Vec<SplitCandidate>, Vec<f64>) {
        let probes: Vec<_> = (0..self.cfg.candidates)
            .map(|_| random_candidate_offsets(&mut self.rng, self.cfg.probe_radius))
            .collect();
        let all = feature_matrix(self.data, samples, &probes, self.cfg.background_depth);
        let n = samples.len();
        let mut candidates = Vec::with_capacity(probes.len());
        let mut features = Vec::with_capacity(all.len());
        for (c, (u, v)) in probes.into_iter().enumerate() {
            let row = &all[c * n..(c + 1) * n];
            let (lo, hi) = row
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &f| (lo.min(f), hi.max(f)));
            let t: f64 = self.rng.gen();
            if hi > lo {
                candidates.push(SplitCandidate { u, v, tau: lo + t * (hi - lo) });
                features.extend_from_slice(row);
            }
        }
        (candidates, features)
    }

    fn make_leaf(&mut self, samples: &[u32]) -> TreeNode {
        let k = self.cfg.leaf_votes;
        let chosen: Vec<u32> = if samples.len() <= k {
            samples.to_vec()
        } else {
            // Reservoir sampling keeps the draw reproducible from the tree RNG.
            let mut res: Vec<u32> = samples[..k].to_vec();
            for (i, &s) in samples.iter().enumerate().skip(k) {
                let j = self.rng.gen_range(0..=i);
                if j < k {
                    res[j] = s;
                }
            }
            res
        };
        let votes = chosen
            .iter()
            .map(|&i| {
                let p = self.data.parts[i as usize];
                Vote {
                    offset: p.offset,
                    rotation: p.rotation,
                }
            })
            .collect();
        TreeNode::Leaf(Leaf {
            votes,
            sample_count: samples.len() as u32,
        })
    }

    fn grow(&mut self, samples: Vec<u32>, depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(TreeNode::Leaf(Leaf {
            votes: Vec::new(),
            sample_count: 0,
        }));
        let split = if depth >= self.cfg.max_depth || samples.len() < self.cfg.min_samples.max(2) {
            None
        } else {
            let (candidates, features) = self.sample_candidates(&samples);
            best_split_grouped(self.data, &samples, &candidates, &features, self.cfg)
                .filter(|(_, q)| q.q > self.cfg.gain_floor)
                .map(|(i, q)| (candidates[i], q))
        };
        match split {
            None => {
                self.log.record(depth, None);
                self.nodes[id as usize] = self.make_leaf(&samples);
            }
            Some((candidate, q)) => {
                self.log.record(depth, Some(q.q));
                let (l, r): (Vec<u32>, Vec<u32>) = samples.iter().partition(|&&i| {
                    part_feature(&self.data.parts[i as usize].part, &candidate, self.cfg.background_depth)
                        < candidate.tau
                });
                drop(samples);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[id as usize] = TreeNode::Split { candidate, left, right };
            }
        }
        id
    }
}

/// Growth seed of tree `tree` in a forest seeded with `seed`. With one tree
/// and a full subset, [`train_forest`] equals [`train_tree`] at this seed.
pub fn tree_seed(seed: u64, tree: usize) -> u64 {
    // SplitMix64 finaliser over (seed, tree).
    let mut z = seed ^ (tree as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn grow_tree(data: &TrainingData, samples: Vec<u32>, cfg: &ForestConfig, rng: ChaCha8Rng) -> (Tree, GrowthLog) {
    let mut grower = Grower {
        data,
        cfg,
        rng,
        nodes: Vec::new(),
        log: GrowthLog::default(),
    };
    grower.grow(samples, 0);
    (Tree { nodes: grower.nodes }, grower.log)
}

/// Grows one tree on all of `parts`.
pub fn train_tree(parts: &[&AnnotatedPart], cfg: &ForestConfig, seed: u64) -> Tree {
    assert!(!parts.is_empty(), "train_tree needs at least one part");
    let data = TrainingData::new(parts.to_vec());
    let samples = (0..parts.len() as u32).collect();
    grow_tree(&data, samples, cfg, ChaCha8Rng::seed_from_u64(seed)).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestMetadata {
    pub category: String,
    /// Part grid used for training; inference must cut parts the same way.
    pub parts: PartConfig,
    pub node_count: usize,
    pub link_count: usize,
    pub camera: CameraIntrinsics,
    pub dataset_digest: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub config: ForestConfig,
    pub meta: ForestMetadata,
}

/// Trains `cfg.trees` trees, each on its own seeded subset of the set.
pub fn train_forest(set: &TrainingSet, cfg: &ForestConfig) -> Result<(Forest, Vec<GrowthLog>), ForestError> {
    cfg.validate().map_err(|e| ForestError::Config(e.to_string()))?;
    let parts: Vec<&AnnotatedPart> = set.parts().collect();
    if parts.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    let data = TrainingData::new(parts);
    let n = data.parts.len();
    let subset = ((n as f64 * cfg.subset_fraction).round() as usize).clamp(1, n);
    let grown: Vec<(Tree, GrowthLog)> = (0..cfg.trees)
        .into_par_iter()
        .map(|t| {
            let seed = tree_seed(cfg.seed, t);
            // Subset draws use their own stream so growth sees a fresh generator.
            let mut draw = ChaCha8Rng::seed_from_u64(seed);
            draw.set_stream(1);
            let mut picked: Vec<u32> = sample_indices(&mut draw, n, subset).into_iter().map(|i| i as u32).collect();
            picked.sort_unstable();
            grow_tree(&data, picked, cfg, ChaCha8Rng::seed_from_u64(seed))
        })
        .collect();
    let (trees, logs) = grown.into_iter().unzip();
    let forest = Forest {
        trees,
        config: *cfg,
        meta: ForestMetadata {
            category: set.category.clone(),
            parts: set.config,
            node_count: set.node_count,
            link_count: set.link_count,
            camera: set.camera,
            dataset_digest: set.digest(),
        },
    };
    Ok((forest, logs))
}

/// Follows split decisions from the root to a leaf.
pub fn traverse(tree: &Tree, part: &Part, background: f64) -> u32 {
    let mut id = 0u32;
    loop {
        match &tree.nodes[id as usize] {
            TreeNode::Leaf(_) => return id,
            TreeNode::Split { candidate, left, right } => {
                id = if part_feature(part, candidate, background) < candidate.tau {
                    *left
                } else {
                    *right
                };
            }
        }
    }
}

impl Forest {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(FOREST_MAGIC);
        w.u32(FOREST_VERSION);
        w.str(&serde_json::to_string(&self.config).expect("config serialises"));
        w.str(&self.meta.category);
        w.u32(self.meta.parts.patch_size as u32);
        w.u32(self.meta.parts.stride as u32);
        w.f64(self.meta.parts.min_foreground);
        w.u32(self.meta.node_count as u32);
        w.u32(self.meta.link_count as u32);
        write_camera(&mut w, &self.meta.camera);
        w.u64(self.meta.dataset_digest);
        w.u32(self.trees.len() as u32);
        for tree in &self.trees {
            w.u32(tree.nodes.len() as u32);
            for node in &tree.nodes {
                match node {
                    TreeNode::Split { candidate, left, right } => {
                        w.u8(0);
                        for x in [candidate.u[0], candidate.u[1], candidate.v[0], candidate.v[1], candidate.tau] {
                            w.f64(x);
                        }
                        w.u32(*left);
                        w.u32(*right);
                    }
                    TreeNode::Leaf(leaf) => {
                        w.u8(1);
                        w.u32(leaf.sample_count);
                        w.u32(leaf.votes.len() as u32);
                        for v in &leaf.votes {
                            for x in v.offset.iter().chain(&v.rotation) {
                                w.f64(*x);
                            }
                        }
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ForestError> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != FOREST_MAGIC {
            return Err(ForestError::Version(format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != FOREST_VERSION {
            return Err(ForestError::Version(format!("file version {version}, expected {FOREST_VERSION}")));
        }
        let config: ForestConfig =
            serde_json::from_str(&r.str()?).map_err(|e| ForestError::Corrupt(format!("config block: {e}")))?;
        let meta = ForestMetadata {
            category: r.str()?,
            parts: PartConfig {
                patch_size: r.u32()? as usize,
                stride: r.u32()? as usize,
                min_foreground: r.f64()?,
            },
            node_count: r.u32()? as usize,
            link_count: r.u32()? as usize,
            camera: read_camera(&mut r)?,
            dataset_digest: r.u64()?,
        };
        let n_trees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(n_trees.min(r.remaining()));
        for _ in 0..n_trees {
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes.min(r.remaining()));
            for _ in 0..n_nodes {
                let node = match r.u8()? {
                    0 => {
                        let vals = [r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?];
                        let left = r.u32()?;
                        let right = r.u32()?;
                        if left as usize >= n_nodes || right as usize >= n_nodes {
                            return Err(ForestError::Corrupt("child index out of range".into()));
                        }
                        TreeNode::Split {
                            candidate: SplitCandidate {
                                u: [vals[0], vals[1]],
                                v: [vals[2], vals[3]],
                                tau: vals[4],
                            },
                            left,
                            right,
                        }
                    }
                    1 => {
                        let sample_count = r.u32()?;
                        let n_votes = r.u32()? as usize;
                        let mut votes = Vec::with_capacity(n_votes.min(r.remaining()));
                        for _ in 0..n_votes {
                            votes.push(Vote {
                                offset: [r.f64()?, r.f64()?, r.f64()?],
                                rotation: [r.f64()?, r.f64()?, r.f64()?],
                            });
                        }
                        TreeNode::Leaf(Leaf { votes, sample_count })
                    }
                    tag => return Err(ForestError::Corrupt(format!("unknown node tag {tag}"))),
                };
                nodes.push(node);
            }
            trees.push(Tree { nodes });
        }
        if !r.verify_checksum()? {
            return Err(ForestError::Corrupt("checksum mismatch".into()));
        }
        if r.remaining() != 0 {
            return Err(ForestError::Corrupt("trailing bytes".into()));
        }
        Ok(Forest { trees, config, meta })
    }

    pub fn digest(&self) -> u64 {
        checksum(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ForestError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
