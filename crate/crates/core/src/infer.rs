//! Test-time pose estimation.
//!
//! Parts are cut from the test depth image with the training grid, sent down
//! every tree, and their leaf votes are accumulated in a (u px, v px, z m)
//! Hough grid. Per-tree grids are averaged, smoothed with a separable
//! Gaussian and searched for local maxima. Only appearance ([`Part`]) is read
//! here; skeleton features never reach this module.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{InferenceConfig, PartConfig};
use crate::dataset::{grid_parts, Part};
use crate::forest::{traverse, Forest, Leaf, Tree};
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::render::DepthImage;
use crate::skeleton::wrap_angle;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("accumulator grids differ")]
    GridMismatch,
    #[error("no accumulators to aggregate")]
    NoAccumulators,
    #[error("image is {got_w}x{got_h}, forest camera is {want_w}x{want_h}")]
    ImageSize { got_w: u32, got_h: u32, want_w: u32, want_h: u32 },
    #[error("overlay: {0}")]
    Image(#[from] image::ImageError),
}

/// Bin layout of the Hough space. Bin (i, j, k) covers
/// `u ∈ [i·b_u, (i+1)·b_u)`, `v ∈ [j·b_v, …)`, `z ∈ [z_min + k·b_z, …)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoughGrid {
    pub bin: [f64; 3],
    pub z_min: f64,
    pub dims: [usize; 3],
}

impl HoughGrid {
    pub fn new(cam: &CameraIntrinsics, cfg: &InferenceConfig) -> Self {
        Self {
            bin: [cfg.bin_u, cfg.bin_v, cfg.bin_z],
            z_min: cfg.z_min,
            dims: [
                (cam.width as f64 / cfg.bin_u).ceil() as usize,
                (cam.height as f64 / cfg.bin_v).ceil() as usize,
                ((cfg.z_max - cfg.z_min) / cfg.bin_z).ceil() as usize,
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_of(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let f = [p[0] / self.bin[0], p[1] / self.bin[1], (p[2] - self.z_min) / self.bin[2]];
        let mut cell = [0usize; 3];
        for a in 0..3 {
            if !(f[a] >= 0.0) || f[a] >= self.dims[a] as f64 {
                return None;
            }
            cell[a] = f[a].floor() as usize;
        }
        Some(cell)
    }

    pub fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    pub fn cell(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        let k = index / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Continuous (u, v, z) at the centre of a cell.
    pub fn center(&self, c: [f64; 3]) -> [f64; 3] {
        [
            (c[0] + 0.5) * self.bin[0],
            (c[1] + 0.5) * self.bin[1],
            self.z_min + (c[2] + 0.5) * self.bin[2],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVote {
    pub bin: u32,
    pub rotation: [f64; 3],
    pub weight: f64,
}

/// Sparse vote density over a [`HoughGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct VoteAccumulator {
    pub grid: HoughGrid,
    pub weights: BTreeMap<u32, f64>,
    pub rotations: Vec<RotationVote>,
    pub cast: usize,
    pub dropped: usize,
}

impl VoteAccumulator {
    pub fn new(grid: HoughGrid) -> Self {
        Self {
            grid,
            weights: BTreeMap::new(),
            rotations: Vec::new(),
            cast: 0,
            dropped: 0,
        }
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn weight_at(&self, cell: [usize; 3]) -> f64 {
        self.weights.get(&(self.grid.index(cell) as u32)).copied().unwrap_or(0.0)
    }
}

/// Deposits every vote of `leaf` at `part.center + Δx` with `weight / |votes|`.
pub fn cast_votes(part: &Part, leaf: &Leaf, acc: &mut VoteAccumulator, weight: f64) {
    if leaf.votes.is_empty() {
        return;
    }
    let w = weight / leaf.votes.len() as f64;
    for vote in &leaf.votes {
        acc.cast += 1;
        let target = [
            part.center[0] + vote.offset[0],
            part.center[1] + vote.offset[1],
            part.center[2] + vote.offset[2],
        ];
        let Some(cell) = acc.grid.cell_of(target) else {
            acc.dropped += 1;
            continue;
        };
        let bin = acc.grid.index(cell) as u32;
        *acc.weights.entry(bin).or_insert(0.0) += w;
        acc.rotations.push(RotationVote {
            bin,
            rotation: vote.rotation,
            weight: w,
        });
    }
}

/// Per-bin arithmetic mean of the per-tree accumulators.
pub fn aggregate(per_tree: &[VoteAccumulator]) -> Result<VoteAccumulator, InferError> {
    let first = per_tree.first().ok_or(InferError::NoAccumulators)?;
    if per_tree.iter().any(|a| a.grid != first.grid) {
        return Err(InferError::GridMismatch);
    }
    let n = per_tree.len() as f64;
    let mut merged = VoteAccumulator::new(first.grid);
    for acc in per_tree {
        for (&bin, &w) in &acc.weights {
            *merged.weights.entry(bin).or_insert(0.0) += w;
        }
        merged.rotations.extend(acc.rotations.iter().map(|r| RotationVote { weight: r.weight / n, ..*r }));
        merged.cast += acc.cast;
        merged.dropped += acc.dropped;
    }
    for w in merged.weights.values_mut() {
        *w /= n;
    }
    Ok(merged)
}

pub fn extract_test_parts(depth: &DepthImage, cfg: &PartConfig) -> Vec<Part> {
    grid_parts(depth, cfg)
}

/// Votes of one tree for all parts.
pub fn tree_votes(tree: &Tree, parts: &[Part], grid: HoughGrid, background: f64) -> VoteAccumulator {
    let mut acc = VoteAccumulator::new(grid);
    for part in parts {
        let leaf = traverse(tree, part, background);
        if let Some(leaf) = tree.leaf(leaf) {
            cast_votes(part, leaf, &mut acc, 1.0);
        }
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseHypothesis {
    /// Object centre (SSC) in camera coordinates, metres.
    pub center_m: [f64; 3],
    /// Centre in the Hough space (u px, v px, z m).
    pub center_uvz: [f64; 3],
    pub euler_rad: [f64; 3],
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub parts: usize,
    pub votes_cast: usize,
    pub votes_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub hypotheses: Vec<PoseHypothesis>,
    pub diagnostics: Diagnostics,
}

/// Dense copy of the occupied region, padded for smoothing.
struct DenseBox {
    origin: [usize; 3],
    dims: [usize; 3],
    data: Vec<f64>,
}

impl DenseBox {
    fn from_sparse(acc: &VoteAccumulator, pad: usize) -> Option<Self> {
        let g = &acc.grid;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for &bin in acc.weights.keys() {
            let c = g.cell(bin as usize);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        if acc.weights.is_empty() {
            return None;
        }
        let origin: [usize; 3] = std::array::from_fn(|a| lo[a].saturating_sub(pad));
        let dims: [usize; 3] = std::array::from_fn(|a| (hi[a] + pad).min(g.dims[a] - 1) - origin[a] + 1);
        let mut b = DenseBox {
            origin,
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        };
        for (&bin, &w) in &acc.weights {
            let c = g.cell(bin as usize);
            let i = b.index([c[0] - origin[0], c[1] - origin[1], c[2] - origin[2]]);
            b.data[i] = w;
        }
        Some(b)
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn smooth(&mut self, sigma: f64) {
        if sigma <= 0.0 {
            return;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let strides = [1, self.dims[0], self.dims[0] * self.dims[1]];
        for axis in 0..3 {
            let mut out = vec![0.0; self.data.len()];
            let n = self.dims[axis] as isize;
            for (idx, o) in out.iter_mut().enumerate() {
                let pos = ((idx / strides[axis]) % self.dims[axis]) as isize;
                let mut acc = 0.0;
                for (t, k) in kernel.iter().enumerate() {
                    let q = pos + t as isize - radius;
                    if q >= 0 && q < n {
                        acc += k * self.data[(idx as isize + (q - pos) * strides[axis] as isize) as usize];
                    }
                }
                *o = acc;
            }
            self.data = out;
        }
    }

    /// Local maxima over a cube of half-width `r`. Equal neighbours earlier in
    /// memory order win, so plateaus yield one peak.
    fn peaks(&self, r: usize) -> Vec<(usize, f64)> {
        let d = self.dims;
        let mut out = Vec::new();
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    let idx = self.index([i, j, k]);
                    let v = self.data[idx];
                    if v <= 1e-15 {
                        continue;
                    }
                    let mut is_peak = true;
                    'scan: for kk in k.saturating_sub(r)..=(k + r).min(d[2] - 1) {
                        for jj in j.saturating_sub(r)..=(j + r).min(d[1] - 1) {
                            for ii in i.saturating_sub(r)..=(i + r).min(d[0] - 1) {
                                let nidx = self.index([ii, jj, kk]);
                                let w = self.data[nidx];
                                if w > v || (w == v && nidx < idx) {
                                    is_peak = false;
                                    break 'scan;
                                }
                            }
                        }
                    }
                    if is_peak {
                        out.push((idx, v));
                    }
                }
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }

    fn global(&self, local: [usize; 3]) -> [usize; 3] {
        std::array::from_fn(|a| local[a] + self.origin[a])
    }

    fn local(&self, index: usize) -> [usize; 3] {
        let i = index % self.dims[0];
        let j = (index / self.dims[0]) % self.dims[1];
        [i, j, index / (self.dims[0] * self.dims[1])]
    }
}

fn angle_gap(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| wrap_angle(a[k] - b[k]).abs()).fold(0.0, f64::max)
}

/// Rotation of the densest cluster among `votes`: the vote with the largest
/// weighted support within `kernel` seeds the cluster, and each angle is the
/// weighted circular mean over the cluster members.
pub fn rotation_mode(votes: &[RotationVote], kernel: f64) -> Option<[f64; 3]> {
    if votes.is_empty() {
        return None;
    }
    const MAX_SEEDS: usize = 1024;
    let step = votes.len().div_ceil(MAX_SEEDS);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for s in (0..votes.len()).step_by(step) {
        let support: f64 = votes
            .iter()
            .filter(|v| angle_gap(&v.rotation, &votes[s].rotation) <= kernel)
            .map(|v| v.weight)
            .sum();
        if support > best.0 {
            best = (support, s);
        }
    }
    let seed = votes[best.1].rotation;
    let mut sums = [[0.0f64; 2]; 3];
    for v in votes.iter().filter(|v| angle_gap(&v.rotation, &seed) <= kernel) {
        for k in 0..3 {
            sums[k][0] += v.weight * v.rotation[k].cos();
            sums[k][1] += v.weight * v.rotation[k].sin();
        }
    }
    Some(std::array::from_fn(|k| {
        if sums[k][0] == 0.0 && sums[k][1] == 0.0 {
            seed[k]
        } else {
            sums[k][1].atan2(sums[k][0])
        }
    }))
}

/// Per-angle circular mean, weighted.
pub fn circular_mean(votes: &[RotationVote]) -> Option<[f64; 3]> {
    rotation_mode(votes, PI)
}

/// Turns a merged accumulator into scored hypotheses.
pub fn find_modes(acc: &VoteAccumulator, cam: &CameraIntrinsics, cfg: &InferenceConfig) -> Vec<PoseHypothesis> {
    let pad = (3.0 * cfg.smoothing_sigma).ceil() as usize + cfg.nms_radius;
    let Some(mut dense) = DenseBox::from_sparse(acc, pad) else {
        return Vec::new();
    };
    dense.smooth(cfg.smoothing_sigma);
    let peaks = dense.peaks(cfg.nms_radius);

    // Rotation votes grouped by global bin for neighbourhood lookup.
    let mut by_bin: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in acc.rotations.iter().enumerate() {
        by_bin.entry(r.bin).or_default().push(i);
    }
    let r = cfg.nms_radius;
    let grid = acc.grid;
    peaks
        .into_iter()
        .take(cfg.top_k)
        .map(|(idx, score)| {
            let local = dense.local(idx);
            let d = dense.dims;
            let mut wsum = 0.0;
            let mut centroid = [0.0; 3];
            let mut votes = Vec::new();
            for kk in local[2].saturating_sub(r)..=(local[2] + r).min(d[2] - 1) {
                for jj in local[1].saturating_sub(r)..=(local[1] + r).min(d[1] - 1) {
                    for ii in local[0].saturating_sub(r)..=(local[0] + r).min(d[0] - 1) {
                        let w = dense.data[dense.index([ii, jj, kk])];
                        let g = dense.global([ii, jj, kk]);
                        let c = grid.center([g[0] as f64, g[1] as f64, g[2] as f64]);
                        for a in 0..3 {
                            centroid[a] += w * c[a];
                        }
                        wsum += w;
                        if let Some(ids) = by_bin.get(&(grid.index(g) as u32)) {
                            votes.extend(ids.iter().map(|&i| acc.rotations[i]));
                        }
                    }
                }
            }
            let uvz = if wsum > 0.0 {
                centroid.map(|c| c / wsum)
            } else {
                let g = dense.global(local);
                grid.center([g[0] as f64, g[1] as f64, g[2] as f64])
            };
            let center = cam.back_project(uvz[0], uvz[1], uvz[2]);
            PoseHypothesis {
                center_m: [center.x, center.y, center.z],
                center_uvz: uvz,
                euler_rad: rotation_mode(&votes, cfg.rotation_kernel).unwrap_or([0.0; 3]),
                score,
            }
        })
        .collect()
}

/// Full test-time pipeline on one depth image.
pub fn estimate_pose(depth: &DepthImage, forest: &Forest, cfg: &InferenceConfig) -> Result<InferenceResult, InferError> {
    let cam = &forest.meta.camera;
    if depth.width() != cam.width || depth.height() != cam.height {
        return Err(InferError::ImageSize {
            got_w: depth.width(),
            got_h: depth.height(),
            want_w: cam.width,
            want_h: cam.height,
        });
    }
    let parts = extract_test_parts(depth, &forest.meta.parts);
    let mut diagnostics = Diagnostics {
        parts: parts.len(),
        ..Diagnostics::default()
    };
    if parts.is_empty() {
        return Ok(InferenceResult {
            hypotheses: Vec::new(),
            diagnostics,
        });
    }
    let grid = HoughGrid::new(cam, cfg);
    let background = forest.config.background_depth;
    let per_tree: Vec<VoteAccumulator> = forest
        .trees
        .par_iter()
        .map(|t| tree_votes(t, &parts, grid, background))
        .collect();
    let merged = aggregate(&per_tree)?;
    diagnostics.votes_cast = merged.cast;
    diagnostics.votes_dropped = merged.dropped;
    Ok(InferenceResult {
        hypotheses: find_modes(&merged, cam, cfg),
        diagnostics,
    })
}

impl InferenceResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialises")
    }
}

/// Grey-scale depth with a cross at each hypothesis centre and a square
/// marking its Hough neighbourhood. The top hypothesis is red, others yellow.
pub fn overlay(depth: &DepthImage, hypotheses: &[PoseHypothesis], cfg: &InferenceConfig) -> RgbImage {
    let (w, h) = (depth.width(), depth.height());
    let fg: Vec<f32> = depth.pixels().iter().copied().filter(|d| d.is_finite()).collect();
    let lo = fg.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = fg.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut img = RgbImage::from_fn(w, h, |x, y| {
        let d = depth.pixels()[(y * w + x) as usize];
        if d.is_finite() {
            let t = if hi > lo { (d - lo) / (hi - lo) } else { 0.0 };
            let g = (230.0 - 180.0 * t) as u8;
            Rgb([g, g, g])
        } else {
            Rgb([0, 0, 0])
        }
    });
    let mut put = |x: i64, y: i64, c: Rgb<u8>| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, c);
        }
    };
    for (n, hyp) in hypotheses.iter().enumerate().rev() {
        let color = if n == 0 { Rgb([255, 0, 0]) } else { Rgb([255, 210, 0]) };
        let (u, v) = (hyp.center_uvz[0].round() as i64, hyp.center_uvz[1].round() as i64);
        for d in -4..=4 {
            put(u + d, v, color);
            put(u, v + d, color);
        }
        let half = ((cfg.nms_radius as f64 + 0.5) * cfg.bin_u.max(cfg.bin_v)).round() as i64;
        for d in -half..=half {
            put(u + d, v - half, color);
            put(u + d, v + half, color);
            put(u - half, v + d, color);
            put(u + half, v + d, color);
        }
    }
    img
}

pub fn save_overlay(path: &Path, depth: &DepthImage, hypotheses: &[PoseHypothesis], cfg: &InferenceConfig) -> Result<(), InferError> {
    overlay(depth, hypotheses, cfg).save(path)?;
    Ok(())
}

/// Projected image position of a camera-space point, for callers that want to
/// compare hypotheses with annotations.
pub fn project_center(cam: &CameraIntrinsics, p: &Vec3) -> [f64; 3] {
    let (u, v, z) = cam.project(p);
    [u, v, z]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Patch;
    use crate::forest::{SplitCandidate, TreeNode, Vote};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 32.0, 24.0, 64, 48).unwrap()
    }

    fn cfg() -> InferenceConfig {
        InferenceConfig {
            bin_u: 2.0,
            bin_v: 2.0,
            bin_z: 0.1,
            z_min: 0.5,
            z_max: 3.0,
            ..InferenceConfig::default()
        }
    }

    fn part_at(u: f64, v: f64, z: f64) -> Part {
        Part {
            center: [u, v, z],
            patch: Patch::new(4, vec![z as f32; 16]),
        }
    }

    fn leaf(offsets: &[[f64; 3]]) -> Leaf {
        Leaf {
            votes: offsets.iter().map(|&o| Vote { offset: o, rotation: [0.1, 0.2, 0.3] }).collect(),
            sample_count: offsets.len() as u32,
        }
    }

    #[test]
    fn zero_offset_lands_in_part_bin() {
        let grid = HoughGrid::new(&cam(), &cfg());
        let mut acc = VoteAccumulator::new(grid);
        let p = part_at(10.3, 20.7, 1.23);
        cast_votes(&p, &leaf(&[[0.0; 3]]), &mut acc, 1.0);
        assert_eq!(acc.weights.len(), 1);
        assert_eq!(acc.weight_at(grid.cell_of(p.center).unwrap()), 1.0);
        assert_eq!(grid.cell_of(p.center).unwrap(), [5, 10, 7]);
    }

    #[test]
    fn votes_add_and_out_of_grid_drops_are_counted() {
        let grid = HoughGrid::new(&cam(), &cfg());
        let mut acc = VoteAccumulator::new(grid);
        cast_votes(&part_at(10.0, 10.0, 1.0), &leaf(&[[0.0; 3]]), &mut acc, 0.5);
        cast_votes(&part_at(10.5, 10.5, 1.0), &leaf(&[[0.0; 3]]), &mut acc, 0.25);
        assert_eq!(acc.weight_at([5, 5, 5]), 0.75);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut expected = 0.75;
        for _ in 0..200 {
            let offsets: Vec<[f64; 3]> = (0..rng.gen_range(1..6))
                .map(|_| [rng.gen_range(-80.0..80.0), rng.gen_range(-60.0..60.0), rng.gen_range(-1.0..1.0)])
                .collect();
            let p = part_at(rng.gen_range(0.0..64.0), rng.gen_range(0.0..48.0), rng.gen_range(0.8..2.5));
            for o in &offsets {
                let t = [p.center[0] + o[0], p.center[1] + o[1], p.center[2] + o[2]];
                if grid.cell_of(t).is_some() {
                    expected += 1.0 / offsets.len() as f64;
                }
            }
            cast_votes(&p, &leaf(&offsets), &mut acc, 1.0);
        }
        assert!((acc.total_weight() - expected).abs() < 1e-9);
        assert!(acc.dropped > 0);
        assert_eq!(acc.rotations.len(), acc.cast - acc.dropped);
    }

    #[test]
    fn aggregate_is_the_mean() {
        let grid = HoughGrid::new(&cam(), &cfg());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let accs: Vec<VoteAccumulator> = (0..4)
            .map(|_| {
                let mut a = VoteAccumulator::new(grid);
                for _ in 0..50 {
                    a.weights.insert(rng.gen_range(0..grid.len() as u32 / 50), rng.gen_range(0.0..2.0));
                }
                a
            })
            .collect();
        let merged = aggregate(&accs).unwrap();
        for (bin, w) in &merged.weights {
            let mean = accs.iter().map(|a| a.weights.get(bin).copied().unwrap_or(0.0)).sum::<f64>() / 4.0;
            assert!((w - mean).abs() < 1e-12);
        }
        assert_eq!(aggregate(&accs[..1]).unwrap().weights, accs[0].weights);
        assert_eq!(aggregate(&[accs[1].clone(), accs[1].clone()]).unwrap().weights, accs[1].weights);
        let other = VoteAccumulator::new(HoughGrid { z_min: 0.0, ..grid });
        assert!(matches!(aggregate(&[accs[0].clone(), other]), Err(InferError::GridMismatch)));
    }

    #[test]
    fn single_peak_found_with_rotation() {
        let c = cfg();
        let grid = HoughGrid::new(&cam(), &c);
        let mut acc = VoteAccumulator::new(grid);
        for _ in 0..10 {
            cast_votes(&part_at(31.0, 21.0, 1.55), &leaf(&[[0.0; 3]]), &mut acc, 1.0);
        }
        let hyps = find_modes(&acc, &cam(), &c);
        assert_eq!(hyps.len(), 1);
        let h = hyps[0];
        let cell = grid.cell_of([31.0, 21.0, 1.55]).unwrap();
        let expect = grid.center(cell.map(|x| x as f64));
        for a in 0..3 {
            assert!((h.center_uvz[a] - expect[a]).abs() < 1e-9);
        }
        for (a, b) in h.euler_rad.iter().zip([0.1, 0.2, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_mode_ignores_flipped_minority() {
        let mk = |r: [f64; 3], w: f64| RotationVote { bin: 0, rotation: r, weight: w };
        let votes = vec![
            mk([0.0, 0.0, 3.1], 1.0),
            mk([0.0, 0.0, -3.1], 1.0),
            mk([0.0, 0.0, 0.0], 1.5),
        ];
        let r = rotation_mode(&votes, 0.35).unwrap();
        assert!((wrap_angle(r[2] - PI)).abs() < 1e-9, "circular mean across the seam, got {r:?}");
        let mean = circular_mean(&[mk([1.0, 0.0, 0.0], 1.0), mk([2.0, 0.0, 0.0], 1.0)]).unwrap();
        assert!((mean[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn traverse_matches_replay() {
        // Random depth-3 tree; the replay recomputes each comparison by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut nodes = Vec::new();
        for id in 0..7u32 {
            nodes.push(TreeNode::Split {
                candidate: SplitCandidate {
                    u: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
                    v: [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)],
                    tau: rng.gen_range(-1.0..1.0),
                },
                left: 2 * id + 1,
                right: 2 * id + 2,
            });
        }
        for _ in 0..8 {
            nodes.push(TreeNode::Leaf(leaf(&[[0.0; 3]])));
        }
        let tree = Tree { nodes };
        for _ in 0..100 {
            let data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.5f32..3.0)).collect();
            let part = Part {
                center: [0.0, 0.0, data[4 * 8 + 4] as f64],
                patch: Patch::new(8, data),
            };
            let mut id = 0usize;
            while let TreeNode::Split { candidate, left, right } = &tree.nodes[id] {
                let f = crate::forest::split_feature(candidate.u, candidate.v, &part.patch, (4, 4), 10.0).unwrap();
                id = if f < candidate.tau { *left as usize } else { *right as usize };
            }
            assert_eq!(traverse(&tree, &part, 10.0) as usize, id);
        }
    }
}
