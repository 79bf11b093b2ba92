//! Skeleton graphs and the privileged part features derived from them.
//!
//! Skeletons are input data (one JSON file per instance). From a skeleton we
//! compute the category's semantically selected centre (SSC), project nodes
//! into each rendered view, and derive the per-view link-angle vector `a` and
//! the per-part node-offset matrix `s`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{center_of_mass, CameraIntrinsics, GeometryError, Mesh, RigidPose, Vec3};
use crate::render::Viewpoint;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton schema error: {0}")]
    Schema(String),
    #[error("skeleton topology mismatch in instances {offending:?}: {reason}")]
    TopologyMismatch { offending: Vec<usize>, reason: String },
    #[error("no instances given")]
    NoInstances,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    label: u32,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SkeletonFile {
    nodes: Vec<NodeRecord>,
    links: Vec<[u32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    project_mask: Option<Vec<u32>>,
}

/// Node positions indexed by label, plus links stored as `(low, high)` label pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    nodes: Vec<Vec3>,
    links: Vec<(u32, u32)>,
    project_mask: Option<Vec<u32>>,
}

impl SkeletonGraph {
    /// `nodes[i]` is the position of label `i`. Links are normalised to `(low, high)`.
    pub fn new(nodes: Vec<Vec3>, links: Vec<(u32, u32)>, project_mask: Option<Vec<u32>>) -> Result<Self, SkeletonError> {
        let n = nodes.len() as u32;
        if n == 0 {
            return Err(SkeletonError::Schema("skeleton has no nodes".into()));
        }
        let mut seen = BTreeSet::new();
        let mut normalised = Vec::with_capacity(links.len());
        for (a, b) in links {
            if a >= n || b >= n {
                return Err(SkeletonError::Schema(format!(
                    "link ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(SkeletonError::Schema(format!("self-link on node {a}")));
            }
            let link = (a.min(b), a.max(b));
            if !seen.insert(link) {
                return Err(SkeletonError::Schema(format!("duplicate link {link:?}")));
            }
            normalised.push(link);
        }
        if let Some(mask) = &project_mask {
            let mut mask_seen = BTreeSet::new();
            for &m in mask {
                if m >= n || !mask_seen.insert(m) {
                    return Err(SkeletonError::Schema(format!("bad project_mask label {m}")));
                }
            }
        }
        Ok(Self {
            nodes,
            links: normalised,
            project_mask,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn node(&self, label: u32) -> Vec3 {
        self.nodes[label as usize]
    }

    pub fn links(&self) -> &[(u32, u32)] {
        &self.links
    }

    pub fn project_mask(&self) -> Option<&[u32]> {
        self.project_mask.as_deref()
    }

    pub fn with_project_mask(mut self, mask: Option<Vec<u32>>) -> Result<Self, SkeletonError> {
        self.project_mask = mask;
        Self::new(self.nodes, self.links, self.project_mask)
    }

    /// Reorders links to match `order`, which must be the same set.
    pub fn with_link_order(mut self, order: &[(u32, u32)]) -> Result<Self, SkeletonError> {
        let mine: BTreeSet<_> = self.links.iter().copied().collect();
        let theirs: BTreeSet<_> = order.iter().copied().collect();
        if mine != theirs {
            return Err(SkeletonError::TopologyMismatch {
                offending: vec![0],
                reason: "link sets differ".into(),
            });
        }
        self.links = order.to_vec();
        Ok(self)
    }

    /// Labels that get projected: the mask if present, otherwise all nodes.
    pub fn projected_labels(&self) -> Vec<u32> {
        match &self.project_mask {
            Some(mask) => {
                let mut m = mask.clone();
                m.sort_unstable();
                m
            }
            None => (0..self.nodes.len() as u32).collect(),
        }
    }

    pub fn transformed(&self, pose: &RigidPose) -> SkeletonGraph {
        SkeletonGraph {
            nodes: self.nodes.iter().map(|p| pose.transform_point(p)).collect(),
            links: self.links.clone(),
            project_mask: self.project_mask.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = SkeletonFile {
            nodes: self
                .nodes
                .iter()
                .enumerate()
                .map(|(i, p)| NodeRecord {
                    label: i as u32,
                    x: p.x,
                    y: p.y,
                    z: p.z,
                })
                .collect(),
            links: self.links.iter().map(|&(a, b)| [a, b]).collect(),
            project_mask: self.project_mask.clone(),
        };
        serde_json::to_string_pretty(&file).expect("skeleton serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, SkeletonError> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        let n = file.nodes.len();
        let mut slots: Vec<Option<Vec3>> = vec![None; n];
        for rec in &file.nodes {
            let idx = rec.label as usize;
            if idx >= n {
                return Err(SkeletonError::Schema(format!(
                    "labels must be dense 0..{n}; found {}",
                    rec.label
                )));
            }
            if slots[idx].is_some() {
                return Err(SkeletonError::Schema(format!("duplicate label {}", rec.label)));
            }
            let p = Vec3::new(rec.x, rec.y, rec.z);
            if !p.iter().all(|v| v.is_finite()) {
                return Err(SkeletonError::Schema(format!("node {} is not finite", rec.label)));
            }
            slots[idx] = Some(p);
        }
        let nodes = slots.into_iter().map(|p| p.expect("dense labels")).collect();
        let links = file.links.iter().map(|l| (l[0], l[1])).collect();
        Self::new(nodes, links, file.project_mask)
    }
}

pub fn load_skeleton(path: &Path) -> Result<SkeletonGraph, SkeletonError> {
    SkeletonGraph::from_json(&fs::read_to_string(path)?)
}

pub fn save_skeleton(graph: &SkeletonGraph, path: &Path) -> Result<(), SkeletonError> {
    fs::write(path, graph.to_json())?;
    Ok(())
}

/// Checks that every graph shares node count and link set; returns the first
/// graph's link order, which all instances should adopt.
pub fn validate_category_topology(graphs: &[SkeletonGraph]) -> Result<Vec<(u32, u32)>, SkeletonError> {
    let first = graphs.first().ok_or(SkeletonError::NoInstances)?;
    let reference: BTreeSet<_> = first.links.iter().copied().collect();
    let mut offending = Vec::new();
    let mut reasons = Vec::new();
    for (i, g) in graphs.iter().enumerate().skip(1) {
        if g.node_count() != first.node_count() {
            offending.push(i);
            reasons.push(format!("instance {i} has {} nodes, expected {}", g.node_count(), first.node_count()));
        } else if g.links.iter().copied().collect::<BTreeSet<_>>() != reference {
            offending.push(i);
            reasons.push(format!("instance {i} has a different link set"));
        }
    }
    if offending.is_empty() {
        Ok(first.links.clone())
    } else {
        Err(SkeletonError::TopologyMismatch {
            offending,
            reason: reasons.join("; "),
        })
    }
}

/// Output of [`compute_ssc`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SscResult {
    /// Selected label(s). More than one entry means a tie, resolved by averaging.
    pub labels: Vec<u32>,
    /// Per-instance nearest-to-COM label, in input order.
    pub nearest_labels: Vec<u32>,
    /// Per-instance SSC in the instance's model frame.
    pub points: Vec<[f64; 3]>,
    pub rule: String,
}

pub const SSC_RULE: &str = "mode of per-instance nearest-to-COM node labels; ties averaged per instance";

impl SscResult {
    /// Primary label (lowest among tied labels).
    pub fn label(&self) -> u32 {
        self.labels[0]
    }

    pub fn point(&self, instance: usize) -> Vec3 {
        let p = self.points[instance];
        Vec3::new(p[0], p[1], p[2])
    }

    /// SSC of any topology-compatible skeleton under the selected labels.
    pub fn point_for(&self, graph: &SkeletonGraph) -> Vec3 {
        let sum: Vec3 = self.labels.iter().map(|&l| graph.node(l)).sum();
        sum / self.labels.len() as f64
    }

    /// Model-from-SSC frame: origin at the SSC, axes parallel to the model axes.
    pub fn frame(&self, instance: usize) -> RigidPose {
        RigidPose::from_translation(self.point(instance))
    }
}

/// Picks the label most often nearest to the instance COMs.
pub fn compute_ssc(instances: &[(Mesh, SkeletonGraph)]) -> Result<SscResult, SkeletonError> {
    if instances.is_empty() {
        return Err(SkeletonError::NoInstances);
    }
    let graphs: Vec<SkeletonGraph> = instances.iter().map(|(_, g)| g.clone()).collect();
    validate_category_topology(&graphs)?;

    let mut nearest_labels = Vec::with_capacity(instances.len());
    for (mesh, graph) in instances {
        let com = center_of_mass(mesh)?;
        let (label, _) = graph
            .nodes
            .iter()
            .enumerate()
            .map(|(i, p)| (i as u32, (p - com).norm()))
            .fold((0u32, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        nearest_labels.push(label);
    }

    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in &nearest_labels {
        *counts.entry(l).or_default() += 1;
    }
    let top = *counts.values().max().expect("at least one instance");
    let labels: Vec<u32> = counts.iter().filter(|(_, &c)| c == top).map(|(&l, _)| l).collect();

    let mut result = SscResult {
        labels,
        nearest_labels,
        points: Vec::new(),
        rule: SSC_RULE.to_string(),
    };
    result.points = graphs
        .iter()
        .map(|g| {
            let p = result.point_for(g);
            [p.x, p.y, p.z]
        })
        .collect();
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedNode {
    pub label: u32,
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub visible: bool,
}

/// Projected nodes (mask order) and the links whose endpoints were both projected.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSkeleton {
    pub nodes: Vec<ProjectedNode>,
    /// Links as indices into `nodes`, oriented low label to high label.
    pub links: Vec<(usize, usize)>,
}

impl ProjectedSkeleton {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Projects skeleton nodes through `view` and the pinhole model. Visibility is
/// image bounds plus positive depth; the depth map is not consulted.
pub fn project_skeleton(graph: &SkeletonGraph, view: &Viewpoint, cam: &CameraIntrinsics) -> ProjectedSkeleton {
    let labels = graph.projected_labels();
    let mut slot = vec![usize::MAX; graph.node_count()];
    let nodes: Vec<ProjectedNode> = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            slot[label as usize] = i;
            let p = view.pose.transform_point(&graph.node(label));
            let (u, v, z) = cam.project(&p);
            let visible = z > 0.0 && cam.contains(u, v);
            ProjectedNode {
                label,
                u,
                v,
                z,
                visible,
            }
        })
        .collect();
    let links = graph
        .links
        .iter()
        .filter_map(|&(a, b)| {
            let (ia, ib) = (slot[a as usize], slot[b as usize]);
            (ia != usize::MAX && ib != usize::MAX).then_some((ia, ib))
        })
        .collect();
    ProjectedSkeleton { nodes, links }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkAngle {
    /// Index into [`ProjectedSkeleton::links`].
    pub link: usize,
    pub angle: f64,
    /// The projected link had zero length; `angle` is 0.
    pub degenerate: bool,
}

/// The per-view vector `a`: image-plane angles of the visible links.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinkAngleVector {
    pub entries: Vec<LinkAngle>,
}

impl LinkAngleVector {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.angle).collect()
    }

    /// Angle of link `link`, if it was visible in this view.
    pub fn angle_of(&self, link: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.link == link).map(|e| e.angle)
    }
}

/// Wraps into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

pub fn link_angles(proj: &ProjectedSkeleton) -> LinkAngleVector {
    let entries = proj
        .links
        .iter()
        .enumerate()
        .filter_map(|(i, &(a, b))| {
            let (na, nb) = (&proj.nodes[a], &proj.nodes[b]);
            if !(na.visible && nb.visible) {
                return None;
            }
            let (du, dv) = (nb.u - na.u, nb.v - na.v);
            let degenerate = du == 0.0 && dv == 0.0;
            let angle = if degenerate { 0.0 } else { wrap_angle(dv.atan2(du)) };
            Some(LinkAngle {
                link: i,
                angle,
                degenerate,
            })
        })
        .collect();
    LinkAngleVector { entries }
}

/// The per-part matrix `s`: node minus part centre in (px, px, m), one row per projected node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NodeOffsetMatrix {
    pub rows: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

impl NodeOffsetMatrix {
    pub fn row_count(&self) -> usize {
        self.rows.len()
    }
}

pub fn node_offsets(center: [f64; 3], proj: &ProjectedSkeleton) -> NodeOffsetMatrix {
    let mut rows = Vec::with_capacity(proj.nodes.len());
    let mut valid = Vec::with_capacity(proj.nodes.len());
    for n in &proj.nodes {
        rows.push([n.u - center[0], n.v - center[1], n.z - center[2]]);
        valid.push(n.visible);
    }
    NodeOffsetMatrix { rows, valid }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::box_mesh;
    use proptest::prelude::*;

    fn chain(n: usize) -> SkeletonGraph {
        let nodes = (0..n).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        let links = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
        SkeletonGraph::new(nodes, links, None).unwrap()
    }

    fn projected(points: &[(f64, f64)], links: &[(usize, usize)]) -> ProjectedSkeleton {
        ProjectedSkeleton {
            nodes: points
                .iter()
                .enumerate()
                .map(|(i, &(u, v))| ProjectedNode {
                    label: i as u32,
                    u,
                    v,
                    z: 2.0,
                    visible: true,
                })
                .collect(),
            links: links.to_vec(),
        }
    }

    #[test]
    fn two_node_file_loads() {
        let g = SkeletonGraph::from_json(r#"{"nodes":[{"label":0,"x":0,"y":0,"z":0},{"label":1,"x":1,"y":0,"z":0}],"links":[[1,0]]}"#).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.links(), &[(0, 1)]);
    }

    #[test]
    fn schema_errors() {
        let dangling = r#"{"nodes":[{"label":0,"x":0,"y":0,"z":0},{"label":1,"x":1,"y":0,"z":0},{"label":2,"x":1,"y":1,"z":0}],"links":[[0,5]]}"#;
        assert!(matches!(SkeletonGraph::from_json(dangling), Err(SkeletonError::Schema(_))));
        let dup = r#"{"nodes":[{"label":0,"x":0,"y":0,"z":0},{"label":0,"x":1,"y":0,"z":0}],"links":[]}"#;
        assert!(matches!(SkeletonGraph::from_json(dup), Err(SkeletonError::Schema(_))));
        let sparse = r#"{"nodes":[{"label":0,"x":0,"y":0,"z":0},{"label":2,"x":1,"y":0,"z":0}],"links":[]}"#;
        assert!(matches!(SkeletonGraph::from_json(sparse), Err(SkeletonError::Schema(_))));
    }

    #[test]
    fn json_round_trip() {
        let g = chain(4).with_project_mask(Some(vec![0, 2])).unwrap();
        assert_eq!(SkeletonGraph::from_json(&g.to_json()).unwrap(), g);
    }

    #[test]
    fn topology_checks() {
        let a = chain(5);
        let moved = a.transformed(&RigidPose::from_translation(Vec3::new(0.3, 0.0, 1.0)));
        assert_eq!(validate_category_topology(&[a.clone(), moved]).unwrap(), a.links().to_vec());
        match validate_category_topology(&[a.clone(), chain(4), a.clone()]) {
            Err(SkeletonError::TopologyMismatch { offending, .. }) => assert_eq!(offending, vec![1]),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn single_instance_ssc_is_nearest_node() {
        let mesh = box_mesh(Vec3::new(-0.1, -0.1, -0.1), Vec3::new(0.1, 0.1, 0.1));
        let g = SkeletonGraph::new(
            vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.05, 0.0, 0.0), Vec3::new(0.0, -0.5, 0.0)],
            vec![(0, 1), (1, 2)],
            None,
        )
        .unwrap();
        let ssc = compute_ssc(&[(mesh, g)]).unwrap();
        assert_eq!(ssc.labels, vec![1]);
        assert_eq!(ssc.point(0), Vec3::new(0.05, 0.0, 0.0));
    }

    #[test]
    fn empty_ssc_input_errors() {
        assert!(matches!(compute_ssc(&[]), Err(SkeletonError::NoInstances)));
    }

    #[test]
    fn on_axis_projection_and_behind_camera() {
        let cam = CameraIntrinsics::default();
        let g = SkeletonGraph::new(vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)], vec![(0, 1)], None).unwrap();
        let view = Viewpoint {
            pose: RigidPose::identity(),
            index: 0,
        };
        let p = project_skeleton(&g, &view, &cam);
        assert_eq!((p.nodes[0].u, p.nodes[0].v, p.nodes[0].z), (cam.cx, cam.cy, 1.0));
        assert!(p.nodes[0].visible);
        assert!(!p.nodes[1].visible);
        assert!(link_angles(&p).is_empty());
    }

    #[test]
    fn simple_link_angles() {
        let p = projected(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)], &[(0, 1), (0, 2)]);
        let a = link_angles(&p);
        assert_eq!(a.angles(), vec![0.0, PI / 2.0]);
        let degenerate = link_angles(&projected(&[(3.0, 3.0), (3.0, 3.0)], &[(0, 1)]));
        assert!(degenerate.entries[0].degenerate);
        assert_eq!(degenerate.entries[0].angle, 0.0);
    }

    #[test]
    fn node_offsets_by_hand() {
        let p = projected(&[(10.0, 20.0), (14.0, 17.0), (3.5, 40.0)], &[]);
        let s = node_offsets([10.0, 20.0, 1.5], &p);
        assert_eq!(s.rows, vec![[0.0, 0.0, 0.5], [4.0, -3.0, 0.5], [-6.5, 20.0, 0.5]]);
        let t = node_offsets([12.0, 19.0, 1.5], &p);
        for (r0, r1) in s.rows.iter().zip(&t.rows) {
            assert_eq!(r1[0], r0[0] - 2.0);
            assert_eq!(r1[1], r0[1] + 1.0);
        }
    }

    proptest! {
        #[test]
        fn angles_scale_invariant(k in 0.05f64..20.0, pu in -100.0f64..100.0, pv in -100.0f64..100.0, seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..6).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
            let links = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5)];
            let scaled: Vec<(f64, f64)> = pts.iter().map(|&(u, v)| (pu + k * (u - pu), pv + k * (v - pv))).collect();
            let a = link_angles(&projected(&pts, &links));
            let b = link_angles(&projected(&scaled, &links));
            for (x, y) in a.angles().iter().zip(b.angles()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn angles_rotation_equivariant(phi in -PI..PI, seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..5).map(|_| (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0))).collect();
            let links = [(0, 1), (1, 2), (2, 3), (3, 4)];
            let (s, c) = phi.sin_cos();
            let (pu, pv) = (20.0, 30.0);
            let rotated: Vec<(f64, f64)> = pts.iter().map(|&(u, v)| {
                let (du, dv) = (u - pu, v - pv);
                (pu + c * du - s * dv, pv + s * du + c * dv)
            }).collect();
            let a = link_angles(&projected(&pts, &links));
            let b = link_angles(&projected(&rotated, &links));
            for (x, y) in a.angles().iter().zip(b.angles()) {
                let diff = wrap_angle(y - wrap_angle(x + phi));
                prop_assert!(diff.abs() < 1e-9);
            }
        }
    }
}
