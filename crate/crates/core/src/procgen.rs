//! Procedural box-assembly categories with exact skeletons.
//!
//! A table is a top slab, four legs and a modesty panel between the two rear
//! legs. The panel breaks the half-turn symmetry about the vertical axis so
//! that every view has a unique rotation. Models are centred on their
//! bounding box with +z up.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;
use crate::geometry::{box_mesh, Mesh, Vec3};
use crate::skeleton::SkeletonGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryKind {
    Table,
}

impl FromStr for CategoryKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "table" | "tables" => Ok(CategoryKind::Table),
            other => Err(ConfigError::Invalid(format!("unknown procedural category '{other}' (supported: table)"))),
        }
    }
}

impl fmt::Display for CategoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CategoryKind::Table => f.write_str("table"),
        }
    }
}

/// Table proportions in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableParams {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub top_thickness: f64,
    pub leg_thickness: f64,
    /// Gap between the table edge and the outer leg face.
    pub leg_inset: f64,
    pub panel_height: f64,
}

pub const PANEL_THICKNESS: f64 = 0.02;

impl TableParams {
    pub const LENGTH: (f64, f64) = (1.1, 1.5);
    /// Width as a fraction of length, so tops are never close to square.
    pub const WIDTH_RATIO: (f64, f64) = (0.5, 0.62);
    pub const HEIGHT: (f64, f64) = (0.68, 0.8);
    pub const TOP_THICKNESS: (f64, f64) = (0.03, 0.06);
    pub const LEG_THICKNESS: (f64, f64) = (0.04, 0.08);
    pub const LEG_INSET: (f64, f64) = (0.0, 0.1);
    pub const PANEL_HEIGHT: (f64, f64) = (0.2, 0.4);

    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| rng.gen_range(lo..hi);
        let length = draw(Self::LENGTH);
        Self {
            length,
            width: length * draw(Self::WIDTH_RATIO),
            height: draw(Self::HEIGHT),
            top_thickness: draw(Self::TOP_THICKNESS),
            leg_thickness: draw(Self::LEG_THICKNESS),
            leg_inset: draw(Self::LEG_INSET),
            panel_height: draw(Self::PANEL_HEIGHT),
        }
    }

    /// Leg axis offsets from the centre along x and y.
    pub fn leg_offsets(&self) -> (f64, f64) {
        (
            self.length / 2.0 - self.leg_inset - self.leg_thickness / 2.0,
            self.width / 2.0 - self.leg_inset - self.leg_thickness / 2.0,
        )
    }

    /// Height of the underside of the top.
    pub fn underside(&self) -> f64 {
        self.height / 2.0 - self.top_thickness
    }

    pub fn leg_length(&self) -> f64 {
        self.height - self.top_thickness
    }

    pub fn mesh(&self) -> Mesh {
        let (l2, w2, h2) = (self.length / 2.0, self.width / 2.0, self.height / 2.0);
        let (lx, ly) = self.leg_offsets();
        let t2 = self.leg_thickness / 2.0;
        let under = self.underside();

        let mut mesh = box_mesh(Vec3::new(-l2, -w2, under), Vec3::new(l2, w2, h2));
        for (sx, sy) in LEG_SIGNS {
            let (x, y) = (sx * lx, sy * ly);
            mesh.merge(&box_mesh(Vec3::new(x - t2, y - t2, -h2), Vec3::new(x + t2, y + t2, under)));
        }
        let p2 = PANEL_THICKNESS / 2.0;
        mesh.merge(&box_mesh(
            Vec3::new(-lx + t2, -ly - p2, under - self.panel_height),
            Vec3::new(lx - t2, -ly + p2, under),
        ));
        mesh
    }

    /// Nodes: 0 top centre, 1–4 leg tops, 5–8 leg bottoms (same order), 9 panel centre.
    pub fn skeleton(&self) -> SkeletonGraph {
        let (lx, ly) = self.leg_offsets();
        let under = self.underside();
        let h2 = self.height / 2.0;
        let mut nodes = vec![Vec3::new(0.0, 0.0, h2 - self.top_thickness / 2.0)];
        nodes.extend(LEG_SIGNS.iter().map(|(sx, sy)| Vec3::new(sx * lx, sy * ly, under)));
        nodes.extend(LEG_SIGNS.iter().map(|(sx, sy)| Vec3::new(sx * lx, sy * ly, -h2)));
        nodes.push(Vec3::new(0.0, -ly, under - self.panel_height / 2.0));
        SkeletonGraph::new(nodes, TABLE_LINKS.to_vec(), None).expect("table topology is valid")
    }
}

/// Leg corners (+x+y, −x+y, −x−y, +x−y); the rear is −y.
const LEG_SIGNS: [(f64, f64); 4] = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];

pub const TABLE_LINKS: [(u32, u32); 10] = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 6), (3, 7), (4, 8), (3, 9), (4, 9)];

#[derive(Debug, Clone)]
pub struct GeneratedInstance {
    pub name: String,
    pub params: TableParams,
    pub mesh: Mesh,
    pub skeleton: SkeletonGraph,
}

/// `count` instances drawn from one seeded stream.
pub fn generate(kind: CategoryKind, count: usize, seed: u64) -> Vec<GeneratedInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| match kind {
            CategoryKind::Table => {
                let params = TableParams::sample(&mut rng);
                GeneratedInstance {
                    name: format!("{kind}_{i:03}"),
                    params,
                    mesh: params.mesh(),
                    skeleton: params.skeleton(),
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{center_of_mass, model_diameter};
    use crate::skeleton::validate_category_topology;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(CategoryKind::Table, 6, 11);
        let b = generate(CategoryKind::Table, 6, 11);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.mesh.to_off(), y.mesh.to_off());
            assert_eq!(x.skeleton.to_json(), y.skeleton.to_json());
        }
        assert_ne!(a[0].params, generate(CategoryKind::Table, 1, 12)[0].params);
    }

    #[test]
    fn skeletons_share_topology() {
        let graphs: Vec<_> = generate(CategoryKind::Table, 6, 3).into_iter().map(|g| g.skeleton).collect();
        validate_category_topology(&graphs).unwrap();
    }

    #[test]
    fn nodes_follow_analytic_formulas() {
        for inst in generate(CategoryKind::Table, 20, 5) {
            let p = inst.params;
            assert!((TableParams::HEIGHT.0..TableParams::HEIGHT.1).contains(&p.height));
            let g = &inst.skeleton;
            let top_z = p.height / 2.0 - p.top_thickness;
            let lx = p.length / 2.0 - p.leg_inset - p.leg_thickness / 2.0;
            let ly = p.width / 2.0 - p.leg_inset - p.leg_thickness / 2.0;
            for (k, (sx, sy)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].into_iter().enumerate() {
                let upper = g.node(1 + k as u32);
                let lower = g.node(5 + k as u32);
                assert!((upper - Vec3::new(sx * lx, sy * ly, top_z)).norm() < 1e-12);
                assert!((lower - Vec3::new(sx * lx, sy * ly, -p.height / 2.0)).norm() < 1e-12);
                // Leg length equals total height minus top thickness.
                assert!(((upper - lower).norm() - (p.height - p.top_thickness)).abs() < 1e-12);
            }
            assert!((g.node(0).z - (p.height / 2.0 - p.top_thickness / 2.0)).abs() < 1e-12);
            assert!((g.node(9).y + ly).abs() < 1e-12);
        }
    }

    #[test]
    fn mesh_is_centred_and_z_up() {
        let inst = &generate(CategoryKind::Table, 1, 9)[0];
        let (lo, hi) = inst.mesh.bounding_box().unwrap();
        assert!((lo + hi).norm() < 1e-12);
        assert!((hi.z - lo.z - inst.params.height).abs() < 1e-12);
        let com = center_of_mass(&inst.mesh).unwrap();
        assert!(com.y < 0.0, "rear panel pulls the centre of mass backwards");
        assert!(model_diameter(&inst.mesh.vertex_cloud()) > inst.params.length);
    }

    #[test]
    fn unknown_kind_is_a_config_error() {
        assert!("chair".parse::<CategoryKind>().is_err());
        assert_eq!("Table".parse::<CategoryKind>().unwrap(), CategoryKind::Table);
    }
}
