//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use catpose::dataset::{AnnotatedPart, Part, Patch};
use catpose::forest::SplitCandidate;
use catpose::skeleton::{LinkAngle, LinkAngleVector, NodeOffsetMatrix};
use nalgebra::DMatrix;
use rand::Rng;

/// Candidate that sends flagged parts (see [`fixture`]) right and the rest left.
pub const FLAG_SPLIT: SplitCandidate = SplitCandidate {
    u: [1.0, 0.0],
    v: [0.0, 0.0],
    tau: 0.5,
};

/// A 4×4 patch at 1 m whose pixel right of centre is 2 m when `right` is set.
/// Part depths stay within 0.7–1.3 m so a 1 px·m probe lands one pixel over.
fn flag_patch(right: bool) -> Patch {
    let mut data = vec![1.0f32; 16];
    data[2 * 4 + 3] = if right { 2.0 } else { 1.0 };
    Patch::new(4, data)
}

/// Random annotated parts spread over `views` views. Link angles and node
/// offsets are shared within a view, as rendering produces them; some links
/// and node rows are missing from some views. Returns the parts and the
/// right-child flags that [`FLAG_SPLIT`] reproduces.
pub fn fixture(rng: &mut impl Rng, n: usize, views: usize, links: usize, nodes: usize) -> (Vec<AnnotatedPart>, Vec<bool>) {
    let per_view: Vec<(Arc<LinkAngleVector>, NodeOffsetMatrix, [f64; 3])> = (0..views)
        .map(|_| {
            let mut entries = Vec::new();
            for link in 0..links {
                if rng.gen_bool(0.85) {
                    entries.push(LinkAngle {
                        link,
                        angle: rng.gen_range(-3.1..3.1),
                        degenerate: false,
                    });
                }
            }
            let valid: Vec<bool> = (0..nodes).map(|_| rng.gen_bool(0.85)).collect();
            let rows = valid
                .iter()
                .map(|&v| {
                    if v {
                        [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-0.5..0.5)]
                    } else {
                        [0.0; 3]
                    }
                })
                .collect();
            let rotation = [rng.gen_range(1.6..2.9), 0.0, rng.gen_range(-3.1..3.1)];
            (Arc::new(LinkAngleVector { entries }), NodeOffsetMatrix { rows, valid }, rotation)
        })
        .collect();
    let mut flags = Vec::with_capacity(n);
    let parts = (0..n)
        .map(|i| {
            let view = rng.gen_range(0..views);
            // Guarantee both children are non-empty.
            let right = match i {
                0 => false,
                1 => true,
                _ => rng.gen_bool(0.5),
            };
            flags.push(right);
            let (a, s, rotation) = &per_view[view];
            let shift = [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-0.3..0.3)];
            AnnotatedPart {
                part: Part {
                    center: [100.0 + shift[0], 80.0 + shift[1], 1.0 + shift[2]],
                    patch: flag_patch(right),
                },
                offset: [rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), rng.gen_range(-0.4..0.4)],
                rotation: *rotation,
                view: view as u32,
                link_angles: Arc::clone(a),
                node_offsets: NodeOffsetMatrix {
                    rows: s
                        .rows
                        .iter()
                        .map(|r| [r[0] - shift[0], r[1] - shift[1], r[2] - shift[2]])
                        .collect(),
                    valid: s.valid.clone(),
                },
            }
        })
        .collect();
    (parts, flags)
}

/// ln |Σ + εI| for the population covariance Σ of `rows`, from the singular
/// values of the centred data: Σ ln(σ²/n + ε) plus ε for the missing rank.
/// Working on the data rather than Σ keeps the ε directions exact.
fn log_det_oracle(rows: &[Vec<f64>], d: usize, eps: f64) -> f64 {
    let n = rows.len();
    if d == 0 {
        return 0.0;
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let sv = x.singular_values();
    let ranked: f64 = sv.iter().map(|s| (s * s / n as f64 + eps).ln()).sum();
    ranked + (d - sv.len()) as f64 * eps.ln()
}

fn gain(parent: &[&AnnotatedPart], left: &[&AnnotatedPart], right: &[&AnnotatedPart], h: impl Fn(&[&AnnotatedPart]) -> f64) -> f64 {
    let n = (left.len() + right.len()) as f64;
    h(parent) - left.len() as f64 / n * h(left) - right.len() as f64 / n * h(right)
}

/// Brute-force (Q1, Q2, Q3) for one split.
pub fn oracle_gains(parent: &[&AnnotatedPart], left: &[&AnnotatedPart], right: &[&AnnotatedPart], eps: f64) -> [f64; 3] {
    let q1 = gain(parent, left, right, |set| {
        let dx: Vec<Vec<f64>> = set.iter().map(|p| p.offset.to_vec()).collect();
        let th: Vec<Vec<f64>> = set
            .iter()
            .map(|p| p.rotation.iter().flat_map(|r| [r.cos(), r.sin()]).collect())
            .collect();
        let (a, b) = (log_det_oracle(&dx, 3, eps), log_det_oracle(&th, 6, eps));
        // ln(e^a + e^b), written out rather than shared with the library.
        a.max(b) + (1.0 + (-(a - b).abs()).exp()).ln()
    });

    let max_link = parent
        .iter()
        .flat_map(|p| p.link_angles.entries.iter().map(|e| e.link + 1))
        .max()
        .unwrap_or(0);
    let links: Vec<usize> = (0..max_link)
        .filter(|l| parent.iter().all(|p| p.link_angles.entries.iter().any(|e| e.link == *l)))
        .collect();
    let q2 = gain(parent, left, right, |set| {
        let rows: Vec<Vec<f64>> = set
            .iter()
            .map(|p| {
                links
                    .iter()
                    .flat_map(|l| {
                        let a = p.link_angles.entries.iter().find(|e| e.link == *l).unwrap().angle;
                        [a.cos(), a.sin()]
                    })
                    .collect()
            })
            .collect();
        log_det_oracle(&rows, 2 * links.len(), eps)
    });

    let node_rows: Vec<usize> = (0..parent[0].node_offsets.valid.len())
        .filter(|&r| parent.iter().all(|p| p.node_offsets.valid[r]))
        .collect();
    let q3 = gain(parent, left, right, |set| {
        let rows: Vec<Vec<f64>> = set
            .iter()
            .map(|p| node_rows.iter().flat_map(|&r| p.node_offsets.rows[r]).collect())
            .collect();
        log_det_oracle(&rows, 3 * node_rows.len(), eps)
    });
    [q1, q2, q3]
}

/// |a − b| ≤ rel · max(1, |b|).
pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1.0)
}

/// One procedural table, trained on its own views from a fixed distance.
pub struct SingleTable {
    pub instance: catpose::pipeline::Instance,
    pub ssc: catpose::skeleton::SscResult,
    pub set: catpose::dataset::TrainingSet,
    pub cfg: catpose::PipelineConfig,
}

/// Desk camera with the table `radius_m` away, so it covers a small part of
/// the frame. Leaves are kept small to make the votes sharp.
pub fn single_table(seed: u64, views: usize, radius_m: f64) -> SingleTable {
    use catpose::pipeline::{build_training_set, category_ssc, Instance};
    use catpose::procgen::{generate, CategoryKind};

    let g = generate(CategoryKind::Table, 1, seed).remove(0);
    let instance = Instance { name: g.name, mesh: g.mesh, skeleton: g.skeleton };
    let mut cfg = catpose::PipelineConfig::desk();
    cfg.views.train_views = views;
    cfg.views.radius_m = Some(radius_m);
    cfg.forest.trees = 2;
    cfg.forest.candidates = 50;
    cfg.forest.min_samples = 5;
    cfg.forest.seed = seed;
    let train = std::slice::from_ref(&instance);
    let ssc = category_ssc(train).expect("one instance has an ssc");
    let set = build_training_set("table", train, &ssc, &cfg).expect("training set");
    SingleTable { instance, ssc, set, cfg }
}
