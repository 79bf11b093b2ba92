mod common;

use catpose::forest::{train_forest, Forest};
use catpose::geometry::euler_to_matrix;
use catpose::infer::{estimate_pose, project_center, HoughGrid};
use catpose::pipeline::{ground_truth_pose, training_viewpoints};
use catpose::render::{render_depth, DepthImage, Viewpoint};
use common::{single_table, SingleTable};

fn trained(seed: u64, views: usize, radius: f64) -> (SingleTable, Forest) {
    let t = single_table(seed, views, radius);
    let (forest, _) = train_forest(&t.set, &t.cfg.forest).unwrap();
    (t, forest)
}

fn first_view(t: &SingleTable) -> (Viewpoint, DepthImage) {
    let view = training_viewpoints(&t.instance.mesh, &t.cfg.views)[0];
    let depth = render_depth(&t.instance.mesh, &view, &t.cfg.camera);
    (view, depth)
}

/// Horizontal extent of the foreground, inclusive.
fn foreground_columns(depth: &DepthImage) -> (i64, i64) {
    let cols: Vec<i64> = (0..depth.width() as i64)
        .filter(|&u| (0..depth.height() as i64).any(|v| depth.is_foreground(u, v)))
        .collect();
    (cols[0], *cols.last().unwrap())
}

fn within_one_bin(a: [usize; 3], b: [usize; 3]) -> bool {
    a.iter().zip(&b).all(|(x, y)| x.abs_diff(*y) <= 1)
}

#[test]
fn training_view_recovers_its_own_pose() {
    let (t, forest) = trained(3, 24, 4.0);
    let cam = t.cfg.camera;
    let grid = HoughGrid::new(&cam, &t.cfg.inference);
    for view in training_viewpoints(&t.instance.mesh, &t.cfg.views).iter().step_by(4) {
        let depth = render_depth(&t.instance.mesh, view, &cam);
        let top = estimate_pose(&depth, &forest, &t.cfg.inference).unwrap().hypotheses[0];
        let gt = ground_truth_pose(view, &t.ssc.point(0));
        let want = grid.cell_of(project_center(&cam, gt.translation())).unwrap();
        let got = grid.cell_of(top.center_uvz).unwrap();
        assert!(within_one_bin(got, want), "view {}: cell {got:?}, expected {want:?}", view.index);
        let cos = ((gt.rotation().transpose() * euler_to_matrix(top.euler_rad)).trace() - 1.0) / 2.0;
        let degrees = cos.clamp(-1.0, 1.0).acos().to_degrees();
        assert!(degrees < t.cfg.inference.rotation_kernel.to_degrees(), "view {}: {degrees:.1} deg", view.index);
    }
}

#[test]
fn twin_objects_give_two_matching_modes() {
    let (t, forest) = trained(5, 16, 7.0);
    let (_, depth) = first_view(&t);
    let (lo, hi) = foreground_columns(&depth);
    // Multiples of the stride keep both copies on the same part grid.
    let shift = 48;
    let patch = t.cfg.parts.patch_size as i64;
    assert!(2 * shift - (hi - lo) > patch, "copies too close for disjoint patches");
    assert!(lo - shift >= 0 && hi + shift < depth.width() as i64);
    let scene = depth.shifted(-shift, 0).composite(&depth.shifted(shift, 0)).unwrap();

    let solo = estimate_pose(&depth, &forest, &t.cfg.inference).unwrap().hypotheses[0];
    let result = estimate_pose(&scene, &forest, &t.cfg.inference).unwrap();
    let (a, b) = (result.hypotheses[0], result.hypotheses[1]);
    assert!((a.score - b.score).abs() <= 0.05 * a.score, "scores {} and {}", a.score, b.score);
    let mut us = [a.center_uvz[0], b.center_uvz[0]];
    us.sort_by(f64::total_cmp);
    let bin = t.cfg.inference.bin_u;
    assert!((us[0] - (solo.center_uvz[0] - shift as f64)).abs() <= bin);
    assert!((us[1] - (solo.center_uvz[0] + shift as f64)).abs() <= bin);
}

#[test]
fn whole_bin_image_shifts_move_the_top_mode() {
    let (t, forest) = trained(7, 16, 5.0);
    let (_, depth) = first_view(&t);
    let base = estimate_pose(&depth, &forest, &t.cfg.inference).unwrap().hypotheses[0];
    let grid = HoughGrid::new(&t.cfg.camera, &t.cfg.inference);
    let cell = grid.cell_of(base.center_uvz).unwrap();
    // Shifts are whole bins and whole strides, so the parts map one to one.
    for (du, dv) in [(6i64, 0i64), (0, 6), (-12, 6), (24, -12)] {
        let moved = estimate_pose(&depth.shifted(du, dv), &forest, &t.cfg.inference).unwrap().hypotheses[0];
        assert!((moved.center_uvz[0] - base.center_uvz[0] - du as f64).abs() < 1e-9);
        assert!((moved.center_uvz[1] - base.center_uvz[1] - dv as f64).abs() < 1e-9);
        assert!((moved.center_uvz[2] - base.center_uvz[2]).abs() < 1e-12);
        let bins = [du / t.cfg.inference.bin_u as i64, dv / t.cfg.inference.bin_v as i64];
        let got = grid.cell_of(moved.center_uvz).unwrap();
        assert_eq!(got[0] as i64 - cell[0] as i64, bins[0]);
        assert_eq!(got[1] as i64 - cell[1] as i64, bins[1]);
        assert_eq!(got[2], cell[2]);
        assert!((moved.score - base.score).abs() <= 1e-9 * base.score);
    }
}

#[test]
fn inference_is_repeatable_and_survives_a_save_load() {
    let (t, forest) = trained(9, 12, 4.0);
    let (_, depth) = first_view(&t);
    let json = estimate_pose(&depth, &forest, &t.cfg.inference).unwrap().to_json();
    assert_eq!(estimate_pose(&depth, &forest, &t.cfg.inference).unwrap().to_json(), json);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.forest");
    forest.save(&path).unwrap();
    let loaded = Forest::load(&path).unwrap();
    assert_eq!(estimate_pose(&depth, &loaded, &t.cfg.inference).unwrap().to_json(), json);

    let hyps = estimate_pose(&depth, &loaded, &t.cfg.inference).unwrap().hypotheses;
    assert!(!hyps.is_empty() && hyps.len() <= t.cfg.inference.top_k);
    assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn empty_scene_and_wrong_size_images() {
    let (t, forest) = trained(2, 6, 4.0);
    let cam = t.cfg.camera;
    let empty = estimate_pose(&DepthImage::background(cam.width, cam.height), &forest, &t.cfg.inference).unwrap();
    assert!(empty.hypotheses.is_empty());
    assert_eq!(empty.diagnostics.parts, 0);
    assert!(estimate_pose(&DepthImage::background(64, 64), &forest, &t.cfg.inference).is_err());
}
