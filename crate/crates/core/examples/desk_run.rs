//! One seeded table experiment at desk scale, with stage timings.
//!
//! `cargo run --release -p catpose --example desk_run -- <seed> [q1|q1,q2,q3]`

use std::time::Instant;

use catpose::forest::train_forest;
use catpose::pipeline::{evaluate_forest, ground_truth_pose, hypothesis_pose, Experiment, Instance};
use catpose::procgen::{generate, CategoryKind};
use catpose::{PipelineConfig, QualityMask};

fn patched<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, patch: &str) -> T {
    let mut value = serde_json::to_value(base).expect("config serialises");
    let patch: serde_json::Value = serde_json::from_str(patch).expect("patch json");
    for (k, v) in patch.as_object().expect("patch is an object") {
        value[k] = v.clone();
    }
    serde_json::from_value(value).expect("patched config")
}

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let masks: Vec<QualityMask> = match args.next() {
        Some(m) => vec![m.parse().expect("quality mask")],
        None => vec![QualityMask::Q1, QualityMask::ALL],
    };
    let mut cfg = PipelineConfig::desk();
    cfg.forest.seed = seed;
    // DESK_FOREST / DESK_INFER patch individual fields of the desk config.
    if let Ok(text) = std::env::var("DESK_FOREST") {
        cfg.forest = patched(&cfg.forest, &text);
        cfg.forest.seed = seed;
    }
    if let Ok(text) = std::env::var("DESK_INFER") {
        cfg.inference = patched(&cfg.inference, &text);
    }
    let t = Instant::now();
    let generated = generate(CategoryKind::Table, 6, seed);
    if std::env::var("DESK_VERBOSE").is_ok() {
        for g in &generated {
            println!("{} {:?}", g.name, g.params);
        }
    }
    let instances: Vec<Instance> = generated
        .into_iter()
        .map(|g| Instance { name: g.name, mesh: g.mesh, skeleton: g.skeleton })
        .collect();
    let (train, test) = instances.split_at(4);
    // DESK_SEEN evaluates on two of the training instances instead.
    let test = if std::env::var("DESK_SEEN").is_ok() { &train[..2] } else { test };
    // DESK_INSTANCE_RADIUS scales the camera distance per instance instead.
    if std::env::var("DESK_INSTANCE_RADIUS").is_err() {
        cfg.views.radius_m = Some(catpose::pipeline::category_radius(train, &cfg.views));
    }
    let exp = Experiment::prepare("table", train.to_vec(), test.to_vec(), &cfg, seed).expect("prepare");
    println!(
        "prepared: {} parts, {} views, {} scenes, ssc {:?} in {:.1?}",
        exp.set.part_count(),
        exp.set.views.len(),
        exp.scenes.len(),
        exp.ssc.labels,
        t.elapsed()
    );
    let verbose = std::env::var("DESK_VERBOSE").is_ok();
    for mask in masks {
        cfg.forest.quality = mask;
        let t = Instant::now();
        let (forest, _) = train_forest(&exp.set, &cfg.forest).expect("train");
        let trained = t.elapsed();
        let (report, results) =
            evaluate_forest(&forest, "table", &exp.test, &exp.ssc, &exp.scenes, &cfg).expect("eval");
        let nodes: usize = forest.trees.iter().map(|t| t.nodes.len()).sum();
        println!(
            "{mask}: recall {:.1}% ({nodes} nodes) train {trained:.1?} total {:.1?}",
            report.average_recall,
            t.elapsed()
        );
        if verbose {
            for ((scene, res), row) in exp.scenes.iter().zip(&results).zip(&report.cases) {
                let gt = ground_truth_pose(&scene.view, &exp.ssc.point_for(&exp.test[scene.instance].skeleton));
                let Some(h) = res.hypotheses.first() else {
                    println!("{} no hypothesis", scene.id);
                    continue;
                };
                let est = hypothesis_pose(h);
                let d = est.translation() - gt.translation();
                let dt = d.norm();
                let dr = (gt.rotation().transpose() * est.rotation()).trace();
                let ang = ((dr - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees();
                println!(
                    "{} dt {dt:.3} m ({:+.2} {:+.2} {:+.2}) rot {ang:6.1} deg omega {:.3} thr {:.3} {} elev {:.2}",
                    scene.id,
                    d.x,
                    d.y,
                    d.z,
                    row.omega.unwrap_or(f64::NAN),
                    row.threshold,
                    if row.correct { "ok" } else { "--" },
                    gt.euler()[0]
                );
            }
        }
    }
}
