use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context as _, Result};
use catpose::dataset::{extract_training_parts, TrainingSet};
use catpose::forest::{train_forest, Forest, GROWTH_CSV_HEADER};
use catpose::infer::{estimate_pose, save_overlay};
use catpose::pipeline::{
    category_radius, category_ssc, evaluate_forest, test_viewpoints, training_viewpoints, Instance, TestScene,
};
use catpose::procgen::{generate as generate_instances, CategoryKind};
use catpose::render::{render_depth, DepthImage, Viewpoint};
use catpose::skeleton::project_skeleton;
use catpose::QualityMask;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::files::*;
use crate::{Context, InputError};

/// One machine-readable line per stage on stdout.
fn summary(stage: &str, started: Instant, fields: serde_json::Value) {
    let mut line = json!({ "stage": stage, "seconds": (started.elapsed().as_secs_f64() * 1e3).round() / 1e3 });
    if let (Some(obj), serde_json::Value::Object(extra)) = (line.as_object_mut(), fields) {
        obj.extend(extra);
    }
    println!("{line}");
}

fn input<E: std::fmt::Display>(what: &Path) -> impl FnOnce(E) -> anyhow::Error + '_ {
    move |e| InputError::new(format!("{}: {e}", what.display())).into()
}

fn mismatch(msg: String) -> anyhow::Error {
    InputError::new(format!("{msg}; rerun the earlier stages with the current config")).into()
}

fn load_manifest(ctx: &Context, path: Option<PathBuf>) -> Result<(CategoryManifest, PathBuf)> {
    let path = path.unwrap_or_else(|| ctx.out.join(MANIFEST));
    let manifest: CategoryManifest = read_json(&path)?;
    manifest.validate()?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, root))
}

fn mask_label(mask: QualityMask) -> String {
    mask.to_string().replace(',', "")
}

pub fn generate(ctx: &Context, kind: CategoryKind, count: usize, train: usize) -> Result<()> {
    let started = Instant::now();
    if count == 0 || train == 0 || train > count {
        return Err(InputError::new(format!("need 1 <= train <= count, got train {train} of {count}")).into());
    }
    let mut entries = Vec::new();
    for (i, inst) in generate_instances(kind, count, ctx.seed).into_iter().enumerate() {
        let mesh = PathBuf::from("meshes").join(format!("{}.off", inst.name));
        let skeleton = PathBuf::from("skeletons").join(format!("{}.json", inst.name));
        write(&ctx.out.join(&mesh), inst.mesh.to_off())?;
        write(&ctx.out.join(&skeleton), inst.skeleton.to_json())?;
        entries.push(ManifestEntry {
            name: inst.name,
            mesh,
            skeleton,
            split: if i < train { Split::Train } else { Split::Test },
        });
    }
    let manifest = CategoryManifest { category: kind.to_string(), instances: entries };
    write_json(&ctx.out.join(MANIFEST), &manifest)?;
    summary("generate", started, json!({ "category": manifest.category, "instances": count, "train": train, "seed": ctx.seed, "manifest_digest": format!("{:016x}", manifest.digest()) }));
    Ok(())
}

pub fn ssc(ctx: &Context, manifest: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    let (manifest, root) = load_manifest(ctx, manifest)?;
    let train = manifest.load(&root, Split::Train)?;
    let ssc = category_ssc(&train).map_err(|e| InputError::new(e.to_string()))?;
    let record = SscRecord {
        manifest_digest: manifest.digest(),
        instances: train.iter().map(|i| i.name.clone()).collect(),
        ssc,
    };
    write_json(&ctx.out.join(SSC), &record)?;
    summary("ssc", started, json!({ "labels": record.ssc.labels, "nearest": record.ssc.nearest_labels }));
    Ok(())
}

/// Viewpoints of every instance of one split, as `render` placed them.
fn viewpoints(instances: &[Instance], split: Split, index: &ViewIndex) -> Vec<Vec<Viewpoint>> {
    let mut views = index.views;
    views.radius_m = Some(index.radius_m);
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| match split {
            Split::Train => training_viewpoints(&inst.mesh, &views),
            Split::Test => test_viewpoints(&inst.mesh, &views, index.seed.wrapping_add(i as u64)),
        })
        .collect()
}

pub fn render(ctx: &Context, manifest: Option<PathBuf>, png: bool) -> Result<()> {
    let started = Instant::now();
    ctx.cfg.validate().map_err(|e| InputError::new(e.to_string()))?;
    let (manifest, root) = load_manifest(ctx, manifest)?;
    let train = manifest.load(&root, Split::Train)?;
    let test = manifest.load(&root, Split::Test)?;
    // One camera distance for the whole category unless the config fixes it.
    let radius_m = ctx.cfg.views.radius_m.unwrap_or_else(|| category_radius(&train, &ctx.cfg.views));
    let mut index = ViewIndex {
        manifest_digest: manifest.digest(),
        config_digest: render_digest(&ctx.cfg, ctx.seed),
        camera: ctx.cfg.camera,
        views: ctx.cfg.views,
        radius_m,
        seed: ctx.seed,
        files: Vec::new(),
    };
    let mut jobs: Vec<(&Instance, Split, Viewpoint)> = Vec::new();
    for (split, instances) in [(Split::Train, &train), (Split::Test, &test)] {
        for (inst, views) in instances.iter().zip(viewpoints(instances, split, &index)) {
            jobs.extend(views.into_iter().map(|v| (inst, split, v)));
        }
    }
    let out = &ctx.out;
    let files = jobs
        .par_iter()
        .map(|(inst, split, view)| {
            let dir = if *split == Split::Train { "train" } else { "test" };
            let rel = PathBuf::from("renders").join(dir).join(&inst.name).join(format!("v{:03}.depth", view.index));
            let depth = render_depth(&inst.mesh, view, &ctx.cfg.camera);
            write(&out.join(&rel), depth.to_bytes())?;
            if png {
                depth.save_png_mm(&out.join(&rel).with_extension("png"))?;
            }
            let t = view.pose.translation();
            Ok(ViewFile {
                instance: inst.name.clone(),
                split: *split,
                index: view.index,
                depth: rel,
                euler_rad: view.pose.euler(),
                translation_m: [t.x, t.y, t.z],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    index.files = files;
    write_json(&out.join(VIEWS), &index)?;
    let count = |s: Split| index.files.iter().filter(|f| f.split == s).count();
    summary("render", started, json!({ "train_views": count(Split::Train), "test_views": count(Split::Test), "radius_m": radius_m, "config_digest": format!("{:016x}", index.config_digest) }));
    Ok(())
}

/// Loads the view index and checks it against the manifest and config.
fn load_views(ctx: &Context, manifest: &CategoryManifest) -> Result<ViewIndex> {
    let index: ViewIndex = read_json(&ctx.out.join(VIEWS))?;
    if index.manifest_digest != manifest.digest() {
        return Err(mismatch("renders were made from a different manifest".into()));
    }
    let want = render_digest(&ctx.cfg, ctx.seed);
    if index.config_digest != want {
        return Err(mismatch(format!(
            "renders use config digest {:016x}, current camera/views/seed give {want:016x}",
            index.config_digest
        )));
    }
    Ok(index)
}

fn load_ssc(ctx: &Context, manifest: &CategoryManifest) -> Result<SscRecord> {
    let record: SscRecord = read_json(&ctx.out.join(SSC))?;
    if record.manifest_digest != manifest.digest() {
        return Err(mismatch("ssc.json was computed from a different manifest".into()));
    }
    Ok(record)
}

fn load_depth(ctx: &Context, file: &ViewFile) -> Result<DepthImage> {
    let path = ctx.out.join(&file.depth);
    DepthImage::load(&path).map_err(input(&path))
}

/// Provenance of `dataset.isas`, checked by the stages that use its forests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetStamp {
    manifest_digest: u64,
    render_digest: u64,
    ssc_labels: Vec<u32>,
    dataset_digest: u64,
}

fn stamp_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("json")
}

pub fn extract(ctx: &Context, manifest: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    ctx.cfg.parts.validate().map_err(|e| InputError::new(e.to_string()))?;
    let (manifest, root) = load_manifest(ctx, manifest)?;
    let train = manifest.load(&root, Split::Train)?;
    let index = load_views(ctx, &manifest)?;
    let record = load_ssc(ctx, &manifest)?;
    let names: Vec<&str> = train.iter().map(|i| i.name.as_str()).collect();
    if record.instances != names {
        return Err(mismatch("ssc.json lists different train instances".into()));
    }
    let views = viewpoints(&train, Split::Train, &index);
    let jobs: Vec<(usize, &ViewFile)> = index
        .files
        .iter()
        .filter(|f| f.split == Split::Train)
        .map(|f| {
            let i = names.iter().position(|n| *n == f.instance).ok_or_else(|| mismatch(format!("unknown instance {}", f.instance)))?;
            Ok((i, f))
        })
        .collect::<Result<_>>()?;
    let parts = jobs
        .par_iter()
        .map(|&(i, f)| {
            let view = views[i].get(f.index).ok_or_else(|| mismatch(format!("{} has no view {}", f.instance, f.index)))?;
            let depth = load_depth(ctx, f)?;
            let proj = project_skeleton(&train[i].skeleton, view, &ctx.cfg.camera);
            Ok(extract_training_parts(&depth, view, &record.ssc.point(i), &proj, &ctx.cfg.camera, &ctx.cfg.parts))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = TrainingSet::new(
        &manifest.category,
        train.len(),
        ctx.cfg.parts,
        ctx.cfg.camera,
        &train[0].skeleton,
        record.ssc.labels.clone(),
    );
    for ((i, f), parts) in jobs.iter().zip(parts) {
        set.push_view(*i, f.index as u32, parts);
    }
    let path = ctx.out.join(DATASET);
    set.save(&path)?;
    let stamp = DatasetStamp {
        manifest_digest: manifest.digest(),
        render_digest: index.config_digest,
        ssc_labels: set.ssc_labels.clone(),
        dataset_digest: set.digest(),
    };
    write_json(&stamp_path(&path), &stamp)?;
    summary("extract", started, json!({ "views": set.views.len(), "parts": set.part_count(), "dataset_digest": format!("{:016x}", stamp.dataset_digest) }));
    Ok(())
}

pub fn train(ctx: &Context, dataset: Option<PathBuf>, quality: Option<QualityMask>) -> Result<()> {
    let started = Instant::now();
    let path = dataset.unwrap_or_else(|| ctx.out.join(DATASET));
    let set = TrainingSet::load(&path).map_err(input(&path))?;
    if set.camera != ctx.cfg.camera || set.config != ctx.cfg.parts {
        return Err(mismatch(format!("{} was extracted with a different camera or part config", path.display())));
    }
    let mut cfg = ctx.cfg.forest;
    if let Some(q) = quality {
        cfg.quality = q;
    }
    cfg.validate().map_err(|e| InputError::new(e.to_string()))?;
    info!("training {} trees on {} parts ({})", cfg.trees, set.part_count(), cfg.quality);
    let (forest, logs) = train_forest(&set, &cfg)?;
    let label = mask_label(cfg.quality);
    let forest_path = ctx.out.join(format!("forest-{label}.isaf"));
    forest.save(&forest_path)?;
    let mut csv = format!("{GROWTH_CSV_HEADER}\n");
    for (t, log) in logs.iter().enumerate() {
        csv.push_str(&log.to_csv_rows(t));
    }
    write(&ctx.out.join(format!("growth-{label}.csv")), csv)?;
    let nodes: usize = forest.trees.iter().map(|t| t.nodes.len()).sum();
    summary("train", started, json!({ "quality": cfg.quality.to_string(), "forest": forest_path, "trees": forest.trees.len(), "nodes": nodes, "forest_digest": format!("{:016x}", forest.digest()) }));
    Ok(())
}

fn load_forest(path: &Path) -> Result<Forest> {
    Forest::load(path).map_err(input(path))
}

/// Checks that `forest` came from the dataset extracted in the output
/// directory and that those renders match the current config.
fn check_lineage(ctx: &Context, forest: &Forest, manifest: &CategoryManifest, index: &ViewIndex, ssc: &SscRecord) -> Result<()> {
    let stamp: DatasetStamp = read_json(&stamp_path(&ctx.out.join(DATASET)))?;
    if stamp.dataset_digest != forest.meta.dataset_digest {
        return Err(mismatch("forest was trained on a different dataset than the one in the output directory".into()));
    }
    if stamp.manifest_digest != manifest.digest() || stamp.render_digest != index.config_digest || stamp.ssc_labels != ssc.ssc.labels {
        return Err(mismatch("dataset was extracted from different renders or SSC".into()));
    }
    if forest.meta.camera != index.camera {
        return Err(mismatch("forest camera differs from the render camera".into()));
    }
    Ok(())
}

/// Test renders with their recomputed viewpoints.
fn test_scenes(ctx: &Context, test: &[Instance], index: &ViewIndex) -> Result<Vec<TestScene>> {
    let views = viewpoints(test, Split::Test, index);
    index
        .files
        .iter()
        .filter(|f| f.split == Split::Test)
        .map(|f| {
            let i = test.iter().position(|t| t.name == f.instance).ok_or_else(|| mismatch(format!("unknown instance {}", f.instance)))?;
            let view = *views[i].get(f.index).ok_or_else(|| mismatch(format!("{} has no view {}", f.instance, f.index)))?;
            Ok(TestScene { id: format!("{}_v{:03}", f.instance, f.index), instance: i, view, depth: load_depth(ctx, f)? })
        })
        .collect()
}

pub fn infer(ctx: &Context, forest: &Path, depth: Option<PathBuf>, output: Option<PathBuf>, overlay: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    ctx.cfg.inference.validate().map_err(|e| InputError::new(e.to_string()))?;
    let forest_path = forest;
    let forest = load_forest(forest_path)?;
    let cfg = &ctx.cfg.inference;
    if let Some(path) = depth {
        let image = DepthImage::load(&path).map_err(input(&path))?;
        let result = estimate_pose(&image, &forest, cfg).map_err(input(&path))?;
        match &output {
            Some(out) => write(out, result.to_json() + "\n")?,
            None => println!("{}", result.to_json()),
        }
        if let Some(png) = &overlay {
            save_overlay(png, &image, &result.hypotheses, cfg)?;
        }
        if output.is_some() {
            summary("infer", started, json!({ "images": 1, "hypotheses": result.hypotheses.len(), "parts": result.diagnostics.parts }));
        }
        return Ok(());
    }
    if output.is_some() || overlay.is_some() {
        return Err(InputError::new("--output and --overlay need --depth").into());
    }
    let (manifest, root) = load_manifest(ctx, None)?;
    let test = manifest.load(&root, Split::Test)?;
    let index = load_views(ctx, &manifest)?;
    let ssc = load_ssc(ctx, &manifest)?;
    check_lineage(ctx, &forest, &manifest, &index, &ssc)?;
    let scenes = test_scenes(ctx, &test, &index)?;
    let dir = ctx.out.join(format!("infer-{}", mask_label(forest.config.quality)));
    scenes
        .par_iter()
        .map(|s| {
            let result = estimate_pose(&s.depth, &forest, cfg)?;
            write(&dir.join(format!("{}.json", s.id)), result.to_json() + "\n")
        })
        .collect::<Result<Vec<_>>>()
        .with_context(|| format!("inference with {}", forest_path.display()))?;
    summary("infer", started, json!({ "images": scenes.len(), "dir": dir }));
    Ok(())
}

pub fn eval(ctx: &Context, forest_path: &Path, manifest: Option<PathBuf>) -> Result<()> {
    let started = Instant::now();
    ctx.cfg.validate().map_err(|e| InputError::new(e.to_string()))?;
    let forest = load_forest(forest_path)?;
    let (manifest, root) = load_manifest(ctx, manifest)?;
    let test = manifest.load(&root, Split::Test)?;
    if test.is_empty() {
        return Err(InputError::new("manifest has no test instance").into());
    }
    let index = load_views(ctx, &manifest)?;
    let ssc = load_ssc(ctx, &manifest)?;
    check_lineage(ctx, &forest, &manifest, &index, &ssc)?;
    let scenes = test_scenes(ctx, &test, &index)?;
    let (report, _) = evaluate_forest(&forest, &manifest.category, &test, &ssc.ssc, &scenes, &ctx.cfg)?;
    let label = mask_label(forest.config.quality);
    write(&ctx.out.join(format!("eval-{label}.json")), report.to_json() + "\n")?;
    write(&ctx.out.join(format!("eval-{label}.csv")), report.to_csv())?;
    summary("eval", started, json!({ "quality": forest.config.quality.to_string(), "cases": report.cases.len(), "z": report.z, "recall": report.average_recall }));
    Ok(())
}
