//! In-memory orchestration of the full pipeline: SSC selection, view
//! rendering, training-set assembly, forest training and evaluation on
//! unseen instances. The CLI stages and the end-to-end checks share it.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, EvalConfig, PipelineConfig, ViewConfig};
use crate::dataset::{extract_training_parts, AnnotatedPart, TrainingSet};
use crate::eval::{recall, EvalCase, EvalError, EvalReport};
use crate::forest::{train_forest, Forest, ForestError, GrowthLog};
use crate::geometry::{
    euler_to_matrix, model_diameter, sample_surface, GeometryError, Mesh, PointCloud, RigidPose, Vec3,
};
use crate::infer::{estimate_pose, InferError, InferenceResult, PoseHypothesis};
use crate::render::{look_at_origin, render_depth, sample_viewpoints, DepthImage, Viewpoint};
use crate::skeleton::{compute_ssc, project_skeleton, SkeletonError, SkeletonGraph, SscResult};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Input(String),
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub name: String,
    pub mesh: Mesh,
    pub skeleton: SkeletonGraph,
}

/// Camera distance for an instance: the fixed category radius if configured,
/// otherwise a multiple of the instance diameter.
pub fn view_radius(mesh: &Mesh, cfg: &ViewConfig) -> f64 {
    cfg.radius_m
        .unwrap_or_else(|| cfg.radius_factor * model_diameter(&mesh.vertex_cloud()))
}

/// `radius_factor` times the mean diameter of the given instances.
pub fn category_radius(instances: &[Instance], cfg: &ViewConfig) -> f64 {
    let sum: f64 = instances.iter().map(|i| model_diameter(&i.mesh.vertex_cloud())).sum();
    cfg.radius_factor * sum / instances.len().max(1) as f64
}

pub fn training_viewpoints(mesh: &Mesh, cfg: &ViewConfig) -> Vec<Viewpoint> {
    sample_viewpoints(cfg.train_views, view_radius(mesh, cfg), cfg.hemisphere)
}

/// Seeded random cameras, uniform over the same sphere region as training.
pub fn test_viewpoints(mesh: &Mesh, cfg: &ViewConfig, seed: u64) -> Vec<Viewpoint> {
    let radius = view_radius(mesh, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.test_views)
        .map(|index| {
            let z: f64 = if cfg.hemisphere { rng.gen_range(0.0..0.98) } else { rng.gen_range(-0.98..0.98) };
            let phi = rng.gen_range(0.0..2.0 * PI);
            let r = (1.0 - z * z).sqrt();
            Viewpoint {
                pose: look_at_origin(Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius),
                index,
            }
        })
        .collect()
}

pub fn category_ssc(train: &[Instance]) -> Result<SscResult, PipelineError> {
    let pairs: Vec<(Mesh, SkeletonGraph)> = train.iter().map(|i| (i.mesh.clone(), i.skeleton.clone())).collect();
    Ok(compute_ssc(&pairs)?)
}

/// Renders and annotates one training view.
pub fn annotate_view(
    inst: &Instance,
    ssc_point: &Vec3,
    view: &Viewpoint,
    cfg: &PipelineConfig,
) -> (DepthImage, Vec<AnnotatedPart>) {
    let depth = render_depth(&inst.mesh, view, &cfg.camera);
    let proj = project_skeleton(&inst.skeleton, view, &cfg.camera);
    let parts = extract_training_parts(&depth, view, ssc_point, &proj, &cfg.camera, &cfg.parts);
    (depth, parts)
}

/// Renders every training view of every instance and collects annotated parts.
pub fn build_training_set(
    category: &str,
    train: &[Instance],
    ssc: &SscResult,
    cfg: &PipelineConfig,
) -> Result<TrainingSet, PipelineError> {
    cfg.validate()?;
    let reference = train
        .first()
        .ok_or_else(|| PipelineError::Input("no training instances".into()))?;
    let mut set = TrainingSet::new(
        category,
        train.len(),
        cfg.parts,
        cfg.camera,
        &reference.skeleton,
        ssc.labels.clone(),
    );
    let jobs: Vec<(usize, Viewpoint)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| training_viewpoints(&inst.mesh, &cfg.views).into_iter().map(move |v| (i, v)))
        .collect();
    let rendered: Vec<Vec<AnnotatedPart>> = jobs
        .par_iter()
        .map(|(i, view)| annotate_view(&train[*i], &ssc.point(*i), view, cfg).1)
        .collect();
    for ((i, view), parts) in jobs.iter().zip(rendered) {
        set.push_view(*i, view.index as u32, parts);
    }
    Ok(set)
}

#[derive(Debug, Clone)]
pub struct TestScene {
    pub id: String,
    pub instance: usize,
    pub view: Viewpoint,
    pub depth: DepthImage,
}

pub fn test_scenes(test: &[Instance], cfg: &PipelineConfig, seed: u64) -> Vec<TestScene> {
    let jobs: Vec<(usize, Viewpoint)> = test
        .iter()
        .enumerate()
        .flat_map(|(i, inst)| {
            test_viewpoints(&inst.mesh, &cfg.views, seed.wrapping_add(i as u64))
                .into_iter()
                .map(move |v| (i, v))
        })
        .collect();
    jobs.into_par_iter()
        .map(|(i, view)| TestScene {
            id: format!("{}_v{:03}", test[i].name, view.index),
            instance: i,
            depth: render_depth(&test[i].mesh, &view, &cfg.camera),
            view,
        })
        .collect()
}

/// Camera-from-SSC-frame pose: rotation of the view, translation to the SSC.
pub fn ground_truth_pose(view: &Viewpoint, ssc_point: &Vec3) -> RigidPose {
    RigidPose::new(*view.pose.rotation(), view.pose.transform_point(ssc_point)).expect("view rotation is valid")
}

pub fn hypothesis_pose(h: &PoseHypothesis) -> RigidPose {
    RigidPose::new(euler_to_matrix(h.euler_rad), Vec3::from(h.center_m)).expect("euler rotation is valid")
}

/// Surface samples re-expressed about the SSC, plus the model diameter.
pub fn eval_cloud(mesh: &Mesh, ssc_point: &Vec3, cfg: &EvalConfig) -> Result<(PointCloud, f64), PipelineError> {
    let cloud = sample_surface(mesh, cfg.sample_count, cfg.sample_seed)?.translated(&-ssc_point);
    Ok((cloud, model_diameter(&mesh.vertex_cloud())))
}

/// Runs inference on every scene and scores the top-1 hypotheses.
pub fn evaluate_forest(
    forest: &Forest,
    category: &str,
    test: &[Instance],
    ssc: &SscResult,
    scenes: &[TestScene],
    cfg: &PipelineConfig,
) -> Result<(EvalReport, Vec<InferenceResult>), PipelineError> {
    let clouds = test
        .iter()
        .map(|inst| eval_cloud(&inst.mesh, &ssc.point_for(&inst.skeleton), &cfg.eval))
        .collect::<Result<Vec<_>, _>>()?;
    let results = scenes
        .par_iter()
        .map(|s| estimate_pose(&s.depth, forest, &cfg.inference))
        .collect::<Result<Vec<_>, _>>()?;
    let cases: Vec<EvalCase> = scenes
        .iter()
        .zip(&results)
        .map(|(s, r)| {
            let (cloud, diameter) = &clouds[s.instance];
            EvalCase {
                id: s.id.clone(),
                category: category.to_string(),
                cloud: cloud.clone(),
                ground_truth: ground_truth_pose(&s.view, &ssc.point_for(&test[s.instance].skeleton)),
                estimate: r.hypotheses.first().map(hypothesis_pose),
                diameter: *diameter,
                z: cfg.eval.z,
            }
        })
        .collect();
    Ok((recall(&cases, cfg.inference.top_k)?, results))
}

/// A category split into train and unseen test instances, ready to run.
pub struct Experiment {
    pub category: String,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub ssc: SscResult,
    pub set: TrainingSet,
    pub scenes: Vec<TestScene>,
}

impl Experiment {
    pub fn prepare(
        category: &str,
        train: Vec<Instance>,
        test: Vec<Instance>,
        cfg: &PipelineConfig,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        let ssc = category_ssc(&train)?;
        let set = build_training_set(category, &train, &ssc, cfg)?;
        let scenes = test_scenes(&test, cfg, seed);
        Ok(Self {
            category: category.to_string(),
            train,
            test,
            ssc,
            set,
            scenes,
        })
    }

    /// Trains with `cfg.forest` and evaluates on the unseen instances.
    pub fn run(&self, cfg: &PipelineConfig) -> Result<(Forest, Vec<GrowthLog>, EvalReport), PipelineError> {
        let (forest, logs) = train_forest(&self.set, &cfg.forest)?;
        let (report, _) = evaluate_forest(&forest, &self.category, &self.test, &self.ssc, &self.scenes, cfg)?;
        Ok((forest, logs, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::{generate, CategoryKind};

    #[test]
    fn ground_truth_maps_ssc_to_camera() {
        let view = sample_viewpoints(5, 3.0, true)[3];
        let ssc = Vec3::new(0.1, -0.2, 0.3);
        let gt = ground_truth_pose(&view, &ssc);
        let origin = gt.transform_point(&Vec3::zeros());
        assert!((origin - view.pose.transform_point(&ssc)).norm() < 1e-12);
    }

    #[test]
    fn shared_radius_overrides_instance_scale() {
        let instances: Vec<Instance> = generate(CategoryKind::Table, 3, 2)
            .into_iter()
            .map(|g| Instance { name: g.name, mesh: g.mesh, skeleton: g.skeleton })
            .collect();
        let mut cfg = ViewConfig::default();
        let diameters: Vec<f64> = instances.iter().map(|i| model_diameter(&i.mesh.vertex_cloud())).collect();
        assert!((view_radius(&instances[1].mesh, &cfg) - 2.0 * diameters[1]).abs() < 1e-12);
        let shared = category_radius(&instances, &cfg);
        assert!((shared - 2.0 * diameters.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        cfg.radius_m = Some(shared);
        for inst in &instances {
            for v in training_viewpoints(&inst.mesh, &cfg) {
                assert!((v.pose.inverse().translation().norm() - shared).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn test_views_are_seeded_and_look_at_origin() {
        let mesh = generate(CategoryKind::Table, 1, 0)[0].mesh.clone();
        let cfg = ViewConfig::default();
        let a = test_viewpoints(&mesh, &cfg, 4);
        assert_eq!(a.len(), 20);
        let b = test_viewpoints(&mesh, &cfg, 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.pose == y.pose));
        for v in &a {
            let o = v.pose.transform_point(&Vec3::zeros());
            assert!(o.x.abs() < 1e-9 && o.y.abs() < 1e-9 && o.z > 0.0);
        }
    }
}
