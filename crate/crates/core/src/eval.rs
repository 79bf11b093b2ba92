//! Average-distance pose error about the SSC and recall reporting.
//!
//! ω is the mean distance between the model cloud X (expressed in the SSC
//! frame) under the ground-truth pose and under the estimate. A case is
//! correct when ω ≤ zΦ, with Φ the model diameter.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, RigidPose};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no cases to evaluate")]
    NoCases,
    #[error("invalid case {id}: {reason}")]
    InvalidCase { id: String, reason: String },
}

#[derive(Debug, Clone)]
pub struct EvalCase {
    pub id: String,
    pub category: String,
    /// Model surface samples in the SSC frame.
    pub cloud: PointCloud,
    pub ground_truth: RigidPose,
    /// Top-1 estimate; `None` when inference produced no hypothesis.
    pub estimate: Option<RigidPose>,
    pub diameter: f64,
    pub z: f64,
}

impl EvalCase {
    fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: &str| EvalError::InvalidCase {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.cloud.is_empty() {
            return Err(bad("empty model cloud"));
        }
        if !(self.diameter > 0.0) {
            return Err(bad("diameter must be positive"));
        }
        if !(self.z > 0.0) {
            return Err(bad("z must be positive"));
        }
        Ok(())
    }
}

/// Mean of ‖(R x + T) − (R̃ x + T̃)‖ over the cloud.
pub fn average_distance(cloud: &PointCloud, gt: &RigidPose, est: &RigidPose) -> f64 {
    let sum: f64 = cloud
        .points
        .iter()
        .map(|x| (gt.transform_point(x) - est.transform_point(x)).norm())
        .sum();
    sum / cloud.len() as f64
}

/// ω ≤ zΦ, inclusive.
pub fn is_correct(omega: f64, z: f64, diameter: f64) -> bool {
    omega <= z * diameter
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub category: String,
    /// `None` when there was no estimate.
    pub omega: Option<f64>,
    pub threshold: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecall {
    pub category: String,
    pub cases: usize,
    pub correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub z: f64,
    pub sample_count: usize,
    pub top_k: usize,
    pub cases: Vec<CaseResult>,
    pub categories: Vec<CategoryRecall>,
    /// Mean of the per-category recalls.
    pub average_recall: f64,
}

/// Unweighted mean of per-category recall percentages.
pub fn average_recall(recalls: &[f64]) -> f64 {
    recalls.iter().sum::<f64>() / recalls.len() as f64
}

pub fn evaluate_case(case: &EvalCase) -> Result<CaseResult, EvalError> {
    case.validate()?;
    let omega = case
        .estimate
        .as_ref()
        .map(|est| average_distance(&case.cloud, &case.ground_truth, est));
    Ok(CaseResult {
        id: case.id.clone(),
        category: case.category.clone(),
        omega,
        threshold: case.z * case.diameter,
        correct: omega.is_some_and(|w| is_correct(w, case.z, case.diameter)),
    })
}

/// Scores every case and summarises recall per category. Rows are ordered by
/// (category, id), so the report does not depend on input order.
pub fn recall(cases: &[EvalCase], top_k: usize) -> Result<EvalReport, EvalError> {
    if cases.is_empty() {
        return Err(EvalError::NoCases);
    }
    let mut rows = cases.iter().map(evaluate_case).collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| (&a.category, &a.id).cmp(&(&b.category, &b.id)));
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in &rows {
        let e = per.entry(&r.category).or_default();
        e.0 += 1;
        e.1 += r.correct as usize;
    }
    let categories: Vec<CategoryRecall> = per
        .into_iter()
        .map(|(category, (n, ok))| CategoryRecall {
            category: category.to_string(),
            cases: n,
            correct: ok,
            recall: 100.0 * ok as f64 / n as f64,
        })
        .collect();
    let average = average_recall(&categories.iter().map(|c| c.recall).collect::<Vec<_>>());
    Ok(EvalReport {
        z: cases[0].z,
        sample_count: cases[0].cloud.len(),
        top_k,
        cases: rows,
        categories,
        average_recall: average,
    })
}

pub const CSV_HEADER: &str = "id,category,omega_m,threshold_m,correct";

impl EvalReport {
    /// Per-case rows under [`CSV_HEADER`]; a missing estimate leaves `omega_m` empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.cases {
            let omega = r.omega.map(|w| format!("{w:.9}")).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{:.9},{}", r.id, r.category, omega, r.threshold, r.correct as u8);
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}
