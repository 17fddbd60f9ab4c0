//! End-to-end composition: normalize a scene, fit the distance prior, run
//! the joint optimization, extract the mesh, and score it.

use std::path::Path;

use thiserror::Error;

use crate::config::TrainConfig;
use crate::fields::{train_udf, FieldError, UdfField, UdfTrainReport};
use crate::geom::Vec3;
use crate::mesh::{marching_cubes, sample_mesh, MeshError, TriangleMesh};
use crate::metrics::{chamfer_eval, MetricsReport};
use crate::scene::{normalize_scene, SceneBundle, SceneError};
use crate::trainer::{IterationLog, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Normalize in place and hand back the transform.
pub fn prepare(bundle: &mut SceneBundle) -> Result<crate::scene::Normalization, PipelineError> {
    Ok(normalize_scene(bundle)?)
}

/// Fit the unsigned prior on the normalized points.
pub fn train_prior(
    bundle: &SceneBundle,
    config: &TrainConfig,
) -> Result<(UdfField, UdfTrainReport), PipelineError> {
    Ok(train_udf(&bundle.points, &config.udf, config.seed)?)
}

/// Run the joint optimization to completion.
pub fn run_joint<'a>(
    bundle: &'a SceneBundle,
    udf: &'a UdfField,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    observer: impl FnMut(&IterationLog),
) -> Result<Trainer<'a>, PipelineError> {
    let mut trainer = Trainer::new(bundle, udf, config.clone())?;
    trainer.run(out_dir, observer)?;
    Ok(trainer)
}

/// Extract the zero-level set in the unit frame and de-normalize the
/// vertices back to the bundle's original coordinates.
pub fn extract_mesh(
    trainer: &Trainer,
    resolution: usize,
    norm: &crate::scene::Normalization,
) -> Result<TriangleMesh, PipelineError> {
    let mut mesh = marching_cubes(&trainer.sdf, resolution, ([-1.1; 3], [1.1; 3]))?;
    mesh.map_vertices(|v| norm.invert(v));
    Ok(mesh)
}

/// Capped unsquared Chamfer between a mesh sample and reference points, in
/// whatever frame both live in.
pub fn evaluate_mesh(
    mesh: &TriangleMesh,
    gt_points: &[Vec3],
    cap: f64,
    samples: usize,
    seed: u64,
    config_hash: u64,
) -> Result<MetricsReport, PipelineError> {
    let pred = sample_mesh(mesh, samples, seed)?;
    Ok(chamfer_eval(&pred, gt_points, cap, config_hash))
}

/// The four loss-switch variants, in published-table order.
pub fn ablation_variants() -> [(&'static str, bool, bool); 4] {
    [
        ("no-global-no-local", false, false),
        ("no-global", false, true),
        ("no-local", true, false),
        ("full", true, true),
    ]
}
