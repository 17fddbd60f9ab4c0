//! Joint optimization of the signed-distance field, color field, and
//! sharpness, driven by the rendering loss and the point-cloud priors.
//!
//! Each iteration renders a fresh ray batch, refreshes the pseudo on-surface
//! points from the batch's surface crossings, assembles the loss terms, and
//! steps three optimizers (SDF net, color net, sharpness). Per-iteration
//! randomness is derived from the seed and the iteration index alone, so
//! runs are reproducible and checkpoints resume exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::checkpoint::{Checkpoint, CheckpointError};
use crate::autodiff::graph::GraphError;
use crate::autodiff::optim::OptimError;
use crate::autodiff::{Adam, BoundMlp, LrSchedule, NodeId, Tape, Tensor};
use crate::camera::Camera;
use crate::config::TrainConfig;
use crate::features::{
    build_feature_map_from_channels, feature_channels_graph, local_loss_graph, novel_blend,
    synthesize_unseen_pose, FeatureError, FeatureMap, FeatureSource, PointPool, ViewFeatures,
};
use crate::fields::{SdfField, UdfField};
use crate::geom::{self, Vec3};
use crate::losses::{
    color_loss, eikonal_loss, global_loss, reg_loss, total_loss, LossError, LossParts, LossValues,
};
use crate::render::{
    pseudo_points_graph, render_rays_graph, sample_rays, ColorField, RenderError,
    SCENE_BALL_RADIUS,
};
use crate::scene::SceneBundle;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("scene is not normalized: point {index} has norm {norm:.3}")]
    NotNormalized { index: usize, norm: f64 },
    #[error("could not draw a ray batch intersecting the scene ball")]
    NoRays,
    #[error("training diverged at iteration {iteration}: loss {loss:.4} vs initial {initial:.4} for 1000 iterations")]
    Diverged {
        iteration: u64,
        loss: f64,
        initial: f64,
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One row of the training log (emitted every `log_every` iterations).
#[derive(Clone, Copy, Debug)]
pub struct IterationLog {
    pub iteration: u64,
    pub losses: LossValues,
    pub sharpness: f64,
    pub pseudo_count: usize,
    pub local_points: usize,
}

impl IterationLog {
    /// Machine-parseable key=value line.
    pub fn to_line(&self) -> String {
        format!(
            "iter={} loss={:.6} color={:.6} global={:.6} local={:.6} eikonal={:.6} reg={:.6} s={:.3} pseudo={} local_points={}",
            self.iteration,
            self.losses.total,
            self.losses.color,
            self.losses.global,
            self.losses.local,
            self.losses.eikonal,
            self.losses.reg,
            self.sharpness,
            self.pseudo_count,
            self.local_points
        )
    }
}

struct NovelState {
    cam: Camera,
    map: FeatureMap,
}

/// Mutable training state: fields, optimizers, point pool, novel-view cache.
pub struct Trainer<'a> {
    pub scene: &'a SceneBundle,
    pub udf: &'a UdfField,
    pub config: TrainConfig,
    pub sdf: SdfField,
    pub color: ColorField,
    log_s: Tensor,
    adam_sdf: Adam,
    adam_color: Adam,
    adam_s: Adam,
    pub pool: PointPool,
    feature_maps: Vec<FeatureMap>,
    novel: Option<NovelState>,
    pub iteration: u64,
    /// Average total loss over the first 100 iterations.
    initial_loss: Option<f64>,
    early_sum: f64,
    divergence_run: u64,
    /// Total loss per iteration, for determinism checks and monitoring.
    pub loss_trace: Vec<f64>,
    /// Count of iterations where local masking removed every point.
    pub local_mask_warnings: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(
        scene: &'a SceneBundle,
        udf: &'a UdfField,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        crate::tune_allocator();
        for (i, p) in scene.points.iter().enumerate() {
            let n = geom::norm(*p);
            if n > 1.05 {
                return Err(TrainError::NotNormalized { index: i, norm: n });
            }
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let sdf = SdfField::with_sphere_init(0.5, &mut init_rng);
        let color = ColorField::new(&mut init_rng);
        let adam_sdf = Adam::new(
            sdf.net.params().iter().map(|p| p.shape()).collect(),
            LrSchedule::cosine(config.lr, config.warmup, config.iterations),
        );
        let adam_color = Adam::new(
            color.net.params().iter().map(|p| p.shape()).collect(),
            LrSchedule::cosine(config.lr, config.warmup, config.iterations),
        );
        let adam_s = Adam::new(
            vec![(1, 1)],
            LrSchedule::cosine(config.lr, config.warmup, config.iterations),
        );
        let feature_maps = scene
            .images
            .iter()
            .map(crate::features::build_feature_map)
            .collect();
        Ok(Trainer {
            scene,
            udf,
            config: config.clone(),
            sdf,
            color,
            log_s: Tensor::scalar(config.s_init.ln()),
            adam_sdf,
            adam_color,
            adam_s,
            pool: PointPool::new(scene.points.clone()),
            feature_maps,
            novel: None,
            iteration: 0,
            initial_loss: None,
            early_sum: 0.0,
            divergence_run: 0,
            loss_trace: Vec::new(),
            local_mask_warnings: 0,
        })
    }

    pub fn sharpness(&self) -> f64 {
        self.log_s.as_scalar().exp()
    }

    fn iteration_rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.config
                .seed
                .wrapping_add((self.iteration + 1).wrapping_mul(0x9e3779b97f4a7c15))
                ^ salt,
        )
    }

    /// Draw a batch of pixel rays (with their supervision colors) across all
    /// views; rays that miss the scene ball are redrawn.
    fn draw_rays(&self, rng: &mut ChaCha8Rng) -> Result<(Vec<crate::camera::Ray>, Tensor), TrainError> {
        let want = self.config.rays_per_batch;
        let mut rays = Vec::with_capacity(want);
        let mut truth = Tensor::zeros(want, 3);
        let mut attempts = 0;
        while rays.len() < want {
            attempts += 1;
            if attempts > want * 50 {
                return Err(TrainError::NoRays);
            }
            let vi = rng.gen_range(0..self.scene.cameras.len());
            let cam = &self.scene.cameras[vi];
            let px = rng.gen_range(0..cam.width);
            let py = rng.gen_range(0..cam.height);
            let mut ray = cam.ray(px as f64 + 0.5, py as f64 + 0.5);
            if !ray.clip_to_ball(SCENE_BALL_RADIUS) {
                continue;
            }
            truth
                .row_mut(rays.len())
                .copy_from_slice(&self.scene.images[vi].pixel(px, py));
            rays.push(ray);
        }
        Ok((rays, truth))
    }

    /// Render a novel pose on the tape at reduced resolution and emit its
    /// live feature channels plus a frozen copy for reuse.
    fn novel_view_graph(
        &self,
        tape: &mut Tape,
        sdf_bound: &BoundMlp,
        color_bound: &BoundMlp,
        log_s: NodeId,
        cam_full: &Camera,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Camera, Vec<NodeId>, FeatureMap), TrainError> {
        let cam = cam_full.downscaled(self.config.novel_stride);
        let (gw, gh) = (cam.width, cam.height);
        let mut rays = Vec::new();
        let mut slot_of_ray = Vec::new();
        for gy in 0..gh {
            for gx in 0..gw {
                let mut ray = cam.ray(gx as f64 + 0.5, gy as f64 + 0.5);
                if ray.clip_to_ball(SCENE_BALL_RADIUS) {
                    slot_of_ray.push(gy * gw + gx);
                    rays.push(ray);
                }
            }
        }
        if rays.is_empty() {
            return Err(TrainError::NoRays);
        }
        let ts = sample_rays(&self.sdf, &rays, &self.config.sample, rng);
        let render = render_rays_graph(
            tape,
            sdf_bound,
            &self.color,
            color_bound,
            log_s,
            &rays,
            &ts,
        )?;
        // Assemble the full grid: rendered rows where rays hit the ball, a
        // shared black row elsewhere.
        let black = tape.constant(Tensor::zeros(1, 3));
        let combined = tape.concat_rows(render.color, black)?;
        let mut index = vec![rays.len(); gw * gh];
        for (ri, &slot) in slot_of_ray.iter().enumerate() {
            index[slot] = ri;
        }
        let grid = tape.gather_rows(combined, &index)?;
        let r = tape.slice_cols(grid, 0, 1)?;
        let g = tape.slice_cols(grid, 1, 2)?;
        let b = tape.slice_cols(grid, 2, 3)?;
        let r = tape.reshape(r, gh, gw)?;
        let g = tape.reshape(g, gh, gw)?;
        let b = tape.reshape(b, gh, gw)?;
        let channels = feature_channels_graph(tape, r, g, b)?;
        let frozen = build_feature_map_from_channels(
            tape,
            &channels,
            gw,
            gh,
            FeatureSource::RenderedNovelView,
        );
        Ok((cam, channels, frozen))
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<IterationLog, TrainError> {
        let mut rng = self.iteration_rng(0);
        let (rays, truth) = self.draw_rays(&mut rng)?;
        let ts = sample_rays(&self.sdf, &rays, &self.config.sample, &mut rng);

        let mut tape = Tape::new();
        let sdf_bound = self.sdf.net.bind(&mut tape);
        let color_bound = self.color.net.bind(&mut tape);
        let log_s = tape.input(self.log_s.clone());

        let render = render_rays_graph(
            &mut tape,
            &sdf_bound,
            &self.color,
            &color_bound,
            log_s,
            &rays,
            &ts,
        )?;
        let l_color = color_loss(&mut tape, render.color, &truth)?;

        // Prior-guided alignment over the ray samples; the prior is frozen,
        // so its values enter as constants.
        let l_global = if self.config.enable_global {
            let udf_vals = self.udf.eval_clamped_batch(&render.positions);
            Some(global_loss(
                &mut tape,
                render.f,
                &udf_vals,
                self.config.weights.epsilon,
            )?)
        } else {
            None
        };

        // Pseudo on-surface points from this batch's crossings.
        let pseudo = pseudo_points_graph(&mut tape, &render, &rays)?;
        let pseudo_values: Vec<Vec3> = match &pseudo {
            Some((node, _)) => {
                let v = tape.value(*node);
                (0..v.rows()).map(|i| v.point(i)).collect()
            }
            None => Vec::new(),
        };
        self.pool.refresh_pseudo(pseudo_values.clone());

        // Local projection-feature consistency.
        let mut local_points = 0;
        let l_local = if self.config.enable_local {
            // Pool batch: every pseudo point (they carry the gradient) plus
            // fixed points up to the budget.
            let fixed_budget = self
                .config
                .local_pool_batch
                .saturating_sub(pseudo_values.len());
            let fixed = self.pool.fixed();
            let mut fixed_sub: Vec<Vec3> = Vec::with_capacity(fixed_budget.min(fixed.len()));
            if fixed_budget >= fixed.len() {
                fixed_sub.extend_from_slice(fixed);
            } else {
                let mut idx: Vec<usize> = (0..fixed.len()).collect();
                for k in 0..fixed_budget {
                    let j = rng.gen_range(k..idx.len());
                    idx.swap(k, j);
                    fixed_sub.push(fixed[idx[k]]);
                }
            }
            let mut pool_values = fixed_sub.clone();
            pool_values.extend_from_slice(&pseudo_values);
            let pool_node = if pool_values.is_empty() {
                None
            } else {
                let fixed_node = tape.constant(Tensor::from_points(&fixed_sub));
                Some(match &pseudo {
                    Some((pn, _)) if !fixed_sub.is_empty() => {
                        tape.concat_rows(fixed_node, *pn)?
                    }
                    Some((pn, _)) => *pn,
                    None => fixed_node,
                })
            };
            if let Some(pool_node) = pool_node {
                let mut views: Vec<ViewFeatures> = Vec::new();
                for (cam, fm) in self.scene.cameras.iter().zip(&self.feature_maps) {
                    let channels = fm.channel_nodes(&mut tape);
                    views.push(ViewFeatures {
                        cam: cam.clone(),
                        channels,
                        source: FeatureSource::InputImage,
                    });
                }
                if self.config.enable_novel_views && self.config.novel_every > 0 {
                    if self.iteration % self.config.novel_every == 0 {
                        let pose = synthesize_unseen_pose(
                            &self.scene.cameras,
                            novel_blend(&mut rng),
                        );
                        let (cam_ds, channels, frozen) = self.novel_view_graph(
                            &mut tape,
                            &sdf_bound,
                            &color_bound,
                            log_s,
                            &pose,
                            &mut rng,
                        )?;
                        self.novel = Some(NovelState {
                            cam: cam_ds.clone(),
                            map: frozen,
                        });
                        views.push(ViewFeatures {
                            cam: cam_ds,
                            channels,
                            source: FeatureSource::RenderedNovelView,
                        });
                    } else if let Some(novel) = &self.novel {
                        views.push(ViewFeatures {
                            cam: novel.cam.clone(),
                            channels: novel.map.channel_nodes(&mut tape),
                            source: FeatureSource::RenderedNovelView,
                        });
                    }
                }
                let out = local_loss_graph(&mut tape, &views, &self.sdf, pool_node, &pool_values)?;
                if out.empty_after_masking {
                    self.local_mask_warnings += 1;
                }
                local_points = out.points_used;
                out.node
            } else {
                None
            }
        } else {
            None
        };

        // Eikonal term: half uniform ball samples, half jittered copies of
        // the current ray samples.
        let l_eikonal = {
            let count = self.config.eikonal_points;
            let normal = Normal::new(0.0, 0.03).unwrap();
            let mut pts = Vec::with_capacity(count);
            while pts.len() < count / 2 {
                let p = [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ];
                if geom::norm(p) <= 1.0 {
                    pts.push(p);
                }
            }
            while pts.len() < count {
                let row = rng.gen_range(0..render.positions.rows());
                let base = render.positions.point(row);
                pts.push([
                    base[0] + normal.sample(&mut rng),
                    base[1] + normal.sample(&mut rng),
                    base[2] + normal.sample(&mut rng),
                ]);
            }
            let node = tape.constant(Tensor::from_points(&pts));
            let (_, trace) = sdf_bound.forward(&mut tape, node)?;
            let grad = sdf_bound.input_gradient(&mut tape, &trace)?;
            eikonal_loss(&mut tape, grad)?
        };

        // Zero-level anchor at every SfM point.
        let l_reg = {
            let node = tape.constant(Tensor::from_points(self.pool.fixed()));
            let (f, _) = sdf_bound.forward(&mut tape, node)?;
            reg_loss(&mut tape, f)?
        };

        let parts = LossParts {
            color: l_color,
            global: l_global,
            local: l_local,
            eikonal: l_eikonal,
            reg: l_reg,
        };
        let (total, values) = total_loss(&mut tape, &parts, &self.config.weights)?;

        let grads = tape.backward(total)?;
        let sdf_grads = sdf_bound.param_gradients(&tape, &grads);
        let color_grads = color_bound.param_gradients(&tape, &grads);
        let s_grad = grads.get_or_zeros(log_s, 1, 1);
        self.adam_sdf
            .step_named(&mut self.sdf.net.params_mut(), &sdf_grads, |i| {
                format!("sdf net block {i}")
            })?;
        self.adam_color
            .step_named(&mut self.color.net.params_mut(), &color_grads, |i| {
                format!("color net block {i}")
            })?;
        self.adam_s
            .step_named(&mut [&mut self.log_s], &[s_grad], |_| "sharpness".into())?;

        self.iteration += 1;
        self.loss_trace.push(values.total);

        // Divergence detection against the first-100-iteration average.
        if self.initial_loss.is_none() {
            self.early_sum += values.total;
            if self.iteration == 100 {
                self.initial_loss = Some(self.early_sum / 100.0);
            }
        } else if let Some(initial) = self.initial_loss {
            if values.total > 10.0 * initial {
                self.divergence_run += 1;
                if self.divergence_run >= 1000 {
                    return Err(TrainError::Diverged {
                        iteration: self.iteration,
                        loss: values.total,
                        initial,
                    });
                }
            } else {
                self.divergence_run = 0;
            }
        }

        Ok(IterationLog {
            iteration: self.iteration,
            losses: values,
            sharpness: self.sharpness(),
            pseudo_count: self.pool.pseudo().len(),
            local_points,
        })
    }

    /// Run to `config.iterations`, invoking the observer on every log line,
    /// checkpointing into `out_dir` when set.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut observer: impl FnMut(&IterationLog),
    ) -> Result<(), TrainError> {
        while self.iteration < self.config.iterations {
            let log = self.step()?;
            if self.config.log_every > 0 && log.iteration % self.config.log_every == 0 {
                observer(&log);
            }
            if let Some(dir) = out_dir {
                if self.config.checkpoint_every > 0
                    && log.iteration % self.config.checkpoint_every == 0
                {
                    self.save_checkpoint(&dir.join("train.ckpt"))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("train.ckpt"))?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("iteration", self.iteration as f64);
        ck.insert("log_s", self.log_s.clone());
        store_params(&mut ck, "sdf", self.sdf.net.params());
        store_params(&mut ck, "color", self.color.net.params());
        store_adam(&mut ck, "adam.sdf", &self.adam_sdf);
        store_adam(&mut ck, "adam.color", &self.adam_color);
        store_adam(&mut ck, "adam.s", &self.adam_s);
        if let Some(novel) = &self.novel {
            for (c, ch) in novel.map.channels.iter().enumerate() {
                ck.insert(format!("novel.ch{c}"), ch.clone());
            }
            ck.insert("novel.cam", camera_tensor(&novel.cam));
        }
        ck
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        Ok(self.checkpoint().save(path)?)
    }

    /// Restore a trainer from a checkpoint produced by the same scene and
    /// configuration.
    pub fn resume(
        scene: &'a SceneBundle,
        udf: &'a UdfField,
        config: TrainConfig,
        ck: &Checkpoint,
    ) -> Result<Self, TrainError> {
        let mut t = Trainer::new(scene, udf, config)?;
        t.iteration = ck.get_scalar("iteration")? as u64;
        t.log_s = ck.get("log_s")?.clone();
        load_params(ck, "sdf", &mut t.sdf.net.params_mut())?;
        load_params(ck, "color", &mut t.color.net.params_mut())?;
        load_adam(ck, "adam.sdf", &mut t.adam_sdf)?;
        load_adam(ck, "adam.color", &mut t.adam_color)?;
        load_adam(ck, "adam.s", &mut t.adam_s)?;
        if ck.contains("novel.ch0") {
            let mut channels = Vec::new();
            for c in 0..crate::features::FEATURE_CHANNELS {
                channels.push(ck.get(&format!("novel.ch{c}"))?.clone());
            }
            let cam = camera_from_tensor(ck.get("novel.cam")?);
            let (h, w) = channels[0].shape();
            t.novel = Some(NovelState {
                cam,
                map: FeatureMap {
                    width: w,
                    height: h,
                    channels,
                    source: FeatureSource::RenderedNovelView,
                },
            });
        }
        // Divergence tracking restarts; the trace covers the resumed run.
        if t.iteration >= 100 {
            t.initial_loss = Some(f64::INFINITY);
        }
        Ok(t)
    }
}

fn store_params(ck: &mut Checkpoint, prefix: &str, params: Vec<&Tensor>) {
    for (i, p) in params.into_iter().enumerate() {
        ck.insert(format!("{prefix}.p{i}"), p.clone());
    }
}

fn load_params(
    ck: &Checkpoint,
    prefix: &str,
    params: &mut [&mut Tensor],
) -> Result<(), CheckpointError> {
    for (i, p) in params.iter_mut().enumerate() {
        **p = ck.get(&format!("{prefix}.p{i}"))?.clone();
    }
    Ok(())
}

fn store_adam(ck: &mut Checkpoint, prefix: &str, adam: &Adam) {
    let (m, v, t) = adam.state();
    for (i, x) in m.iter().enumerate() {
        ck.insert(format!("{prefix}.m{i}"), x.clone());
    }
    for (i, x) in v.iter().enumerate() {
        ck.insert(format!("{prefix}.v{i}"), x.clone());
    }
    ck.insert_scalar(format!("{prefix}.t"), t as f64);
}

fn load_adam(ck: &Checkpoint, prefix: &str, adam: &mut Adam) -> Result<(), CheckpointError> {
    let (m0, v0, _) = adam.state();
    let n = m0.len();
    let _ = v0;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        m.push(ck.get(&format!("{prefix}.m{i}"))?.clone());
        v.push(ck.get(&format!("{prefix}.v{i}"))?.clone());
    }
    let t = ck.get_scalar(&format!("{prefix}.t"))? as u64;
    adam.restore(m, v, t);
    Ok(())
}

fn camera_tensor(cam: &Camera) -> Tensor {
    // The rotation is stored entrywise: resumes must be bit-exact, and a
    // quaternion round trip is not.
    let mut v = vec![
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        cam.width as f64,
        cam.height as f64,
    ];
    for row in &cam.rotation {
        v.extend_from_slice(row);
    }
    v.extend_from_slice(&cam.translation);
    Tensor::from_vec(1, 18, v)
}

fn camera_from_tensor(t: &Tensor) -> Camera {
    let d = t.data();
    Camera {
        fx: d[0],
        fy: d[1],
        cx: d[2],
        cy: d[3],
        width: d[4] as usize,
        height: d[5] as usize,
        rotation: [
            [d[6], d[7], d[8]],
            [d[9], d[10], d[11]],
            [d[12], d[13], d[14]],
        ],
        translation: [d[15], d[16], d[17]],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::synth::{generate, SyntheticSpec};
    use crate::scene::{normalize_scene, RigPreset, ShapeSpec};
    use rand::SeedableRng;

    fn tiny_scene() -> SceneBundle {
        let mut spec = SyntheticSpec::new(
            ShapeSpec::Sphere { radius: 0.55 },
            RigPreset::LittleOverlap,
        );
        spec.image_size = 48;
        spec.focal = 55.0;
        spec.point_count = 120;
        let (mut bundle, _) = generate(&spec, 11);
        normalize_scene(&mut bundle).unwrap();
        bundle
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.iterations = 30;
        cfg.rays_per_batch = 24;
        cfg.sample.n_coarse = 20;
        cfg.sample.n_importance = 8;
        cfg.eikonal_points = 64;
        cfg.local_pool_batch = 48;
        cfg.novel_every = 10;
        cfg.novel_stride = 8;
        cfg.log_every = 10;
        cfg.checkpoint_every = 0;
        cfg
    }

    #[test]
    fn zero_iterations_leave_fields_unchanged() {
        let scene = tiny_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let udf = UdfField::new(&mut rng);
        let mut cfg = tiny_config();
        cfg.iterations = 0;
        let mut trainer = Trainer::new(&scene, &udf, cfg).unwrap();
        let before: Vec<Tensor> = trainer.sdf.net.params().into_iter().cloned().collect();
        trainer.run(None, |_| {}).unwrap();
        for (a, b) in trainer.sdf.net.params().iter().zip(&before) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(trainer.iteration, 0);
    }

    #[test]
    fn fixed_seed_gives_identical_loss_trace() {
        let scene = tiny_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let udf = UdfField::new(&mut rng);
        let run = || {
            let mut trainer = Trainer::new(&scene, &udf, tiny_config()).unwrap();
            trainer.run(None, |_| {}).unwrap();
            trainer.loss_trace.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 30);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_resume_reproduces_losses() {
        let scene = tiny_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let udf = UdfField::new(&mut rng);
        let mut cfg = tiny_config();
        cfg.iterations = 12;
        let mut trainer = Trainer::new(&scene, &udf, cfg.clone()).unwrap();
        for _ in 0..12 {
            trainer.step().unwrap();
        }
        let ck = trainer.checkpoint();

        // Continue the original for ten more steps.
        let mut continued = Vec::new();
        for _ in 0..10 {
            continued.push(trainer.step().unwrap().losses.total);
        }
        // Resume from the checkpoint and repeat.
        let mut resumed = Trainer::resume(&scene, &udf, cfg, &ck).unwrap();
        assert_eq!(resumed.iteration, 12);
        let mut replayed = Vec::new();
        for _ in 0..10 {
            replayed.push(resumed.step().unwrap().losses.total);
        }
        for (a, b) in continued.iter().zip(&replayed) {
            assert_eq!(a.to_bits(), b.to_bits(), "{continued:?} vs {replayed:?}");
        }
    }

    #[test]
    fn unnormalized_scene_rejected() {
        let mut scene = tiny_scene();
        scene.points[0] = [5.0, 0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let udf = UdfField::new(&mut rng);
        assert!(matches!(
            Trainer::new(&scene, &udf, tiny_config()),
            Err(TrainError::NotNormalized { .. })
        ));
    }

    #[test]
    fn log_line_is_machine_parseable() {
        let log = IterationLog {
            iteration: 100,
            losses: LossValues {
                total: 1.5,
                color: 1.0,
                global: 0.2,
                local: 0.1,
                eikonal: 0.15,
                reg: 0.05,
            },
            sharpness: 21.5,
            pseudo_count: 87,
            local_points: 96,
        };
        let line = log.to_line();
        for key in ["iter=", "loss=", "color=", "global=", "local=", "eikonal=", "reg=", "s=", "pseudo="] {
            assert!(line.contains(key), "{line}");
        }
    }
}
