//! Command-line pipeline: synthesize scenes, fit the distance prior, run the
//! joint optimization, extract and render results, and score meshes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use surfrec_core::autodiff::Checkpoint;
use surfrec_core::config::TrainConfig;
use surfrec_core::fields::UdfField;
use surfrec_core::geom;
use surfrec_core::mesh::{read_ply, sample_mesh, write_obj, write_ply};
use surfrec_core::metrics::chamfer_eval;
use surfrec_core::pipeline::{self, ablation_variants};
use surfrec_core::render::{render_image, render_normal_image, ColorField, SampleConfig};
use surfrec_core::scene::{
    self, load_scene, normalize_scene, read_xyz, synth, RigPreset, SceneBundle, ShapeSpec,
};
use surfrec_core::trainer::Trainer;

#[derive(Parser)]
#[command(name = "surfrec", version, about = "Sparse-view neural surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the training-related subcommands; file values come first,
/// flags override them.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    rays_per_batch: Option<usize>,
    /// Weight of the global prior alignment term.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the local feature-consistency term.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Weight of the eikonal term.
    #[arg(long)]
    lambda3: Option<f64>,
    /// Weight of the point-anchor term.
    #[arg(long)]
    lambda4: Option<f64>,
    /// Prior cut-off threshold (scene-normalized units).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Marching-cubes resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Disable the global prior term.
    #[arg(long)]
    no_global: bool,
    /// Disable the local feature term.
    #[arg(long)]
    no_local: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::parse_file(path)?,
            None => TrainConfig::desk(),
        };
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.rays_per_batch {
            cfg.rays_per_batch = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.weights.global = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.weights.local = v;
        }
        if let Some(v) = self.lambda3 {
            cfg.weights.eikonal = v;
        }
        if let Some(v) = self.lambda4 {
            cfg.weights.reg = v;
        }
        if let Some(v) = self.epsilon {
            cfg.weights.epsilon = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.resolution {
            cfg.resolution = v;
        }
        if self.no_global {
            cfg.enable_global = false;
        }
        if self.no_local {
            cfg.enable_local = false;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with analytic ground truth.
    Synth {
        /// Shape: "sphere R", "box HX HY HZ", or "torus MAJOR MINOR".
        #[arg(long, default_value = "sphere 0.55")]
        shape: String,
        /// Camera rig: large-overlap or little-overlap.
        #[arg(long, default_value = "little-overlap")]
        rig: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Square image resolution.
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Number of SfM-like points.
        #[arg(long, default_value_t = 300)]
        points: usize,
        /// Ground-truth surface samples written for evaluation.
        #[arg(long, default_value_t = 20000)]
        gt_samples: usize,
    },
    /// Fit the unsigned distance prior to the scene's points.
    TrainUdf {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Joint optimization of the distance and color fields.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated view indices to train on (default: all).
        #[arg(long)]
        views: Option<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Extract the zero-level-set mesh from a training checkpoint.
    Extract {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint path (default: OUT/train.ckpt).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render color and normal images from a checkpoint.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// View index to re-render (default: every input view).
        #[arg(long)]
        view: Option<usize>,
        /// Render every Nth pixel and upsample.
        #[arg(long, default_value_t = 2)]
        stride: usize,
        /// Also write PNG copies.
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Capped symmetric Chamfer distance between a mesh and reference points.
    Eval {
        /// Predicted mesh (ascii PLY).
        #[arg(long)]
        pred: PathBuf,
        /// Reference points (XYZ text).
        #[arg(long)]
        gt: PathBuf,
        /// Distance cap as a fraction of the reference bounding radius.
        #[arg(long, default_value_t = 0.1)]
        cap_fraction: f64,
        /// Mesh surface samples used for the predicted set.
        #[arg(long, default_value_t = 10000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the four loss-switch variants and report their Chamfer ordering.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> Result<()> {
    surfrec_core::tune_allocator();
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            shape,
            rig,
            out,
            seed,
            size,
            points,
            gt_samples,
        } => cmd_synth(&shape, &rig, &out, seed, size, points, gt_samples),
        Command::TrainUdf { scene, out, config } => cmd_train_udf(&scene, &out, &config),
        Command::Train {
            scene,
            out,
            views,
            config,
        } => cmd_train(&scene, &out, views.as_deref(), &config),
        Command::Extract {
            scene,
            out,
            ckpt,
            config,
        } => cmd_extract(&scene, &out, ckpt.as_deref(), &config),
        Command::Render {
            scene,
            out,
            ckpt,
            view,
            stride,
            png,
            config,
        } => cmd_render(&scene, &out, ckpt.as_deref(), view, stride, png, &config),
        Command::Eval {
            pred,
            gt,
            cap_fraction,
            samples,
            seed,
        } => cmd_eval(&pred, &gt, cap_fraction, samples, seed),
        Command::Ablate { scene, out, config } => cmd_ablate(&scene, &out, &config),
    }
}

fn cmd_synth(
    shape: &str,
    rig: &str,
    out: &Path,
    seed: u64,
    size: usize,
    points: usize,
    gt_samples: usize,
) -> Result<()> {
    let shape = ShapeSpec::parse(shape).map_err(anyhow::Error::msg)?;
    let rig = RigPreset::parse(rig).map_err(anyhow::Error::msg)?;
    let mut spec = synth::SyntheticSpec::new(shape, rig);
    spec.image_size = size;
    spec.focal = size as f64 * 110.0 / 96.0;
    spec.point_count = points;
    let (bundle, shape) = synth::generate(&spec, seed);
    synth::save_scene(out, &bundle, &shape, gt_samples, seed)?;
    println!(
        "scene written to {}: {} views at {}x{}, {} points, rig {}",
        out.display(),
        bundle.images.len(),
        size,
        size,
        bundle.points.len(),
        rig.describe()
    );
    Ok(())
}

fn load_normalized(scene_dir: &Path) -> Result<(SceneBundle, scene::SceneConfig)> {
    let (mut bundle, cfg) = load_scene(scene_dir)
        .with_context(|| format!("loading scene from {}", scene_dir.display()))?;
    normalize_scene(&mut bundle)?;
    Ok((bundle, cfg))
}

fn udf_ckpt_path(out: &Path) -> PathBuf {
    out.join("udf.ckpt")
}

fn cmd_train_udf(scene_dir: &Path, out: &Path, config: &ConfigArgs) -> Result<()> {
    let cfg = config.build()?;
    let (bundle, _) = load_normalized(scene_dir)?;
    fs::create_dir_all(out)?;
    let (udf, report) = pipeline::train_prior(&bundle, &cfg)?;
    let mut ck = Checkpoint::new();
    for (i, p) in udf.net.params().into_iter().enumerate() {
        ck.insert(format!("udf.p{i}"), p.clone());
    }
    ck.insert_scalar("final_loss", report.final_loss);
    ck.save(&udf_ckpt_path(out))?;
    println!(
        "prior fitted: final loss {:.6}, {} skipped queries, saved to {}",
        report.final_loss,
        report.skipped_queries,
        udf_ckpt_path(out).display()
    );
    Ok(())
}

fn load_udf(out: &Path, seed: u64) -> Result<UdfField> {
    let path = udf_ckpt_path(out);
    if !path.exists() {
        bail!(
            "no distance prior at {}; run `surfrec train-udf` first",
            path.display()
        );
    }
    let ck = Checkpoint::load(&path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut udf = UdfField::new(&mut rng);
    for (i, p) in udf.net.params_mut().into_iter().enumerate() {
        *p = ck.get(&format!("udf.p{i}"))?.clone();
    }
    Ok(udf)
}

fn apply_view_selection(bundle: &mut SceneBundle, views: Option<&str>) -> Result<()> {
    let Some(list) = views else {
        return Ok(());
    };
    let indices: Vec<usize> = list
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .context("parsing --views")?;
    for &i in &indices {
        if i >= bundle.images.len() {
            bail!("view index {i} out of range ({} views)", bundle.images.len());
        }
    }
    bundle.images = indices.iter().map(|&i| bundle.images[i].clone()).collect();
    bundle.cameras = indices.iter().map(|&i| bundle.cameras[i].clone()).collect();
    Ok(())
}

fn cmd_train(scene_dir: &Path, out: &Path, views: Option<&str>, config: &ConfigArgs) -> Result<()> {
    let cfg = config.build()?;
    let (mut bundle, _) = load_normalized(scene_dir)?;
    apply_view_selection(&mut bundle, views)?;
    fs::create_dir_all(out)?;
    let udf = load_udf(out, cfg.seed)?;
    let mut log_file = fs::File::create(out.join("train.log"))?;
    use std::io::Write as _;
    let trainer = pipeline::run_joint(&bundle, &udf, &cfg, Some(out), |log| {
        let line = log.to_line();
        println!("{line}");
        let _ = writeln!(log_file, "{line}");
    })?;
    fs::write(out.join("train.conf"), cfg.serialize())?;
    println!(
        "trained {} iterations (s = {:.1}); checkpoint at {}",
        trainer.iteration,
        trainer.sharpness(),
        out.join("train.ckpt").display()
    );
    Ok(())
}

fn load_trained<'a>(
    bundle: &'a SceneBundle,
    udf: &'a UdfField,
    cfg: &TrainConfig,
    ckpt: &Path,
) -> Result<Trainer<'a>> {
    let ck = Checkpoint::load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    Ok(Trainer::resume(bundle, udf, cfg.clone(), &ck)?)
}

fn cmd_extract(
    scene_dir: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.build()?;
    let (bundle, _) = load_normalized(scene_dir)?;
    let udf = load_udf(out, cfg.seed)?;
    let ckpt = ckpt
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("train.ckpt"));
    let trainer = load_trained(&bundle, &udf, &cfg, &ckpt)?;
    let mesh = pipeline::extract_mesh(&trainer, cfg.resolution, &bundle.normalization)?;
    if mesh.is_empty() {
        eprintln!("warning: the field has no zero crossing; mesh is empty");
    }
    fs::create_dir_all(out)?;
    write_ply(&out.join("mesh.ply"), &mesh)?;
    write_obj(&out.join("mesh.obj"), &mesh)?;
    println!(
        "extracted {} vertices / {} triangles at resolution {} -> {}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        cfg.resolution,
        out.join("mesh.ply").display()
    );
    Ok(())
}

fn cmd_render(
    scene_dir: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    view: Option<usize>,
    stride: usize,
    png: bool,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.build()?;
    let (bundle, _) = load_normalized(scene_dir)?;
    let udf = load_udf(out, cfg.seed)?;
    let ckpt = ckpt
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.join("train.ckpt"));
    let trainer = load_trained(&bundle, &udf, &cfg, &ckpt)?;
    fs::create_dir_all(out)?;
    let indices: Vec<usize> = match view {
        Some(v) => vec![v],
        None => (0..bundle.cameras.len()).collect(),
    };
    let sample = SampleConfig::default();
    for vi in indices {
        let cam = bundle
            .cameras
            .get(vi)
            .with_context(|| format!("view {vi} out of range"))?;
        let img = render_image(
            &trainer.sdf,
            &trainer.color as &ColorField,
            trainer.sharpness(),
            cam,
            stride,
            &sample,
            cfg.seed,
        )?;
        let normals = render_normal_image(&trainer.sdf, trainer.sharpness(), cam, stride, &sample, cfg.seed)?;
        let color_path = out.join(format!("render_{vi:03}.ppm"));
        scene::image::write_ppm(&color_path, &img)?;
        scene::image::write_ppm(&out.join(format!("normals_{vi:03}.ppm")), &normals)?;
        if png {
            scene::image::save_png(&out.join(format!("render_{vi:03}.png")), &img)?;
            scene::image::save_png(&out.join(format!("normals_{vi:03}.png")), &normals)?;
        }
        println!("rendered view {vi} -> {}", color_path.display());
    }
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path, cap_fraction: f64, samples: usize, seed: u64) -> Result<()> {
    let mesh = read_ply(pred)?;
    if mesh.is_empty() {
        bail!("predicted mesh {} has no triangles", pred.display());
    }
    let gt_points = read_xyz(gt)?;
    if gt_points.is_empty() {
        bail!("no reference points in {}", gt.display());
    }
    // Cap relative to the reference bounding radius.
    let mut centroid = [0.0; 3];
    for p in &gt_points {
        centroid = geom::add(centroid, *p);
    }
    centroid = geom::scale(centroid, 1.0 / gt_points.len() as f64);
    let radius = gt_points
        .iter()
        .map(|p| geom::dist(*p, centroid))
        .fold(0.0f64, f64::max);
    let cap = cap_fraction * radius;
    let pred_points = sample_mesh(&mesh, samples, seed)?;
    let report = chamfer_eval(&pred_points, &gt_points, cap, 0);
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_ablate(scene_dir: &Path, out: &Path, config: &ConfigArgs) -> Result<()> {
    let cfg = config.build()?;
    let (bundle, scene_cfg) = load_normalized(scene_dir)?;
    fs::create_dir_all(out)?;
    let gt_points = match (&scene_cfg.gt_points, &scene_cfg.shape) {
        (Some(path), _) => read_xyz(path)?,
        (None, Some(shape)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x77);
            shape.sample_surface(20000, &mut rng)
        }
        _ => bail!("scene provides neither gt_points nor an analytic shape"),
    };
    let scene_radius = 1.0 / bundle.normalization.scale;
    let cap = 0.1 * scene_radius;
    let (udf, _) = pipeline::train_prior(&bundle, &cfg)?;
    let mut results = Vec::new();
    for (name, enable_global, enable_local) in ablation_variants() {
        let mut variant = cfg.clone();
        variant.enable_global = enable_global;
        variant.enable_local = enable_local;
        println!("--- variant {name} ---");
        let trainer = pipeline::run_joint(&bundle, &udf, &variant, None, |log| {
            println!("{}", log.to_line());
        })?;
        let mesh = pipeline::extract_mesh(&trainer, variant.resolution, &bundle.normalization)?;
        let report = if mesh.is_empty() {
            eprintln!("warning: variant {name} produced an empty mesh; scoring as cap");
            None
        } else {
            Some(pipeline::evaluate_mesh(
                &mesh,
                &gt_points,
                cap,
                10000,
                cfg.seed,
                variant.hash(),
            )?)
        };
        let chamfer = report.map_or(cap, |r| r.chamfer_mean);
        if let Some(r) = report {
            fs::write(out.join(format!("ablate_{name}.txt")), r.to_text())?;
        }
        println!("variant {name}: chamfer_mean = {chamfer:.5}");
        results.push((name, chamfer));
    }
    println!("--- summary ---");
    for (name, chamfer) in &results {
        println!("{name}: {chamfer:.5}");
    }
    let full = results.iter().find(|(n, _)| *n == "full").unwrap().1;
    let best = results
        .iter()
        .map(|(_, c)| *c)
        .fold(f64::INFINITY, f64::min);
    if full <= best + 1e-12 {
        println!("ordering: full loss is best");
    } else {
        println!("ordering: full loss is NOT best");
    }
    Ok(())
}
