use std::time::Instant;
use surfrec_core::config::TrainConfig;
use surfrec_core::pipeline::*;
use surfrec_core::scene::synth::{generate, SyntheticSpec};
use surfrec_core::scene::{RigPreset, ShapeSpec};

fn main() {
    surfrec_core::tune_allocator();
    let spec = SyntheticSpec::new(ShapeSpec::Sphere { radius: 0.55 }, RigPreset::LittleOverlap);
    let (mut bundle, shape) = generate(&spec, 7);
    let norm = prepare(&mut bundle).unwrap();
    println!("scene normalized: scale {:.4}, {} points", norm.scale, bundle.points.len());

    let mut cfg = TrainConfig::desk();
    cfg.iterations = 3000;
    cfg.rays_per_batch = 64;
    cfg.sample.n_coarse = 48;
    cfg.sample.n_importance = 24;
    cfg.eikonal_points = 256;
    cfg.local_pool_batch = 96;
    cfg.udf.steps = 3000;

    let t0 = Instant::now();
    let (udf, report) = train_prior(&bundle, &cfg).unwrap();
    println!("prior: loss {:.5}, skipped {}, {:.1}s", report.final_loss, report.skipped_queries, t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let trainer = run_joint(&bundle, &udf, &cfg, None, |log| {
        if log.iteration % 500 == 0 {
            println!("{} [{:.0} ms/iter]", log.to_line(), t0.elapsed().as_secs_f64()*1000.0/log.iteration as f64);
        }
    }).unwrap();

    let t0 = Instant::now();
    let mesh = extract_mesh(&trainer, 64, &norm).unwrap();
    println!("mesh: {} verts {} tris [{:.1}s]", mesh.vertices.len(), mesh.triangles.len(), t0.elapsed().as_secs_f64());
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let gt = shape.sample_surface(10000, &mut rng);
    let scene_radius = 1.0 / norm.scale;
    let m = evaluate_mesh(&mesh, &gt, 0.1 * scene_radius, 10000, 1, cfg.hash()).unwrap();
    println!("chamfer mean = {:.4} ({:.1}% of scene radius {:.3})", m.chamfer_mean, 100.0 * m.chamfer_mean / scene_radius, scene_radius);
}
