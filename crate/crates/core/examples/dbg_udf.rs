use rand::SeedableRng;
use surfrec_core::fields::*;
use surfrec_core::geom;
use surfrec_core::scene::ShapeSpec;

fn main() {
    surfrec_core::tune_allocator();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let shape = ShapeSpec::Sphere { radius: 0.8 };
    let pts = shape.sample_surface(500, &mut rng);
    for steps in [1000u64, 4000] {
        let config = UdfTrainConfig { steps, ..Default::default() };
        let t0 = std::time::Instant::now();
        let (field, report) = train_udf(&pts, &config, 7).unwrap();
        let held = shape.sample_surface(100, &mut rng);
        let mean_abs: f64 = held.iter().map(|p| field.eval(*p).abs()).sum::<f64>() / 100.0;
        let mean_raw: f64 = held.iter().map(|p| field.eval(*p)).sum::<f64>() / 100.0;
        // value at center and far point (true dist 0.8 and ~0.45)
        let f0 = field.eval([0.0,0.0,0.0]);
        let ffar = field.eval([1.25,0.0,0.0]);
        // contraction stat on exterior queries
        let mut improved = 0; let mut total = 0;
        for i in 0..200 {
            let t = i as f64 * 0.37;
            let dir = geom::normalize([t.sin()*(1.3*t).cos(), t.sin()*(1.3*t).sin(), t.cos()]);
            let q = geom::scale(dir, 0.9 + 0.3 * ((i % 7) as f64 / 7.0));
            let (moved, _) = field.move_queries(&[q]);
            if let Some(z) = moved.first() {
                let before = (geom::norm(q) - 0.8).abs();
                let after = (geom::norm(*z) - 0.8).abs();
                total += 1;
                if after < before { improved += 1; }
            }
        }
        println!("steps={steps} loss={:.5} held|f|={:.4} held f={:.4} f(0)={:.3} f(far)={:.3} contract {improved}/{total} [{:.1}s]",
                 report.final_loss, mean_abs, mean_raw, f0, ffar, t0.elapsed().as_secs_f64());
    }
}
