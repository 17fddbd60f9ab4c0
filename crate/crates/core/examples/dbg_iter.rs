// Section timing of one full-scale training iteration.
use std::time::Instant;
use surfrec_core::config::TrainConfig;
use surfrec_core::pipeline::*;
use surfrec_core::scene::synth::{generate, SyntheticSpec};
use surfrec_core::scene::{RigPreset, ShapeSpec};
use surfrec_core::trainer::Trainer;

fn main() {
    surfrec_core::tune_allocator();
    let spec = SyntheticSpec::new(ShapeSpec::Sphere { radius: 0.55 }, RigPreset::LittleOverlap);
    let (mut bundle, _) = generate(&spec, 7);
    prepare(&mut bundle).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.udf.steps = 500;
    let (udf, _) = train_prior(&bundle, &cfg).unwrap();
    let mut trainer = Trainer::new(&bundle, &udf, cfg).unwrap();
    // warm up 50 iterations so pseudo points and novel maps exist
    for _ in 0..50 { trainer.step().unwrap(); }
    let t0 = Instant::now();
    let n = 30;
    for _ in 0..n { trainer.step().unwrap(); }
    println!("full-scale iteration: {:.0} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
