use regionlets::config::ExperimentConfig;
use regionlets::train::{batch_step, training_set};
use regionlets::head::ModelParams;
use regionlets::rng::SplitMix64;

fn main() {
    let exp = ExperimentConfig::default();
    let data = training_set(&exp).unwrap();
    let mut rng = SplitMix64::new(3);
    let params = ModelParams::init(&exp.pipeline, &mut rng).unwrap();
    let batch: Vec<usize> = (0..4).collect();
    // warmup + timing
    let t0 = std::time::Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 5.0 {
        let _ = batch_step(&params, &exp, &data, &batch).unwrap();
        n += 1;
    }
    println!("batch_step (4 images): {:.1} ms/call", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
}
