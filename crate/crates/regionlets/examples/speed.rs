use regionlets::config::ExperimentConfig;
use regionlets::train::run_training;

fn main() {
    let mut exp = ExperimentConfig::default();
    exp.epochs = 1;
    let t0 = std::time::Instant::now();
    let out = run_training(&exp).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("1 epoch (default config): {:.1}s  -> 30 epochs ~ {:.0}s", dt, dt * 30.0);
    println!("first row: {:?}", out.history[0]);
}
