use regionlets::config::ExperimentConfig;
use regionlets::train::{ablate, ALL_VARIANTS};

fn main() {
    let mut base = ExperimentConfig::default();
    base.epochs = 15;
    base.train_images = 250;
    base.val_images = 50;
    base.schedule = vec![(0, 1e-3), (700, 1e-4)];
    base.pipeline.head.score_thresh = 0.05;
    let seeds: Vec<u64> = std::env::args().nth(1).map(|s| s.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![0]);
    let t0 = std::time::Instant::now();
    let outcome = ablate(&base, &seeds, 1).unwrap();
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    print!("{}", outcome.table());
    for v in ALL_VARIANTS {
        let (m, s) = outcome.mean_sd(v);
        println!("{}: {:.4} +- {:.4}", v.as_str(), m, s);
    }
}
