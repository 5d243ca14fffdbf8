use regionlets::config::ExperimentConfig;
use regionlets::train::{run_training, validation_set, evaluate_model, Variant, ALL_VARIANTS};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut base = ExperimentConfig::default();
    base.epochs = 15;
    base.train_images = 250;
    base.val_images = 50;
    base.schedule = vec![(0, 1e-3), (700, 1e-4)];
    base.pipeline.head.score_thresh = 0.05;
    base.seed = seed;

    for v in ALL_VARIANTS {
        let cfg = v.apply(&base);
        let t0 = std::time::Instant::now();
        let out = run_training(&cfg).unwrap();
        let val = validation_set(&cfg).unwrap();
        let report = evaluate_model(&out.params, &cfg, &val, 0.5).unwrap();
        // theta drift: mean |delta| of head biases vs init, per component group
        let k = cfg.pipeline.rsn.num_regions;
        let mut drift_scale = 0.0;
        let mut drift_offset = 0.0;
        for ki in 0..k {
            let b0 = out.initial_params.rsn.head_b[ki].data();
            let b1 = out.params.rsn.head_b[ki].data();
            for j in [0usize, 1, 3, 4] { drift_scale += (b1[j] - b0[j]).abs(); }
            for j in [2usize, 5] { drift_offset += (b1[j] - b0[j]).abs(); }
        }
        drift_scale /= (4 * k) as f64;
        drift_offset /= (2 * k) as f64;
        println!(
            "{:<12} seed {}  val mAP {:.4}  per-class [disk {:.3} tri {:.3} bar {:.3}]  theta drift scale {:.4} offset {:.4}  ({:.0}s)",
            v.as_str(), seed, report.map,
            report.per_class_ap[0], report.per_class_ap[1], report.per_class_ap[2],
            drift_scale, drift_offset, t0.elapsed().as_secs_f64()
        );
        let _ = Variant::Full;
    }
}
