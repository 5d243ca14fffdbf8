use regionlets::config::ExperimentConfig;
use regionlets::head::ModelParams;
use regionlets::rng::SplitMix64;
use regionlets::train::{evaluate_model, validation_set};

fn main() {
    for thresh in [0.05, 0.3, 0.4, 0.5] {
        let mut exp = ExperimentConfig::default();
        exp.pipeline.head.score_thresh = thresh;
        let val = validation_set(&exp).unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..3u64 {
            let mut rng = SplitMix64::new(regionlets::rng::mix(seed, 3));
            let mut params = ModelParams::init(&exp.pipeline, &mut rng).unwrap();
            params.box_w = params.box_w.zeros_like(); // planned zero box init
            let m = evaluate_model(&params, &exp, &val, 0.5).unwrap();
            worst = worst.max(m.map);
        }
        println!("thresh {thresh}: worst untrained val mAP@0.5 over 3 seeds = {worst:.4}");
    }
}
