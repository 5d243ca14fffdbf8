use regionlets::config::ExperimentConfig;
use regionlets::head::*;
use regionlets::rng::SplitMix64;
use regionlets::train::{evaluate_model, run_training, validation_set};

fn main() {
    let mut exp = ExperimentConfig::default();
    exp.epochs = 0;
    // untrained floor with CURRENT xavier box init
    let mut rng = SplitMix64::new(regionlets::rng::mix(0, 3));
    let params = ModelParams::init(&exp.pipeline, &mut rng).unwrap();
    let val = validation_set(&exp).unwrap();
    let m = evaluate_model(&params, &exp, &val, 0.5).unwrap();
    println!("untrained (xavier box): val mAP@0.5 = {:.4}", m.map);

    // untrained floor with ZERO box init
    let mut params0 = params.clone();
    params0.box_w = params0.box_w.zeros_like();
    let m0 = evaluate_model(&params0, &exp, &val, 0.5).unwrap();
    println!("untrained (zero box):   val mAP@0.5 = {:.4}", m0.map);

    // trained 20 epochs with zero box init handled inside init? patch later;
    // emulate by training normally but monkey-can't; instead just report.
    let _ = run_training;
}
