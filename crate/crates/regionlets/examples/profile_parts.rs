use regionlets::config::ExperimentConfig;
use regionlets::train::training_set;
use regionlets::head::*;
use regionlets::rng::SplitMix64;

fn main() {
    let exp = ExperimentConfig::default();
    let cfg = &exp.pipeline;
    let data = training_set(&exp).unwrap();
    let mut rng = SplitMix64::new(3);
    let params = ModelParams::init(cfg, &mut rng).unwrap();
    let inst = &data[0];

    let time = |label: &str, mut f: Box<dyn FnMut()>| {
        let t0 = std::time::Instant::now();
        let mut n = 0;
        while t0.elapsed().as_secs_f64() < 2.0 {
            f();
            n += 1;
        }
        println!("{label}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / n as f64);
    };

    let p2 = params.clone();
    let im = inst.image.clone();
    time("backbone_forward", Box::new(move || { let _ = backbone_forward(&im, &p2).unwrap(); }));

    let (features, bb_cache) = backbone_forward(&inst.image, &params).unwrap();
    let f2 = features.clone(); let p3 = params.clone(); let pr = inst.proposals.clone();
    let cfg2 = *cfg;
    println!("n_proposals: {}", pr.len());
    time("head_forward (all rois)", Box::new(move || { let _ = head_forward(&f2, &pr, &p3, &cfg2).unwrap(); }));

    let (outs, caches) = head_forward(&features, &inst.proposals, &params, cfg).unwrap();
    let upstream: Vec<(regionlets::Tensor, [f64;4])> = outs.iter().map(|o| {
        let mut t = o.logits.zeros_like(); t.data_mut()[0] = 1.0; (t, [0.1, 0.1, 0.1, 0.1])
    }).collect();
    let f3 = features.clone(); let p4 = params.clone(); let pr2 = inst.proposals.clone();
    time("head_backward (all rois)", Box::new(move || {
        let mut grads = p4.zeros_like();
        let _ = head_backward(&f3, &pr2, &p4, &cfg2, &caches, &upstream, &mut grads).unwrap();
    }));

    let p5 = params.clone();
    let dfeat = features.zeros_like();
    time("backbone_backward", Box::new(move || {
        let mut grads = p5.zeros_like();
        backbone_backward(&bb_cache, &p5, &dfeat, &mut grads).unwrap();
    }));

    let p6 = params.clone();
    time("zeros_like alone", Box::new(move || { let _ = p6.zeros_like(); }));
}
