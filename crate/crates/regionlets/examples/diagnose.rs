use regionlets::bench::{evaluate_map, GtBox, NUM_CLASSES};
use regionlets::config::ExperimentConfig;
use regionlets::head::*;
use regionlets::train::{run_training, validation_set};

fn main() {
    let mut exp = ExperimentConfig::default();
    exp.epochs = 20; // to the pre-drop peak region
    let out = run_training(&exp).unwrap();
    let val = validation_set(&exp).unwrap();
    let cfg = &exp.pipeline;
    let sz = exp.bench.image_size as f64;

    // (A) standard detect
    let mut dets_std = Vec::new();
    // (B) detect but keep proposal box (no delta decode)
    let mut dets_nodelta = Vec::new();
    let mut gts: Vec<Vec<GtBox>> = Vec::new();
    let mut fg_correct = 0usize;
    let mut fg_total = 0usize;
    for inst in &val {
        let (features, _) = backbone_forward(&inst.image, &out.params).unwrap();
        dets_std.push(detect(&features, &inst.proposals, &out.params, cfg, sz, sz).unwrap());
        let (outs, _) = head_forward(&features, &inst.proposals, &out.params, cfg).unwrap();
        let mut per_img = Vec::new();
        let gtb: Vec<[f64;4]> = inst.gt.iter().map(|g| g.bbox).collect();
        let gtc: Vec<usize> = inst.gt.iter().map(|g| g.class).collect();
        let targets = assign_targets(&inst.proposals, &gtb, &gtc);
        for ((roi, o), t) in inst.proposals.iter().zip(&outs).zip(&targets) {
            let logits = o.logits.data();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let denom: f64 = exps.iter().sum();
            // argmax class for accuracy
            if t.class > 0 {
                fg_total += 1;
                let pred = exps.iter().enumerate().max_by(|a,b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                if pred == t.class { fg_correct += 1; }
            }
            for class in 1..cfg.head.num_classes {
                let score = exps[class] / denom;
                if score >= cfg.head.score_thresh {
                    per_img.push(Detection { bbox: roi.corners(), class: class - 1, score });
                }
            }
        }
        // per-class nms
        let mut kept = Vec::new();
        for class in 0..cfg.head.num_classes - 1 {
            let group: Vec<Detection> = per_img.iter().filter(|d| d.class == class).cloned().collect();
            kept.extend(nms(&group, cfg.head.nms_iou));
        }
        dets_nodelta.push(kept);
        gts.push(inst.gt.clone());
    }
    let m_std = evaluate_map(&dets_std, &gts, 0.5, NUM_CLASSES).unwrap();
    let m_nod = evaluate_map(&dets_nodelta, &gts, 0.5, NUM_CLASSES).unwrap();
    println!("val mAP@0.5 with decoded boxes:  {:.4} {:?}", m_std.map, m_std.per_class_ap);
    println!("val mAP@0.5 with proposal boxes: {:.4} {:?}", m_nod.map, m_nod.per_class_ap);
    println!("fg classification accuracy (val): {}/{} = {:.3}", fg_correct, fg_total, fg_correct as f64 / fg_total as f64);

    // recall ceiling: fraction of GT with some proposal IoU >= 0.5
    let mut reachable = 0usize;
    let mut total = 0usize;
    for inst in &val {
        for g in &inst.gt {
            total += 1;
            if inst.proposals.iter().any(|p| iou(&p.corners(), &g.bbox) >= 0.5) {
                reachable += 1;
            }
        }
    }
    println!("GT reachable by a proposal at IoU>=0.5: {}/{} = {:.3}", reachable, total, reachable as f64 / total as f64);
}
