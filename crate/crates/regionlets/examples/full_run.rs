use regionlets::config::ExperimentConfig;
use regionlets::train::run_training;

fn main() {
    let exp = ExperimentConfig::default();
    let t0 = std::time::Instant::now();
    let out = run_training(&exp).unwrap();
    println!("total: {:.0}s", t0.elapsed().as_secs_f64());
    for row in &out.history {
        println!(
            "epoch {:2}  cls {:.4}  reg {:.4}  train mAP {:.3}  val mAP {:.3}",
            row.epoch, row.cls_loss, row.reg_loss, row.train_map50, row.val_map50
        );
    }
}
