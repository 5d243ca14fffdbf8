//! End-to-end trainer and the experiment drivers (eval, ablation table,
//! region/density sweep). Every run is a pure function of its config and
//! seed: datasets, initialization and batch order all derive from the seed
//! through fixed salts, and metric files contain no wall-clock values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bench::{evaluate_map, generate_dataset, DetectionInstance, GtBox, MapReport};
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::head::{
    assign_targets, backbone_backward, backbone_forward, detect, head_backward, head_forward,
    ModelParams,
};
use crate::layers::{sgd_step, smooth_l1, softmax_cross_entropy};
use crate::region::RsnMode;
use crate::rng::{mix, SplitMix64};
use crate::tensor::Tensor;
use crate::{Error, Result};

const TRAIN_SALT: u64 = 0x01;
const VAL_SALT: u64 = 0x02;
const INIT_SALT: u64 = 0x03;
const EPOCH_SALT: u64 = 0x04;

/// Images used for the per-epoch training-set mAP column (a fixed-size
/// prefix keeps the metric cheap on large training sets).
const TRAIN_MAP_SUBSET: usize = 100;

pub const METRICS_SCHEMA: &str = "# schema v1";
pub const METRICS_HEADER: &str = "epoch,cls_loss,reg_loss,train_map50,val_map50";

/// Forward + backward over one batch of images. Returns the mean
/// classification loss, mean (unweighted) regression loss and the gradient
/// of `cls + lambda_reg * reg` averaged over the batch images.
pub fn batch_step(
    params: &ModelParams,
    exp: &ExperimentConfig,
    data: &[DetectionInstance],
    batch: &[usize],
) -> Result<(f64, f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &exp.pipeline;
    let nc = cfg.head.num_classes;
    let mut grads = params.zeros_like();
    let mut cls_total = 0.0;
    let mut reg_total = 0.0;
    for &idx in batch {
        let inst = &data[idx];
        let (features, bb_cache) = backbone_forward(&inst.image, params)?;
        let gt_boxes: Vec<[f64; 4]> = inst.gt.iter().map(|g| g.bbox).collect();
        let gt_classes: Vec<usize> = inst.gt.iter().map(|g| g.class).collect();
        let targets = assign_targets(&inst.proposals, &gt_boxes, &gt_classes);
        let (outputs, caches) = head_forward(&features, &inst.proposals, params, cfg)?;

        let n_rois = outputs.len();
        let mut logits = Tensor::zeros(&[n_rois, nc]);
        for (r, out) in outputs.iter().enumerate() {
            logits.data_mut()[r * nc..(r + 1) * nc].copy_from_slice(out.logits.data());
        }
        let labels: Vec<usize> = targets.iter().map(|t| t.class).collect();
        let (cls_loss, d_logits) = softmax_cross_entropy(&logits, &labels)?;

        // box regression over foreground RoIs only
        let fg: Vec<usize> = (0..n_rois).filter(|&r| targets[r].deltas.is_some()).collect();
        let (reg_loss, d_pred) = if fg.is_empty() {
            (0.0, Tensor::zeros(&[0, 4]))
        } else {
            let mut pred = Tensor::zeros(&[fg.len(), 4]);
            let mut want = Tensor::zeros(&[fg.len(), 4]);
            for (i, &r) in fg.iter().enumerate() {
                pred.data_mut()[i * 4..(i + 1) * 4].copy_from_slice(&outputs[r].deltas);
                want.data_mut()[i * 4..(i + 1) * 4]
                    .copy_from_slice(&targets[r].deltas.unwrap());
            }
            smooth_l1(&pred, &want)?
        };
        if !cls_loss.is_finite() || !reg_loss.is_finite() {
            return Err(Error::non_finite(format!("loss on image {idx}")));
        }
        cls_total += cls_loss;
        reg_total += reg_loss;

        let mut upstream = Vec::with_capacity(n_rois);
        for r in 0..n_rois {
            let d_row =
                Tensor::from_vec(&[1, nc], d_logits.data()[r * nc..(r + 1) * nc].to_vec())?;
            upstream.push((d_row, [0.0; 4]));
        }
        for (i, &r) in fg.iter().enumerate() {
            let mut d = [0.0; 4];
            for j in 0..4 {
                d[j] = cfg.head.lambda_reg * d_pred.data()[i * 4 + j];
            }
            upstream[r].1 = d;
        }

        let d_features = head_backward(
            &features,
            &inst.proposals,
            params,
            cfg,
            &caches,
            &upstream,
            &mut grads,
        )?;
        backbone_backward(&bb_cache, params, &d_features, &mut grads)?;
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    Ok((cls_total * scale, reg_total * scale, grads))
}

/// Detections for every instance, then VOC mAP at the given threshold.
pub fn evaluate_model(
    params: &ModelParams,
    exp: &ExperimentConfig,
    instances: &[DetectionInstance],
    iou_thresh: f64,
) -> Result<MapReport> {
    let sz = exp.bench.image_size as f64;
    let mut dets = Vec::with_capacity(instances.len());
    let mut gts: Vec<Vec<GtBox>> = Vec::with_capacity(instances.len());
    for inst in instances {
        let (features, _) = backbone_forward(&inst.image, params)?;
        dets.push(detect(
            &features,
            &inst.proposals,
            params,
            &exp.pipeline,
            sz,
            sz,
        )?);
        gts.push(inst.gt.clone());
    }
    evaluate_map(&dets, &gts, iou_thresh, crate::bench::NUM_CLASSES)
}

#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub train_map50: f64,
    pub val_map50: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub params: ModelParams,
    pub initial_params: ModelParams,
    pub history: Vec<EpochRow>,
    /// Deterministic metrics CSV (schema line, header, one row per epoch).
    pub metrics_csv: String,
    /// Wall-clock seconds per epoch; reported separately so metric files
    /// stay byte-reproducible.
    pub epoch_seconds: Vec<f64>,
    pub final_val_map50: f64,
}

/// Runs the full training loop in memory.
pub fn run_training(exp: &ExperimentConfig) -> Result<TrainOutputs> {
    exp.validate()?;
    let train_set = generate_dataset(&exp.bench, mix(exp.seed, TRAIN_SALT), exp.train_images)?;
    let val_set = generate_dataset(&exp.bench, mix(exp.seed, VAL_SALT), exp.val_images)?;
    let mut init_rng = SplitMix64::new(mix(exp.seed, INIT_SALT));
    let mut params = ModelParams::init(&exp.pipeline, &mut init_rng)?;
    let initial_params = params.clone();
    let mut velocity = params.zeros_like();

    let mut history = Vec::with_capacity(exp.epochs);
    let mut epoch_seconds = Vec::with_capacity(exp.epochs);
    let mut csv = format!("{METRICS_SCHEMA}\n{METRICS_HEADER}\n");
    let subset = exp.train_images.min(TRAIN_MAP_SUBSET);
    let mut iteration = 0usize;
    for epoch in 0..exp.epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..exp.train_images).collect();
        SplitMix64::new(mix(mix(exp.seed, EPOCH_SALT), epoch as u64)).shuffle(&mut order);
        let mut cls_sum = 0.0;
        let mut reg_sum = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(exp.batch_size) {
            let lr = exp.learning_rate_at(iteration);
            let (cls, reg, grads) = batch_step(&params, exp, &train_set, chunk)
                .map_err(|e| Error::invalid(format!("epoch {epoch} iteration {iteration}: {e}")))?;
            let g_list = grads.tensors();
            for ((p, g), v) in params
                .tensors_mut()
                .into_iter()
                .zip(g_list)
                .zip(velocity.tensors_mut())
            {
                sgd_step(p, g, lr, exp.momentum, v).map_err(|e| {
                    Error::invalid(format!("epoch {epoch} iteration {iteration}: {e}"))
                })?;
            }
            cls_sum += cls;
            reg_sum += reg;
            n_batches += 1.0;
            iteration += 1;
        }
        params.check_finite("model parameters after epoch")?;

        let train_map50 = evaluate_model(&params, exp, &train_set[..subset], 0.5)?.map;
        let val_map50 = evaluate_model(&params, exp, &val_set, 0.5)?.map;
        let row = EpochRow {
            epoch,
            cls_loss: cls_sum / n_batches,
            reg_loss: reg_sum / n_batches,
            train_map50,
            val_map50,
        };
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.epoch, row.cls_loss, row.reg_loss, row.train_map50, row.val_map50
        );
        history.push(row);
        epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    let final_val_map50 = history.last().map(|r| r.val_map50).unwrap_or(0.0);
    Ok(TrainOutputs {
        params,
        initial_params,
        history,
        metrics_csv: csv,
        epoch_seconds,
        final_val_map50,
    })
}

/// The validation dataset a config's eval uses; shared by train and eval so
/// the final CSV row and a later `eval` agree exactly.
pub fn validation_set(exp: &ExperimentConfig) -> Result<Vec<DetectionInstance>> {
    generate_dataset(&exp.bench, mix(exp.seed, VAL_SALT), exp.val_images)
}

pub fn training_set(exp: &ExperimentConfig) -> Result<Vec<DetectionInstance>> {
    generate_dataset(&exp.bench, mix(exp.seed, TRAIN_SALT), exp.train_images)
}

/// Serializes checkpoint bytes for the current parameters.
pub fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&mut buf, &params.checkpoint_entries())?;
    Ok(buf)
}

/// Writes metrics.csv, checkpoint.ckpt, config.txt and timing.csv into
/// `out_dir`. Timing lives in its own file: metrics and checkpoints are
/// byte-reproducible per (config, seed), wall time is not.
pub fn write_outputs(out_dir: &Path, exp: &ExperimentConfig, outputs: &TrainOutputs) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("metrics.csv"), outputs.metrics_csv.as_bytes())?;
    fs::write(out_dir.join("config.txt"), exp.to_text().as_bytes())?;
    checkpoint::save(
        &out_dir.join("checkpoint.ckpt"),
        &outputs.params.checkpoint_entries(),
    )?;
    let mut timing = String::from("# schema v1\nepoch,wall_seconds\n");
    for (e, s) in outputs.epoch_seconds.iter().enumerate() {
        let _ = writeln!(timing, "{e},{s:.3}");
    }
    fs::write(out_dir.join("timing.csv"), timing.as_bytes())?;
    Ok(())
}

/// Ablation variants in their reporting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Global,
    OffsetOnly,
    NonGating,
    Full,
}

pub const ALL_VARIANTS: [Variant; 4] = [
    Variant::Global,
    Variant::OffsetOnly,
    Variant::NonGating,
    Variant::Full,
];

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Global => "global",
            Variant::OffsetOnly => "offset-only",
            Variant::NonGating => "non-gating",
            Variant::Full => "full",
        }
    }

    /// Applies the variant on top of a base config. Global selects a single
    /// identity-initialized region; offset-only freezes scale/rotation;
    /// non-gating disables the gate and changes nothing else.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Global => {
                cfg.pipeline.rsn.mode = RsnMode::Global;
                cfg.pipeline.rsn.num_regions = 1;
            }
            Variant::OffsetOnly => {
                cfg.pipeline.rsn.mode = RsnMode::OffsetOnly;
            }
            Variant::NonGating => {
                cfg.pipeline.gate.enabled = false;
            }
            Variant::Full => {}
        }
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblateRun {
    pub variant: Variant,
    pub seed: u64,
    pub val_map50: f64,
}

#[derive(Clone, Debug)]
pub struct AblateOutcome {
    pub runs: Vec<AblateRun>,
    pub seeds: Vec<u64>,
}

impl AblateOutcome {
    pub fn mean_sd(&self, variant: Variant) -> (f64, f64) {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.val_map50)
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Schema-versioned CSV of the raw per-run results.
    pub fn csv(&self) -> String {
        let mut out = String::from("# schema v1\nvariant,seed,val_map50\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{},{}", r.variant.as_str(), r.seed, r.val_map50);
        }
        out
    }

    /// Renders the comparison table plus the ordering verdict.
    pub fn table(&self) -> String {
        let mut out = String::from("variant,seed,val_map50\n");
        for r in &self.runs {
            let _ = writeln!(out, "{},{},{}", r.variant.as_str(), r.seed, r.val_map50);
        }
        out.push('\n');
        let mut means = Vec::new();
        for v in ALL_VARIANTS {
            let (mean, sd) = self.mean_sd(v);
            let _ = writeln!(out, "{:<12} mean={:.4} sd={:.4}", v.as_str(), mean, sd);
            means.push((v, mean));
        }
        let get = |v: Variant| means.iter().find(|(m, _)| *m == v).unwrap().1;
        let ordering_soft = get(Variant::Full) >= get(Variant::NonGating)
            && get(Variant::NonGating) >= get(Variant::OffsetOnly);
        let ordering_hard = get(Variant::Full) >= get(Variant::OffsetOnly)
            && get(Variant::OffsetOnly) > get(Variant::Global)
            && get(Variant::NonGating) > get(Variant::Global)
            && get(Variant::Full) > get(Variant::Global);
        let _ = writeln!(
            out,
            "ordering full>=non-gating>=offset-only: {}",
            if ordering_soft { "yes" } else { "no (within seed noise; see means)" }
        );
        let _ = writeln!(
            out,
            "ordering {{full,non-gating,offset-only}} > global and full >= offset-only: {}",
            if ordering_hard { "yes" } else { "NO" }
        );
        out
    }
}

/// Reads the REGIONLET_THREADS cap (defaults to the machine's parallelism).
pub fn threads_budget() -> usize {
    std::env::var("REGIONLET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Trains all four variants on identical seeds/schedules. Runs execute in
/// parallel threads up to `threads`; each run is itself sequential and
/// deterministic, and results are ordered by (variant, seed) regardless of
/// completion order.
pub fn ablate(base: &ExperimentConfig, seeds: &[u64], threads: usize) -> Result<AblateOutcome> {
    let mut jobs: Vec<(Variant, u64)> = Vec::new();
    for &v in &ALL_VARIANTS {
        for &s in seeds {
            jobs.push((v, s));
        }
    }
    let results = run_jobs(threads, &jobs, |&(variant, seed)| {
        let mut cfg = variant.apply(base);
        cfg.seed = seed;
        let out = run_training(&cfg)?;
        Ok(AblateRun {
            variant,
            seed,
            val_map50: out.final_val_map50,
        })
    })?;
    Ok(AblateOutcome {
        runs: results,
        seeds: seeds.to_vec(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SweepCell {
    pub num_regions: usize,
    pub density: usize,
    pub val_map50: f64,
}

pub const SWEEP_REGIONS: [usize; 3] = [4, 9, 16];
pub const SWEEP_DENSITIES: [usize; 5] = [2, 3, 4, 5, 6];

/// Region-count x regionlet-density grid. `done` cells (from a partial CSV)
/// are skipped so an interrupted sweep can resume.
pub fn sweep(
    base: &ExperimentConfig,
    done: &[(usize, usize)],
    threads: usize,
) -> Result<Vec<SweepCell>> {
    let mut jobs = Vec::new();
    for &k in &SWEEP_REGIONS {
        for &d in &SWEEP_DENSITIES {
            if !done.contains(&(k, d)) {
                jobs.push((k, d));
            }
        }
    }
    run_jobs(threads, &jobs, |&(k, d)| {
        let mut cfg = base.clone();
        cfg.pipeline.rsn.num_regions = k;
        cfg.pipeline.head.regionlet_h = d;
        cfg.pipeline.head.regionlet_w = d;
        let out = run_training(&cfg)?;
        Ok(SweepCell {
            num_regions: k,
            density: d,
            val_map50: out.final_val_map50,
        })
    })
}

/// Fans jobs out over at most `threads` workers, preserving job order in the
/// returned vector.
fn run_jobs<J, R, F>(threads: usize, jobs: &[J], f: F) -> Result<Vec<R>>
where
    J: Sync,
    R: Send,
    F: Fn(&J) -> Result<R> + Sync,
{
    let threads = threads.max(1).min(jobs.len().max(1));
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<R>>> = (0..jobs.len()).map(|_| None).collect();
    let slots_ref = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                slots_ref.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("job completed")).collect()
}
