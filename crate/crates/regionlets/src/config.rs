//! Experiment configuration: flat `key = value` text with `#` comments.
//! Unknown keys are rejected by name; every key has a desk-scale default.

use crate::bench::BenchConfig;
use crate::gate::{GateGranularity, PoolMode};
use crate::head::PipelineConfig;
use crate::region::RsnMode;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Images per SGD step.
    pub batch_size: usize,
    /// Piecewise-constant learning rate: (first iteration, lr) pairs with
    /// strictly increasing iterations starting at 0.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub train_images: usize,
    pub val_images: usize,
    pub bench: BenchConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // two-phase schedule dropping the rate by 10x two thirds in,
        // desk-scaled from the usual detector recipe
        ExperimentConfig {
            seed: 0,
            epochs: 30,
            batch_size: 4,
            schedule: vec![(0, 1e-3), (2500, 1e-4)],
            momentum: 0.9,
            train_images: 500,
            val_images: 100,
            bench: BenchConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 10_000 {
            return Err(Error::invalid("epochs too large"));
        }
        if self.batch_size == 0 || self.train_images == 0 || self.val_images == 0 {
            return Err(Error::invalid(
                "batch_size, train_images and val_images must be >= 1",
            ));
        }
        if self.schedule.is_empty() || self.schedule[0].0 != 0 {
            return Err(Error::invalid("schedule must start at iteration 0"));
        }
        for pair in self.schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::invalid("schedule iterations must strictly increase"));
            }
        }
        if self.schedule.iter().any(|&(_, lr)| lr <= 0.0) {
            return Err(Error::invalid("learning rates must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must be in [0,1)"));
        }
        self.bench.validate()?;
        self.pipeline.validate()?;
        if self.pipeline.head.num_classes != crate::bench::NUM_CLASSES + 1 {
            return Err(Error::invalid(format!(
                "head.num_classes must be {} (background + benchmark classes)",
                crate::bench::NUM_CLASSES + 1
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let mut lr = self.schedule[0].1;
        for &(start, rate) in &self.schedule {
            if iteration >= start {
                lr = rate;
            }
        }
        lr
    }

    /// Parses flat `key = value` text. `#` starts a comment; blank lines are
    /// skipped; unknown keys are reported by name.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn bad(key: &str, value: &str) -> Error {
            Error::ConfigValue {
                key: key.to_string(),
                message: format!("`{value}`"),
            }
        }
        macro_rules! parse_as {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|_| bad(key, value))?
            };
        }
        match key {
            "seed" => self.seed = parse_as!(u64),
            "epochs" => self.epochs = parse_as!(usize),
            "batch_size" => self.batch_size = parse_as!(usize),
            "momentum" => self.momentum = parse_as!(f64),
            "schedule" => {
                let mut sched = Vec::new();
                for part in value.split(',') {
                    let Some((it, lr)) = part.split_once(':') else {
                        return Err(bad(key, value));
                    };
                    let it = it.trim().parse::<usize>().map_err(|_| bad(key, value))?;
                    let lr = lr.trim().parse::<f64>().map_err(|_| bad(key, value))?;
                    sched.push((it, lr));
                }
                self.schedule = sched;
            }
            "bench.train_images" => self.train_images = parse_as!(usize),
            "bench.val_images" => self.val_images = parse_as!(usize),
            "bench.image_size" => self.bench.image_size = parse_as!(usize),
            "bench.min_shapes" => self.bench.min_shapes = parse_as!(usize),
            "bench.max_shapes" => self.bench.max_shapes = parse_as!(usize),
            "bench.jitter" => self.bench.jitter = parse_as!(f64),
            "bench.negatives" => self.bench.negatives = parse_as!(usize),
            "rsn.num_regions" => self.pipeline.rsn.num_regions = parse_as!(usize),
            "rsn.hidden" => self.pipeline.rsn.hidden = parse_as!(usize),
            "rsn.summary_grid" => self.pipeline.rsn.summary_grid = parse_as!(usize),
            "rsn.mode" => self.pipeline.rsn.mode = RsnMode::parse(value)?,
            "gate.enabled" => {
                self.pipeline.gate.enabled = value.parse::<bool>().map_err(|_| bad(key, value))?
            }
            "gate.granularity" => {
                self.pipeline.gate.granularity = GateGranularity::parse(value)?
            }
            "pool.mode" => self.pipeline.pool.mode = PoolMode::parse(value)?,
            "pool.out" => {
                let (h, w) = parse_pair(value).ok_or_else(|| bad(key, value))?;
                self.pipeline.pool.out_h = h;
                self.pipeline.pool.out_w = w;
            }
            "head.num_classes" => self.pipeline.head.num_classes = parse_as!(usize),
            "head.density" => {
                let (h, w) = parse_pair(value).ok_or_else(|| bad(key, value))?;
                self.pipeline.head.regionlet_h = h;
                self.pipeline.head.regionlet_w = w;
            }
            "head.hidden" => self.pipeline.head.hidden = parse_as!(usize),
            "head.nms_iou" => self.pipeline.head.nms_iou = parse_as!(f64),
            "head.score_thresh" => self.pipeline.head.score_thresh = parse_as!(f64),
            "head.lambda_reg" => self.pipeline.head.lambda_reg = parse_as!(f64),
            other => return Err(Error::ConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let sched = self
            .schedule
            .iter()
            .map(|(it, lr)| format!("{it}:{lr}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "seed = {}\n\
             epochs = {}\n\
             batch_size = {}\n\
             momentum = {}\n\
             schedule = {}\n\
             bench.train_images = {}\n\
             bench.val_images = {}\n\
             bench.image_size = {}\n\
             bench.min_shapes = {}\n\
             bench.max_shapes = {}\n\
             bench.jitter = {}\n\
             bench.negatives = {}\n\
             rsn.num_regions = {}\n\
             rsn.hidden = {}\n\
             rsn.summary_grid = {}\n\
             rsn.mode = {}\n\
             gate.enabled = {}\n\
             gate.granularity = {}\n\
             pool.mode = {}\n\
             pool.out = {}x{}\n\
             head.num_classes = {}\n\
             head.density = {}x{}\n\
             head.hidden = {}\n\
             head.nms_iou = {}\n\
             head.score_thresh = {}\n\
             head.lambda_reg = {}\n",
            self.seed,
            self.epochs,
            self.batch_size,
            self.momentum,
            sched,
            self.train_images,
            self.val_images,
            self.bench.image_size,
            self.bench.min_shapes,
            self.bench.max_shapes,
            self.bench.jitter,
            self.bench.negatives,
            self.pipeline.rsn.num_regions,
            self.pipeline.rsn.hidden,
            self.pipeline.rsn.summary_grid,
            self.pipeline.rsn.mode.as_str(),
            self.pipeline.gate.enabled,
            self.pipeline.gate.granularity.as_str(),
            self.pipeline.pool.mode.as_str(),
            self.pipeline.pool.out_h,
            self.pipeline.pool.out_w,
            self.pipeline.head.num_classes,
            self.pipeline.head.regionlet_h,
            self.pipeline.head.regionlet_w,
            self.pipeline.head.hidden,
            self.pipeline.head.nms_iou,
            self.pipeline.head.score_thresh,
            self.pipeline.head.lambda_reg,
        )
    }
}

fn parse_pair(value: &str) -> Option<(usize, usize)> {
    let (a, b) = value.split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}
