//! Independent finite-difference oracle: perturb one scalar of any tensor,
//! re-run a forward-only closure, and compare the central difference against
//! the analytic gradient. The oracle never calls backward code; all analytic
//! gradients are supplied by the caller or computed by the named per-module
//! protocols below and then *checked* against the closure.

use crate::bench::{generate_dataset, BenchConfig};
use crate::gate::{
    gate_backward, gate_forward, regionlet_pool_backward, regionlet_pool_forward, GateConfig,
    GateGranularity, GateParams, PoolConfig, PoolMode,
};
use crate::head::{
    backbone_forward, head_forward, HeadConfig,
    ModelParams, PipelineConfig,
};
use crate::layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, relu_backward, relu_forward,
    sigmoid_backward, sigmoid_forward, smooth_l1, softmax_cross_entropy, Conv2dCfg,
};
use crate::region::{AffineParams, RegionOfInterest, RsnConfig, RsnMode};
use crate::rng::{mix, SplitMix64};
use crate::rsn::{rsn_backward, rsn_forward, RsnParams};
use crate::tensor::Tensor;
use crate::config::ExperimentConfig;
use crate::train::batch_step;
use crate::warp::{grid_generate, warp_backward_input, warp_backward_theta, warp_forward};
use crate::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-8;
/// Central differences at step 1e-5 on unit-scale losses carry ~1e-10
/// absolute truncation/rounding noise; differences below this are agreement,
/// not error. Meaningful gradients (1e-4 and up) are unaffected.
const ABS_AGREEMENT: f64 = 1e-9;

/// Worst-coordinate report of one gradient check.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub module: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Central difference of a scalar-valued closure w.r.t. one coordinate.
pub fn central_diff<F>(mut forward: F, point: &Tensor, index: usize, step: f64) -> f64
where
    F: FnMut(&Tensor) -> f64,
{
    let mut plus = point.clone();
    plus.data_mut()[index] += step;
    let f_plus = forward(&plus);
    let mut minus = point.clone();
    minus.data_mut()[index] -= step;
    let f_minus = forward(&minus);
    (f_plus - f_minus) / (2.0 * step)
}

/// Relative error with the max(|a|,|n|,1e-8) denominator; absolute
/// differences inside the finite-difference noise floor count as zero.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_AGREEMENT {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Sweeps every coordinate of `point`, comparing `analytic` against central
/// differences of `forward`.
pub fn compare_full<F>(
    module: &str,
    seed: u64,
    mut forward: F,
    point: &Tensor,
    analytic: &Tensor,
    step: f64,
) -> GradReport
where
    F: FnMut(&Tensor) -> f64,
{
    let mut worst = GradReport {
        module: module.to_string(),
        seed,
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: if analytic.is_empty() { 0.0 } else { analytic.data()[0] },
        numeric: 0.0,
    };
    for i in 0..point.len() {
        let numeric = central_diff(&mut forward, point, i, step);
        let err = rel_error(analytic.data()[i], numeric);
        if err > worst.max_rel_error {
            worst.max_rel_error = err;
            worst.worst_index = i;
            worst.analytic = analytic.data()[i];
            worst.numeric = numeric;
        }
    }
    worst
}

fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_uniform(t.data_mut(), -1.0, 1.0);
    t
}

/// Weighted-sum loss turning any tensor output into a scalar; the weights
/// double as the upstream gradient of that output.
fn loss_weights(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    random_tensor(shape, rng)
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Identifiers for the per-module randomized check protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckModule {
    Fc,
    Conv,
    Relu,
    Sigmoid,
    SoftmaxCe,
    SmoothL1,
    Gate,
    Pool,
    WarpInput,
    WarpTheta,
    Rsn,
    EndToEnd,
}

pub const ALL_MODULES: [CheckModule; 12] = [
    CheckModule::Fc,
    CheckModule::Conv,
    CheckModule::Relu,
    CheckModule::Sigmoid,
    CheckModule::SoftmaxCe,
    CheckModule::SmoothL1,
    CheckModule::Gate,
    CheckModule::Pool,
    CheckModule::WarpInput,
    CheckModule::WarpTheta,
    CheckModule::Rsn,
    CheckModule::EndToEnd,
];

impl CheckModule {
    pub fn parse(s: &str) -> Result<CheckModule> {
        match s {
            "fc" => Ok(CheckModule::Fc),
            "conv" => Ok(CheckModule::Conv),
            "relu" => Ok(CheckModule::Relu),
            "sigmoid" => Ok(CheckModule::Sigmoid),
            "softmax-ce" => Ok(CheckModule::SoftmaxCe),
            "smooth-l1" => Ok(CheckModule::SmoothL1),
            "gate" => Ok(CheckModule::Gate),
            "pool" => Ok(CheckModule::Pool),
            "warp-input" => Ok(CheckModule::WarpInput),
            "warp-theta" => Ok(CheckModule::WarpTheta),
            "rsn" => Ok(CheckModule::Rsn),
            "end-to-end" => Ok(CheckModule::EndToEnd),
            other => Err(Error::invalid(format!("unknown gradcheck module `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CheckModule::Fc => "fc",
            CheckModule::Conv => "conv",
            CheckModule::Relu => "relu",
            CheckModule::Sigmoid => "sigmoid",
            CheckModule::SoftmaxCe => "softmax-ce",
            CheckModule::SmoothL1 => "smooth-l1",
            CheckModule::Gate => "gate",
            CheckModule::Pool => "pool",
            CheckModule::WarpInput => "warp-input",
            CheckModule::WarpTheta => "warp-theta",
            CheckModule::Rsn => "rsn",
            CheckModule::EndToEnd => "end-to-end",
        }
    }

    /// Default tolerance: layer level 1e-6; warp-theta 1e-5; whole model 1e-4.
    pub fn default_tolerance(&self) -> f64 {
        match self {
            CheckModule::WarpTheta | CheckModule::Rsn => 1e-5,
            CheckModule::EndToEnd => 1e-4,
            _ => 1e-6,
        }
    }

    pub fn default_seeds(&self) -> u64 {
        match self {
            CheckModule::WarpInput | CheckModule::WarpTheta => 50,
            CheckModule::EndToEnd => 20,
            _ => 20,
        }
    }
}

/// Runs one module's randomized protocol for one seed and returns one report
/// per checked gradient target.
pub fn run_check(module: CheckModule, seed: u64) -> Result<Vec<GradReport>> {
    run_check_inner(module, seed, false)
}

/// Negative control: same protocol, but the analytic gradient has the sign
/// of its largest-magnitude entry flipped before comparison; every report
/// must then fail its tolerance.
pub fn run_check_mutated(module: CheckModule, seed: u64) -> Result<Vec<GradReport>> {
    run_check_inner(module, seed, true)
}

fn flip_largest(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    if let Some((idx, _)) = out
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
    {
        out.data_mut()[idx] = -out.data()[idx];
    }
    out
}

fn run_check_inner(module: CheckModule, seed: u64, corrupt: bool) -> Result<Vec<GradReport>> {
    let mut rng = SplitMix64::new(mix(0xC0FFEE, seed));
    let step = DEFAULT_STEP;
    let name = module.as_str();
    let prep = |t: &Tensor| if corrupt { flip_largest(t) } else { t.clone() };
    let mut reports = Vec::new();
    match module {
        CheckModule::Fc => {
            let input = random_tensor(&[2, 5], &mut rng);
            let weights = random_tensor(&[5, 4], &mut rng);
            let bias = random_tensor(&[4], &mut rng);
            let w_loss = loss_weights(&[2, 4], &mut rng);
            let grads = fc_backward(&input, &weights, &w_loss)?;
            let f_in = |x: &Tensor| {
                weighted_sum(&fc_forward(x, &weights, &bias).unwrap(), &w_loss)
            };
            reports.push(compare_full(name, seed, f_in, &input, &prep(&grads.wrt_input), step));
            let f_w = |w: &Tensor| {
                weighted_sum(&fc_forward(&input, w, &bias).unwrap(), &w_loss)
            };
            reports.push(compare_full(name, seed, f_w, &weights, &prep(&grads.wrt_params[0]), step));
            let f_b = |b: &Tensor| {
                weighted_sum(&fc_forward(&input, &weights, b).unwrap(), &w_loss)
            };
            reports.push(compare_full(name, seed, f_b, &bias, &prep(&grads.wrt_params[1]), step));
        }
        CheckModule::Conv => {
            let cfg = Conv2dCfg {
                stride: 2,
                padding: 1,
            };
            let input = random_tensor(&[2, 6, 5], &mut rng);
            let kernel = random_tensor(&[3, 2, 3, 3], &mut rng);
            let bias = random_tensor(&[3], &mut rng);
            let out = conv2d_forward(&input, &kernel, &bias, &cfg)?;
            let w_loss = loss_weights(out.shape(), &mut rng);
            let grads = conv2d_backward(&input, &kernel, &cfg, &w_loss)?;
            let f_in = |x: &Tensor| {
                weighted_sum(&conv2d_forward(x, &kernel, &bias, &cfg).unwrap(), &w_loss)
            };
            reports.push(compare_full(name, seed, f_in, &input, &prep(&grads.wrt_input), step));
            let f_k = |k: &Tensor| {
                weighted_sum(&conv2d_forward(&input, k, &bias, &cfg).unwrap(), &w_loss)
            };
            reports.push(compare_full(name, seed, f_k, &kernel, &prep(&grads.wrt_params[0]), step));
            let f_b = |b: &Tensor| {
                weighted_sum(&conv2d_forward(&input, &kernel, b, &cfg).unwrap(), &w_loss)
            };
            reports.push(compare_full(name, seed, f_b, &bias, &prep(&grads.wrt_params[1]), step));
        }
        CheckModule::Relu => {
            // keep inputs away from the kink at 0
            let mut input = random_tensor(&[3, 7], &mut rng);
            for v in input.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.01_f64.copysign(*v);
                }
            }
            let w_loss = loss_weights(&[3, 7], &mut rng);
            let analytic = relu_backward(&input, &w_loss)?;
            let f = |x: &Tensor| weighted_sum(&relu_forward(x), &w_loss);
            reports.push(compare_full(name, seed, f, &input, &prep(&analytic), step));
        }
        CheckModule::Sigmoid => {
            let input = random_tensor(&[3, 7], &mut rng);
            let w_loss = loss_weights(&[3, 7], &mut rng);
            let out = sigmoid_forward(&input);
            let analytic = sigmoid_backward(&out, &w_loss)?;
            let f = |x: &Tensor| weighted_sum(&sigmoid_forward(x), &w_loss);
            reports.push(compare_full(name, seed, f, &input, &prep(&analytic), step));
        }
        CheckModule::SoftmaxCe => {
            let logits = random_tensor(&[3, 5], &mut rng);
            let labels = [rng.below(5), rng.below(5), rng.below(5)];
            let (_, analytic) = softmax_cross_entropy(&logits, &labels)?;
            let f = |x: &Tensor| softmax_cross_entropy(x, &labels).unwrap().0;
            reports.push(compare_full(name, seed, f, &logits, &prep(&analytic), step));
        }
        CheckModule::SmoothL1 => {
            // keep |pred - target| away from the kink at 1
            let mut pred = random_tensor(&[2, 6], &mut rng);
            let target = random_tensor(&[2, 6], &mut rng);
            for (p, t) in pred.data_mut().iter_mut().zip(target.data()) {
                if ((*p - *t).abs() - 1.0).abs() < 1e-3 {
                    *p += 0.01;
                }
            }
            let (_, analytic) = smooth_l1(&pred, &target)?;
            let f = |x: &Tensor| smooth_l1(x, &target).unwrap().0;
            reports.push(compare_full(name, seed, f, &pred, &prep(&analytic), step));
        }
        CheckModule::Gate => {
            let v = random_tensor(&[2, 3, 3], &mut rng);
            let n = 18;
            let params = GateParams {
                weights: random_tensor(&[n, n], &mut rng),
                bias: random_tensor(&[n], &mut rng),
            };
            let w_loss = loss_weights(&[2, 3, 3], &mut rng);
            let (_, cache) = gate_forward(&v, &params, GateGranularity::PerElement)?;
            let grads = gate_backward(&params, &cache, &w_loss)?;
            let f_v = |x: &Tensor| {
                let (g, _) = gate_forward(x, &params, GateGranularity::PerElement).unwrap();
                weighted_sum(&g, &w_loss)
            };
            reports.push(compare_full(name, seed, f_v, &v, &prep(&grads.wrt_input), step));
            let f_w = |w: &Tensor| {
                let p = GateParams {
                    weights: w.clone(),
                    bias: params.bias.clone(),
                };
                let (g, _) = gate_forward(&v, &p, GateGranularity::PerElement).unwrap();
                weighted_sum(&g, &w_loss)
            };
            reports.push(compare_full(name, seed, f_w, &params.weights, &prep(&grads.wrt_params[0]), step));
            let f_b = |b: &Tensor| {
                let p = GateParams {
                    weights: params.weights.clone(),
                    bias: b.clone(),
                };
                let (g, _) = gate_forward(&v, &p, GateGranularity::PerElement).unwrap();
                weighted_sum(&g, &w_loss)
            };
            reports.push(compare_full(name, seed, f_b, &params.bias, &prep(&grads.wrt_params[1]), step));
        }
        CheckModule::Pool => {
            for mode in [PoolMode::Max, PoolMode::Average] {
                let cfg = PoolConfig {
                    mode,
                    out_h: 2,
                    out_w: 2,
                };
                // regenerate until tie-free for max mode
                let mut x = random_tensor(&[2, 4, 4], &mut rng);
                if mode == PoolMode::Max {
                    loop {
                        let mut tied = false;
                        'scan: for c in 0..2 {
                            for oy in 0..2 {
                                for ox in 0..2 {
                                    let mut vals = Vec::new();
                                    for iy in oy * 2..oy * 2 + 2 {
                                        for ix in ox * 2..ox * 2 + 2 {
                                            vals.push(x.at3(c, iy, ix));
                                        }
                                    }
                                    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                    if vals[0] - vals[1] < 1e-3 {
                                        tied = true;
                                        break 'scan;
                                    }
                                }
                            }
                        }
                        if !tied {
                            break;
                        }
                        x = random_tensor(&[2, 4, 4], &mut rng);
                    }
                }
                let w_loss = loss_weights(&[2, 2, 2], &mut rng);
                let (_, cache) = regionlet_pool_forward(&x, &cfg)?;
                let analytic = regionlet_pool_backward(&cache, &cfg, &w_loss)?;
                let f = |t: &Tensor| {
                    let (p, _) = regionlet_pool_forward(t, &cfg).unwrap();
                    weighted_sum(&p, &w_loss)
                };
                reports.push(compare_full(name, seed, f, &x, &prep(&analytic), step));
            }
        }
        CheckModule::WarpInput | CheckModule::WarpTheta => {
            // feature maps up to 3x7x7, densities 2..4; regenerate while any
            // source coordinate is kink-adjacent (< 1e-3 from the lattice)
            let c = 1 + rng.below(3);
            let hw = 2 + rng.below(3);
            let u = random_tensor(&[c, 7, 7], &mut rng);
            let mut attempt = 0u64;
            let (theta, roi, grid) = loop {
                let mut sub = SplitMix64::new(mix(seed, 7770 + attempt));
                let mut raw = [0.0; 6];
                for v in raw.iter_mut() {
                    *v = sub.uniform(-0.9, 0.9);
                }
                let theta = AffineParams::new(raw);
                let roi = RegionOfInterest::new(
                    sub.uniform(0.0, 3.0),
                    sub.uniform(0.0, 3.0),
                    sub.uniform(2.0, 5.0),
                    sub.uniform(2.0, 5.0),
                );
                let grid = grid_generate(&theta, &roi, hw, hw, 1.0);
                if grid.min_lattice_distance() > 1e-3 {
                    break (theta, roi, grid);
                }
                attempt += 1;
            };
            let w_loss = loss_weights(&[c, hw, hw], &mut rng);
            if module == CheckModule::WarpInput {
                let analytic = warp_backward_input(&w_loss, &grid, u.shape())?;
                let f = |x: &Tensor| weighted_sum(&warp_forward(x, &grid).unwrap(), &w_loss);
                reports.push(compare_full(name, seed, f, &u, &prep(&analytic), step));
            } else {
                let analytic6 = warp_backward_theta(&w_loss, &grid, &u, &roi, 1.0)?;
                let analytic = Tensor::from_vec(&[6], analytic6.to_vec())?;
                let point = Tensor::from_vec(&[6], theta.theta.to_vec())?;
                let f = |t: &Tensor| {
                    let mut raw = [0.0; 6];
                    raw.copy_from_slice(t.data());
                    let g = grid_generate(&AffineParams::new(raw), &roi, hw, hw, 1.0);
                    weighted_sum(&warp_forward(&u, &g).unwrap(), &w_loss)
                };
                reports.push(compare_full(name, seed, f, &point, &prep(&analytic), step));
            }
        }
        CheckModule::Rsn => {
            let cfg = RsnConfig {
                num_regions: 4,
                hidden: 12,
                summary_grid: 2,
                mode: RsnMode::Full,
            };
            let input_dim = 8;
            let mut params = RsnParams::init(&cfg, input_dim, &mut rng)?;
            // non-zero heads so every path is live; keep raw outputs inside
            // the clamp and away from its boundary
            for w in params.head_w.iter_mut() {
                rng.fill_uniform(w.data_mut(), -0.05, 0.05);
            }
            let summary = random_tensor(&[input_dim], &mut rng);
            let (thetas, cache) = rsn_forward(&summary, &params)?;
            for t in &thetas {
                for v in t.theta {
                    assert!(v.abs() < 0.999, "instance too close to clamp boundary");
                }
            }
            let mut up = Vec::new();
            let mut up_flat = Vec::new();
            for _ in 0..cfg.num_regions {
                let mut row = [0.0; 6];
                for v in row.iter_mut() {
                    *v = rng.uniform(-1.0, 1.0);
                }
                up.push(row);
                up_flat.extend_from_slice(&row);
            }
            let grads = rsn_backward(&params, &cache, &up, &[1.0; 6])?;
            let loss_of = |p: &RsnParams, s: &Tensor| {
                let (th, _) = rsn_forward(s, p).unwrap();
                let mut acc = 0.0;
                for (k, t) in th.iter().enumerate() {
                    for j in 0..6 {
                        acc += t.theta[j] * up[k][j];
                    }
                }
                acc
            };
            let f_s = |s: &Tensor| loss_of(&params, s);
            reports.push(compare_full(name, seed, f_s, &summary, &prep(&grads.wrt_input), step));
            let f_w1 = |w: &Tensor| {
                let mut p = params.clone();
                p.w1 = w.clone();
                loss_of(&p, &summary)
            };
            reports.push(compare_full(name, seed, f_w1, &params.w1, &prep(&grads.wrt_params[0]), step));
            let f_hw = |w: &Tensor| {
                let mut p = params.clone();
                p.head_w[1] = w.clone();
                loss_of(&p, &summary)
            };
            reports.push(compare_full(
                name,
                seed,
                f_hw,
                &params.head_w[1],
                &prep(&grads.wrt_params[4 + 1]),
                step,
            ));
        }
        CheckModule::EndToEnd => {
            reports.extend(end_to_end_check(seed, corrupt)?);
        }
    }
    Ok(reports)
}

/// Small full-pipeline configuration for whole-model spot checks.
fn small_pipeline() -> PipelineConfig {
    PipelineConfig {
        rsn: RsnConfig {
            num_regions: 4,
            hidden: 16,
            summary_grid: 2,
            mode: RsnMode::Full,
        },
        gate: GateConfig {
            enabled: true,
            granularity: GateGranularity::PerElement,
        },
        pool: PoolConfig {
            mode: PoolMode::Average,
            out_h: 1,
            out_w: 1,
        },
        head: HeadConfig {
            num_classes: 4,
            regionlet_h: 2,
            regionlet_w: 2,
            hidden: 16,
            ..HeadConfig::default()
        },
    }
}

/// Whole-model finite-difference spot check: ten randomly chosen scalar
/// parameters across all tensors, against the full batch loss. Instances
/// with any warp source coordinate kink-adjacent are regenerated, and picks
/// whose analytic gradient sits in the finite-difference noise band
/// (tiny but nonzero) are re-rolled.
fn end_to_end_check(seed: u64, corrupt: bool) -> Result<Vec<GradReport>> {
    let cfg = small_pipeline();
    let exp = ExperimentConfig {
        pipeline: cfg,
        bench: BenchConfig {
            image_size: 32,
            min_shapes: 1,
            max_shapes: 2,
            negatives: 2,
            ..BenchConfig::default()
        },
        ..ExperimentConfig::default()
    };

    let mut attempt = 0u64;
    let (params, data) = loop {
        let mut rng = SplitMix64::new(mix(seed, 0xE2E + attempt));
        let params = ModelParams::init(&exp.pipeline, &mut rng)?;
        let data = generate_dataset(&exp.bench, mix(seed, 31_337 + attempt), 1)?;
        // probe the caches for kink-adjacent source coordinates
        let inst = &data[0];
        let (features, _) = backbone_forward(&inst.image, &params)?;
        let (_, caches) = head_forward(&features, &inst.proposals, &params, &exp.pipeline)?;
        let mut min_dist = f64::INFINITY;
        for c in &caches {
            for g in c.grids() {
                min_dist = min_dist.min(g.min_lattice_distance());
            }
        }
        if min_dist > 1e-3 {
            break (params, data);
        }
        attempt += 1;
        if attempt > 200 {
            return Err(Error::invalid(
                "could not find a kink-free end-to-end instance",
            ));
        }
    };

    let batch: Vec<usize> = vec![0];
    let (_, _, grads) = batch_step(&params, &exp, &data, &batch)?;

    let loss_of = |p: &ModelParams| -> f64 {
        let (l_cls, l_reg, _) = batch_step(p, &exp, &data, &batch).unwrap();
        l_cls + exp.pipeline.head.lambda_reg * l_reg
    };

    // pick 10 scalar coordinates spread over all parameter tensors; re-roll
    // picks whose gradient is tiny-but-nonzero (below the reliable band of
    // the central difference) or, in corrupt mode, zero
    let mut rng = SplitMix64::new(mix(seed, 99));
    let tensor_sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let n_tensors = tensor_sizes.len();
    let mut reports = Vec::new();
    for pick in 0..10 {
        let mut accepted = None;
        for _ in 0..200 {
            let ti = rng.below(n_tensors);
            if tensor_sizes[ti] == 0 {
                continue;
            }
            let ci = rng.below(tensor_sizes[ti]);
            let a = grads.tensors()[ti].data()[ci];
            if (a != 0.0 && a.abs() < 1e-7) || (corrupt && a.abs() < 1e-7) {
                continue;
            }
            let diff_at = |step: f64| {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[ci] += step;
                let f_plus = loss_of(&plus);
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[ci] -= step;
                let f_minus = loss_of(&minus);
                (f_plus - f_minus) / (2.0 * step)
            };
            let numeric = diff_at(DEFAULT_STEP);
            // a perturbation that crosses a ReLU or hat-kernel kink
            // contaminates the difference; two step sizes agree only on
            // kink-free coordinates, so disagreement re-rolls the pick
            if rel_error(numeric, diff_at(DEFAULT_STEP / 4.0)) > 1e-6 {
                continue;
            }
            accepted = Some((ti, ci, a, numeric));
            break;
        }
        let (ti, ci, analytic, numeric) =
            accepted.ok_or_else(|| Error::invalid("no usable end-to-end coordinate found"))?;
        let analytic = if corrupt { -analytic } else { analytic };
        reports.push(GradReport {
            module: "end-to-end".to_string(),
            seed,
            max_rel_error: rel_error(analytic, numeric),
            worst_index: pick * 1_000_000 + ti * 1_000 + ci % 1_000,
            analytic,
            numeric,
        });
    }
    Ok(reports)
}

/// Runs a module's protocol over `seeds` seeds; returns every report and the
/// overall verdict at tolerance `tol`.
pub fn check_module(module: CheckModule, seeds: u64, tol: f64) -> Result<(Vec<GradReport>, bool)> {
    let mut all = Vec::new();
    for seed in 0..seeds {
        all.extend(run_check(module, seed)?);
    }
    let pass = all.iter().all(|r| r.passes(tol));
    Ok((all, pass))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_square_at_three() {
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let d = central_diff(|t: &Tensor| t.data()[0] * t.data()[0], &x, 0, 1e-5);
        assert!((d - 6.0).abs() < 1e-9);
    }

    #[test]
    fn central_diff_linear_is_exact() {
        let x = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
        let d = central_diff(|t: &Tensor| 3.0 * t.data()[0] - 0.5 * t.data()[1], &x, 0, 1e-5);
        assert!((d - 3.0).abs() < 1e-10);
    }

    #[test]
    fn corrupted_gradient_is_detected_with_worst_coordinate() {
        let mut rng = SplitMix64::new(1);
        let input = random_tensor(&[2, 5], &mut rng);
        let weights = random_tensor(&[5, 4], &mut rng);
        let bias = random_tensor(&[4], &mut rng);
        let w_loss = loss_weights(&[2, 4], &mut rng);
        let grads = fc_backward(&input, &weights, &w_loss).unwrap();
        let mut corrupted = grads.wrt_input.clone();
        // corrupt the largest entry by one percent
        let (idx, _) = corrupted
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        corrupted.data_mut()[idx] *= 1.01;
        let f = |x: &Tensor| weighted_sum(&fc_forward(x, &weights, &bias).unwrap(), &w_loss);
        let report = compare_full("fc", 0, f, &input, &corrupted, DEFAULT_STEP);
        assert!(!report.passes(1e-6));
        assert_eq!(report.worst_index, idx);
    }

    #[test]
    fn every_module_passes_at_default_tolerance_small_run() {
        // fast smoke over 3 seeds; the acceptance suite runs the full counts
        for module in ALL_MODULES {
            if module == CheckModule::EndToEnd {
                continue; // heavier; covered by its own test below
            }
            let (reports, pass) = check_module(module, 3, module.default_tolerance()).unwrap();
            assert!(
                pass,
                "{} failed: {:?}",
                module.as_str(),
                reports
                    .iter()
                    .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap())
            );
        }
    }

    #[test]
    fn end_to_end_spot_check_two_seeds() {
        let (reports, pass) = check_module(CheckModule::EndToEnd, 2, 1e-4).unwrap();
        assert!(
            pass,
            "end-to-end failed: {:?}",
            reports
                .iter()
                .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap())
        );
        assert!(reports.len() >= 18);
    }

    #[test]
    fn negative_control_sign_flip_fails_every_module() {
        // flip the sign of the largest-magnitude analytic entry; the check
        // must fail for each layer's wrt_input gradient
        let mut rng = SplitMix64::new(5);
        let input = random_tensor(&[2, 4], &mut rng);
        let weights = random_tensor(&[4, 3], &mut rng);
        let bias = random_tensor(&[3], &mut rng);
        let w_loss = loss_weights(&[2, 3], &mut rng);
        let grads = fc_backward(&input, &weights, &w_loss).unwrap();
        let mut flipped = grads.wrt_input.clone();
        let (idx, _) = flipped
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        flipped.data_mut()[idx] = -flipped.data()[idx];
        let f = |x: &Tensor| weighted_sum(&fc_forward(x, &weights, &bias).unwrap(), &w_loss);
        let report = compare_full("fc", 0, f, &input, &flipped, DEFAULT_STEP);
        assert!(!report.passes(1e-6));
    }
}
