//! Full detection pipeline: toy conv backbone, per-RoI region selection,
//! K region warps, gating, pooling, concatenation and the classification /
//! box-regression heads, with the complete backward chain into every
//! parameter tensor and the feature map.

use crate::gate::{
    gate_backward_acc, gate_forward, regionlet_pool_backward, regionlet_pool_forward, GateCache,
    GateConfig, GateParams, PoolCache, PoolConfig,
};
use crate::layers::{
    conv2d_backward, conv2d_forward, fc_backward_acc, fc_forward, relu_backward, relu_forward,
    Conv2dCfg,
};
use crate::region::{freeze_mask, AffineParams, RegionOfInterest, RsnConfig};
use crate::rng::SplitMix64;
use crate::rsn::{
    rsn_backward_acc, rsn_forward, summarize_roi, summarize_roi_backward, xavier, RsnCache,
    RsnParams,
};
use crate::tensor::Tensor;
use crate::warp::{
    grid_generate, warp_backward_input, warp_backward_theta, warp_forward, SampleGrid,
};
use crate::{Error, Result};

/// Input image channels.
pub const IMAGE_CHANNELS: usize = 3;
/// Backbone output channels (the feature map sampled by the warps).
pub const FEATURE_CHANNELS: usize = 16;
/// Image pixels per feature-map cell after three stride-2 convolutions.
pub const FEATURE_STRIDE: f64 = 8.0;

const BACKBONE_CHANNELS: [usize; 3] = [8, 16, FEATURE_CHANNELS];
const CONV_CFG: Conv2dCfg = Conv2dCfg {
    stride: 2,
    padding: 1,
};

/// Classifier-side configuration.
#[derive(Clone, Copy, Debug)]
pub struct HeadConfig {
    /// Number of classes including background (index 0).
    pub num_classes: usize,
    /// Regionlet density H x W inside each selected region.
    pub regionlet_h: usize,
    pub regionlet_w: usize,
    /// Width of the classifier trunk FC.
    pub hidden: usize,
    pub nms_iou: f64,
    pub score_thresh: f64,
    pub lambda_reg: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_classes: 4,
            regionlet_h: 4,
            regionlet_w: 4,
            hidden: 256,
            nms_iou: 0.5,
            score_thresh: 0.3,
            lambda_reg: 1.0,
        }
    }
}

/// The whole pipeline's configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineConfig {
    pub rsn: RsnConfig,
    pub gate: GateConfig,
    pub pool: PoolConfig,
    pub head: HeadConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.rsn.validate()?;
        if self.head.num_classes < 2 {
            return Err(Error::invalid("need at least background + one class"));
        }
        if self.pool.out_h > self.head.regionlet_h || self.pool.out_w > self.head.regionlet_w {
            return Err(Error::invalid(format!(
                "pool output {}x{} exceeds regionlet density {}x{}",
                self.pool.out_h, self.pool.out_w, self.head.regionlet_h, self.head.regionlet_w
            )));
        }
        if self.head.regionlet_h % self.pool.out_h != 0
            || self.head.regionlet_w % self.pool.out_w != 0
        {
            return Err(Error::invalid(
                "pool output must evenly partition the regionlet grid",
            ));
        }
        if !(0.0..=1.0).contains(&self.head.nms_iou) {
            return Err(Error::invalid("nms_iou must be in [0,1]"));
        }
        Ok(())
    }

    /// Dimension of the concatenated per-RoI regionlet feature.
    pub fn concat_dim(&self) -> usize {
        self.rsn.num_regions * FEATURE_CHANNELS * self.pool.out_h * self.pool.out_w
    }

    pub fn summary_dim(&self) -> usize {
        FEATURE_CHANNELS * self.rsn.summary_grid * self.rsn.summary_grid
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn zeros_like(&self) -> ConvLayer {
        ConvLayer {
            kernel: self.kernel.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }
}

/// Every learnable tensor in the model. Gate parameters exist only when
/// gating is enabled.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub rsn: RsnParams,
    pub gates: Vec<GateParams>,
    pub trunk_w: Tensor,
    pub trunk_b: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Tensor,
    pub box_w: Tensor,
    pub box_b: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &PipelineConfig, rng: &mut SplitMix64) -> Result<ModelParams> {
        cfg.validate()?;
        let mut conv = |c_in: usize, c_out: usize| {
            let mut kernel = Tensor::zeros(&[c_out, c_in, 3, 3]);
            xavier(&mut kernel, rng);
            ConvLayer {
                kernel,
                bias: Tensor::zeros(&[c_out]),
            }
        };
        let conv1 = conv(IMAGE_CHANNELS, BACKBONE_CHANNELS[0]);
        let conv2 = conv(BACKBONE_CHANNELS[0], BACKBONE_CHANNELS[1]);
        let conv3 = conv(BACKBONE_CHANNELS[1], BACKBONE_CHANNELS[2]);

        let rsn = RsnParams::init(&cfg.rsn, cfg.summary_dim(), rng)?;

        let mut gates = Vec::new();
        if cfg.gate.enabled {
            let (h, w) = (cfg.head.regionlet_h, cfg.head.regionlet_w);
            let n_in = FEATURE_CHANNELS * h * w;
            let n_out = cfg.gate.granularity.gate_count(FEATURE_CHANNELS, h, w);
            for _ in 0..cfg.rsn.num_regions {
                let mut weights = Tensor::zeros(&[n_in, n_out]);
                xavier(&mut weights, rng);
                gates.push(GateParams {
                    weights,
                    bias: Tensor::zeros(&[n_out]),
                });
            }
        }

        let d = cfg.concat_dim();
        let mut trunk_w = Tensor::zeros(&[d, cfg.head.hidden]);
        xavier(&mut trunk_w, rng);
        let mut cls_w = Tensor::zeros(&[cfg.head.hidden, cfg.head.num_classes]);
        xavier(&mut cls_w, rng);
        // zero-initialized box head: decoded boxes start exactly at the
        // proposals and refinements are learned from there
        let box_w = Tensor::zeros(&[cfg.head.hidden, 4]);
        Ok(ModelParams {
            conv1,
            conv2,
            conv3,
            rsn,
            gates,
            trunk_w,
            trunk_b: Tensor::zeros(&[cfg.head.hidden]),
            cls_w,
            cls_b: Tensor::zeros(&[cfg.head.num_classes]),
            box_w,
            box_b: Tensor::zeros(&[4]),
        })
    }

    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
            rsn: self.rsn.zeros_like(),
            gates: self
                .gates
                .iter()
                .map(|g| GateParams {
                    weights: g.weights.zeros_like(),
                    bias: g.bias.zeros_like(),
                })
                .collect(),
            trunk_w: self.trunk_w.zeros_like(),
            trunk_b: self.trunk_b.zeros_like(),
            cls_w: self.cls_w.zeros_like(),
            cls_b: self.cls_b.zeros_like(),
            box_w: self.box_w.zeros_like(),
            box_b: self.box_b.zeros_like(),
        }
    }

    /// Stable tensor naming used by checkpoints; order matches
    /// [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "backbone.conv1.kernel".to_string(),
            "backbone.conv1.bias".to_string(),
            "backbone.conv2.kernel".to_string(),
            "backbone.conv2.bias".to_string(),
            "backbone.conv3.kernel".to_string(),
            "backbone.conv3.bias".to_string(),
        ];
        out.extend(self.rsn.names());
        for k in 0..self.gates.len() {
            out.push(format!("gate{k}.weight"));
            out.push(format!("gate{k}.bias"));
        }
        out.extend(
            [
                "trunk.fc.weight",
                "trunk.fc.bias",
                "trunk.cls.weight",
                "trunk.cls.bias",
                "trunk.box.weight",
                "trunk.box.bias",
            ]
            .map(String::from),
        );
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![
            &self.conv1.kernel,
            &self.conv1.bias,
            &self.conv2.kernel,
            &self.conv2.bias,
            &self.conv3.kernel,
            &self.conv3.bias,
        ];
        out.extend(self.rsn.tensors());
        for g in &self.gates {
            out.push(&g.weights);
            out.push(&g.bias);
        }
        out.extend([
            &self.trunk_w,
            &self.trunk_b,
            &self.cls_w,
            &self.cls_b,
            &self.box_w,
            &self.box_b,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.conv1.kernel,
            &mut self.conv1.bias,
            &mut self.conv2.kernel,
            &mut self.conv2.bias,
            &mut self.conv3.kernel,
            &mut self.conv3.bias,
        ];
        out.extend(self.rsn.tensors_mut());
        for g in self.gates.iter_mut() {
            out.push(&mut g.weights);
            out.push(&mut g.bias);
        }
        out.extend([
            &mut self.trunk_w,
            &mut self.trunk_b,
            &mut self.cls_w,
            &mut self.cls_b,
            &mut self.box_w,
            &mut self.box_b,
        ]);
        out
    }

    pub fn add_assign(&mut self, other: &ModelParams) -> Result<()> {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            mine.add_assign(t)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn check_finite(&self, label: &str) -> Result<()> {
        for t in self.tensors() {
            t.check_finite(label)?;
        }
        Ok(())
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, &Tensor)> {
        self.names().into_iter().zip(self.tensors()).collect()
    }

    /// Rebuilds parameters with the given config's shapes from named
    /// checkpoint entries.
    pub fn from_checkpoint(
        cfg: &PipelineConfig,
        entries: &[(String, Tensor)],
    ) -> Result<ModelParams> {
        let mut rng = SplitMix64::new(0);
        let mut params = ModelParams::init(cfg, &mut rng)?;
        let names = params.names();
        if entries.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, checkpoint has {}",
                names.len(),
                entries.len()
            )));
        }
        for (slot, name) in params.tensors_mut().into_iter().zip(&names) {
            let found = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            found.1.check_shape(slot.shape())?;
            *slot = found.1.clone();
        }
        Ok(params)
    }
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    image: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    a2: Tensor,
    z3: Tensor,
}

/// Three stride-2 zero-padded 3x3 convolutions with ReLU; 64x64 input gives
/// an 8x8 feature map at stride 8.
pub fn backbone_forward(image: &Tensor, params: &ModelParams) -> Result<(Tensor, BackboneCache)> {
    let z1 = conv2d_forward(image, &params.conv1.kernel, &params.conv1.bias, &CONV_CFG)?;
    let a1 = relu_forward(&z1);
    let z2 = conv2d_forward(&a1, &params.conv2.kernel, &params.conv2.bias, &CONV_CFG)?;
    let a2 = relu_forward(&z2);
    let z3 = conv2d_forward(&a2, &params.conv3.kernel, &params.conv3.bias, &CONV_CFG)?;
    let features = relu_forward(&z3);
    let cache = BackboneCache {
        image: image.clone(),
        z1,
        a1,
        z2,
        a2,
        z3,
    };
    Ok((features, cache))
}

pub fn backbone_backward(
    cache: &BackboneCache,
    params: &ModelParams,
    d_features: &Tensor,
    grads: &mut ModelParams,
) -> Result<()> {
    let dz3 = relu_backward(&cache.z3, d_features)?;
    let g3 = conv2d_backward(&cache.a2, &params.conv3.kernel, &CONV_CFG, &dz3)?;
    grads.conv3.kernel.add_assign(&g3.wrt_params[0])?;
    grads.conv3.bias.add_assign(&g3.wrt_params[1])?;
    let dz2 = relu_backward(&cache.z2, &g3.wrt_input)?;
    let g2 = conv2d_backward(&cache.a1, &params.conv2.kernel, &CONV_CFG, &dz2)?;
    grads.conv2.kernel.add_assign(&g2.wrt_params[0])?;
    grads.conv2.bias.add_assign(&g2.wrt_params[1])?;
    let dz1 = relu_backward(&cache.z1, &g2.wrt_input)?;
    let g1 = conv2d_backward(&cache.image, &params.conv1.kernel, &CONV_CFG, &dz1)?;
    grads.conv1.kernel.add_assign(&g1.wrt_params[0])?;
    grads.conv1.bias.add_assign(&g1.wrt_params[1])?;
    Ok(())
}

/// Everything head_backward needs to replay one RoI.
#[derive(Clone, Debug)]
pub struct RoiCache {
    summary_grid: SampleGrid,
    rsn_cache: RsnCache,
    pub thetas: Vec<AffineParams>,
    warp_grids: Vec<SampleGrid>,
    gate_caches: Vec<Option<GateCache>>,
    pool_caches: Vec<PoolCache>,
    concat: Tensor,
    trunk_z: Tensor,
    trunk_a: Tensor,
}

impl RoiCache {
    /// Every sample grid this RoI touched: the summary grid plus one grid
    /// per selected region.
    pub fn grids(&self) -> impl Iterator<Item = &SampleGrid> {
        std::iter::once(&self.summary_grid).chain(self.warp_grids.iter())
    }
}

/// Per-RoI head outputs.
#[derive(Clone, Debug)]
pub struct RoiOutput {
    /// Raw class logits, shape [1, num_classes].
    pub logits: Tensor,
    /// Class-agnostic box deltas (dx, dy, dw, dh).
    pub deltas: [f64; 4],
}

/// Runs the head over every RoI of one image:
/// summary -> RSN -> K affine warps -> gate -> pool -> concat -> FC trunk ->
/// (class logits, box deltas).
pub fn head_forward(
    features: &Tensor,
    rois: &[RegionOfInterest],
    params: &ModelParams,
    cfg: &PipelineConfig,
) -> Result<(Vec<RoiOutput>, Vec<RoiCache>)> {
    if rois.is_empty() {
        return Err(Error::invalid("head_forward needs at least one RoI"));
    }
    let mut outputs = Vec::with_capacity(rois.len());
    let mut caches = Vec::with_capacity(rois.len());
    let (h, w) = (cfg.head.regionlet_h, cfg.head.regionlet_w);
    for roi in rois {
        roi.validate()?;
        let (summary, summary_grid) =
            summarize_roi(features, roi, FEATURE_STRIDE, cfg.rsn.summary_grid)?;
        let (thetas, rsn_cache) = rsn_forward(&summary, &params.rsn)?;

        let k = cfg.rsn.num_regions;
        let mut warp_grids = Vec::with_capacity(k);
        let mut gate_caches = Vec::with_capacity(k);
        let mut pool_caches = Vec::with_capacity(k);
        let mut concat = Tensor::zeros(&[1, cfg.concat_dim()]);
        let piece = FEATURE_CHANNELS * cfg.pool.out_h * cfg.pool.out_w;
        for (ki, theta) in thetas.iter().enumerate() {
            let grid = grid_generate(theta, roi, h, w, FEATURE_STRIDE);
            let v = warp_forward(features, &grid)?;
            let (gated, gate_cache) = if cfg.gate.enabled {
                let (g, c) = gate_forward(&v, &params.gates[ki], cfg.gate.granularity)?;
                (g, Some(c))
            } else {
                (v, None)
            };
            let (pooled, pool_cache) = regionlet_pool_forward(&gated, &cfg.pool)?;
            concat.data_mut()[ki * piece..(ki + 1) * piece].copy_from_slice(pooled.data());
            warp_grids.push(grid);
            gate_caches.push(gate_cache);
            pool_caches.push(pool_cache);
        }

        let trunk_z = fc_forward(&concat, &params.trunk_w, &params.trunk_b)?;
        let trunk_a = relu_forward(&trunk_z);
        let logits = fc_forward(&trunk_a, &params.cls_w, &params.cls_b)?;
        let box_out = fc_forward(&trunk_a, &params.box_w, &params.box_b)?;
        logits.check_finite("class logits")?;
        box_out.check_finite("box deltas")?;
        let mut deltas = [0.0; 4];
        deltas.copy_from_slice(box_out.data());

        outputs.push(RoiOutput { logits, deltas });
        caches.push(RoiCache {
            summary_grid,
            rsn_cache,
            thetas,
            warp_grids,
            gate_caches,
            pool_caches,
            concat,
            trunk_z,
            trunk_a,
        });
    }
    Ok((outputs, caches))
}

/// Backward through the whole head for every RoI of one image, accumulating
/// into `grads` (RoIs in index order) and returning the gradient w.r.t. the
/// backbone features, including both the warp path (through every region
/// sample) and the RSN path (through the RoI summary).
pub fn head_backward(
    features: &Tensor,
    rois: &[RegionOfInterest],
    params: &ModelParams,
    cfg: &PipelineConfig,
    caches: &[RoiCache],
    upstream: &[(Tensor, [f64; 4])],
    grads: &mut ModelParams,
) -> Result<Tensor> {
    if caches.len() != rois.len() || upstream.len() != rois.len() {
        return Err(Error::invalid(
            "head_backward: rois, caches and upstream must have equal length",
        ));
    }
    let mut d_features = features.zeros_like();
    let feat_shape = features.shape().to_vec();
    let mask = freeze_mask(cfg.rsn.mode);
    let piece = FEATURE_CHANNELS * cfg.pool.out_h * cfg.pool.out_w;
    for (ri, roi) in rois.iter().enumerate() {
        let cache = &caches[ri];
        let (d_logits, d_deltas) = &upstream[ri];

        let mut d_a = fc_backward_acc(
            &cache.trunk_a,
            &params.cls_w,
            d_logits,
            &mut grads.cls_w,
            &mut grads.cls_b,
        )?;
        let d_box = Tensor::from_vec(&[1, 4], d_deltas.to_vec())?;
        let d_a_box = fc_backward_acc(
            &cache.trunk_a,
            &params.box_w,
            &d_box,
            &mut grads.box_w,
            &mut grads.box_b,
        )?;
        d_a.add_assign(&d_a_box)?;
        let d_z = relu_backward(&cache.trunk_z, &d_a)?;
        let d_concat = fc_backward_acc(
            &cache.concat,
            &params.trunk_w,
            &d_z,
            &mut grads.trunk_w,
            &mut grads.trunk_b,
        )?;

        let mut d_thetas: Vec<[f64; 6]> = Vec::with_capacity(cfg.rsn.num_regions);
        for ki in 0..cfg.rsn.num_regions {
            let d_pooled = Tensor::from_vec(
                &[FEATURE_CHANNELS, cfg.pool.out_h, cfg.pool.out_w],
                d_concat.data()[ki * piece..(ki + 1) * piece].to_vec(),
            )?;
            let d_gated = regionlet_pool_backward(&cache.pool_caches[ki], &cfg.pool, &d_pooled)?;
            let d_v = match &cache.gate_caches[ki] {
                Some(gc) => {
                    let (gw, gb) = {
                        let slot = &mut grads.gates[ki];
                        (&mut slot.weights, &mut slot.bias)
                    };
                    gate_backward_acc(&params.gates[ki], gc, &d_gated, gw, gb)?
                }
                None => d_gated,
            };
            let d_u = warp_backward_input(&d_v, &cache.warp_grids[ki], &feat_shape)?;
            d_features.add_assign(&d_u)?;
            let d_theta = warp_backward_theta(
                &d_v,
                &cache.warp_grids[ki],
                features,
                roi,
                FEATURE_STRIDE,
            )?;
            d_thetas.push(d_theta);
        }

        let d_summary_flat =
            rsn_backward_acc(&params.rsn, &cache.rsn_cache, &d_thetas, &mask, &mut grads.rsn)?;
        let d_summary =
            summarize_roi_backward(&d_summary_flat, &cache.summary_grid, &feat_shape)?;
        d_features.add_assign(&d_summary)?;
    }
    Ok(d_features)
}

/// One scored box. `class` is the foreground class index (background
/// excluded), matching the benchmark's ground-truth labels.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub class: usize,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if self.bbox[2] > self.bbox[0] && self.bbox[3] > self.bbox[1] && self.score.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate detection {self:?}")))
        }
    }
}

/// Intersection over union of two (x1,y1,x2,y2) boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Greedy non-maximum suppression, descending score, ties broken by lower
/// input index. Class-agnostic: callers group by class first.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; detections.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[rank] {
            continue;
        }
        kept.push(detections[i]);
        for (later_rank, &j) in order.iter().enumerate().skip(rank + 1) {
            if !suppressed[later_rank]
                && iou(&detections[i].bbox, &detections[j].bbox) > iou_threshold
            {
                suppressed[later_rank] = true;
            }
        }
    }
    kept
}

/// Classification / regression target for one RoI: class 0 is background;
/// foreground classes are shifted by one and carry encoded box deltas.
#[derive(Clone, Copy, Debug)]
pub struct RoiTarget {
    pub class: usize,
    pub deltas: Option<[f64; 4]>,
}

pub const FG_IOU_THRESHOLD: f64 = 0.5;

/// Standard two-stage assignment: foreground if best IoU >= 0.5, background
/// otherwise; deltas are (dx, dy, dw, dh) relative to the RoI with log-space
/// width/height.
pub fn assign_targets(
    rois: &[RegionOfInterest],
    gt_boxes: &[[f64; 4]],
    gt_classes: &[usize],
) -> Vec<RoiTarget> {
    rois.iter()
        .map(|roi| {
            let rb = roi.corners();
            let mut best = (0.0, None);
            for (g, gt) in gt_boxes.iter().enumerate() {
                let v = iou(&rb, gt);
                if v > best.0 {
                    best = (v, Some(g));
                }
            }
            match best {
                (v, Some(g)) if v >= FG_IOU_THRESHOLD => RoiTarget {
                    class: gt_classes[g] + 1,
                    deltas: Some(encode_deltas(roi, &gt_boxes[g])),
                },
                _ => RoiTarget {
                    class: 0,
                    deltas: None,
                },
            }
        })
        .collect()
}

pub fn encode_deltas(roi: &RegionOfInterest, gt: &[f64; 4]) -> [f64; 4] {
    let (rcx, rcy) = roi.center();
    let gw = gt[2] - gt[0];
    let gh = gt[3] - gt[1];
    let gcx = 0.5 * (gt[0] + gt[2]);
    let gcy = 0.5 * (gt[1] + gt[3]);
    [
        (gcx - rcx) / roi.w,
        (gcy - rcy) / roi.h,
        (gw / roi.w).ln(),
        (gh / roi.h).ln(),
    ]
}

pub fn decode_deltas(roi: &RegionOfInterest, deltas: &[f64; 4]) -> [f64; 4] {
    let (rcx, rcy) = roi.center();
    let cx = rcx + deltas[0] * roi.w;
    let cy = rcy + deltas[1] * roi.h;
    // scale deltas clamped so a wild prediction cannot explode the box
    let w = roi.w * deltas[2].clamp(-3.0, 3.0).exp();
    let h = roi.h * deltas[3].clamp(-3.0, 3.0).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

/// Full inference over one image's proposals: softmax scores, class-agnostic
/// box decoding clipped to the image, score threshold and per-class NMS.
pub fn detect(
    features: &Tensor,
    rois: &[RegionOfInterest],
    params: &ModelParams,
    cfg: &PipelineConfig,
    img_w: f64,
    img_h: f64,
) -> Result<Vec<Detection>> {
    let (outputs, _) = head_forward(features, rois, params, cfg)?;
    let mut all = Vec::new();
    for (roi, out) in rois.iter().zip(&outputs) {
        let probs = softmax_row(out.logits.data());
        let decoded = decode_deltas(roi, &out.deltas);
        let clipped = [
            decoded[0].clamp(0.0, img_w),
            decoded[1].clamp(0.0, img_h),
            decoded[2].clamp(0.0, img_w),
            decoded[3].clamp(0.0, img_h),
        ];
        if clipped[2] - clipped[0] < 1.0 || clipped[3] - clipped[1] < 1.0 {
            continue;
        }
        for class in 1..cfg.head.num_classes {
            let score = probs[class];
            if score >= cfg.head.score_thresh {
                all.push(Detection {
                    bbox: clipped,
                    class: class - 1,
                    score,
                });
            }
        }
    }
    let mut kept = Vec::new();
    for class in 0..cfg.head.num_classes - 1 {
        let group: Vec<Detection> = all.iter().filter(|d| d.class == class).cloned().collect();
        kept.extend(nms(&group, cfg.head.nms_iou));
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{GateGranularity, PoolMode};
    use crate::region::RsnMode;

    fn tiny_config() -> PipelineConfig {
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
                mode: PoolMode::Max,
                out_h: 1,
                out_w: 1,
            },
            head: HeadConfig {
                num_classes: 4,
                regionlet_h: 2,
                regionlet_w: 2,
                hidden: 24,
                ..HeadConfig::default()
            },
        }
    }

    fn demo_image(seed: u64, size: usize) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let mut img = Tensor::zeros(&[IMAGE_CHANNELS, size, size]);
        rng.fill_uniform(img.data_mut(), 0.0, 1.0);
        img
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(&a, &a), 1.0);
        let b = [5.0, 5.0, 7.0, 7.0];
        assert_eq!(iou(&a, &b), 0.0);
        let c = [1.0, 1.0, 3.0, 3.0];
        assert!((iou(&a, &c) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn nms_suppresses_overlapping_lower_score() {
        let dets = vec![
            Detection {
                bbox: [0.0, 0.0, 10.0, 10.0],
                class: 0,
                score: 0.9,
            },
            Detection {
                bbox: [1.0, 1.0, 10.5, 10.5],
                class: 0,
                score: 0.8,
            },
        ];
        assert!(iou(&dets[0].bbox, &dets[1].bbox) > 0.5);
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint_boxes() {
        let dets = vec![
            Detection {
                bbox: [0.0, 0.0, 5.0, 5.0],
                class: 0,
                score: 0.5,
            },
            Detection {
                bbox: [10.0, 10.0, 15.0, 15.0],
                class: 0,
                score: 0.4,
            },
            Detection {
                bbox: [20.0, 0.0, 25.0, 5.0],
                class: 0,
                score: 0.3,
            },
        ];
        assert_eq!(nms(&dets, 0.5).len(), 3);
    }

    #[test]
    fn nms_matches_brute_force_oracle() {
        let mut rng = SplitMix64::new(14);
        for _ in 0..20 {
            let mut dets = Vec::new();
            for _ in 0..12 {
                let x = rng.uniform(0.0, 30.0);
                let y = rng.uniform(0.0, 30.0);
                let w = rng.uniform(4.0, 14.0);
                let h = rng.uniform(4.0, 14.0);
                dets.push(Detection {
                    bbox: [x, y, x + w, y + h],
                    class: 0,
                    score: rng.next_f64(),
                });
            }
            let kept = nms(&dets, 0.4);

            // O(n^2) reference: sort, then scan marking suppressions
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| {
                dets[b]
                    .score
                    .partial_cmp(&dets[a].score)
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut keep_ref: Vec<usize> = Vec::new();
            'outer: for &i in &order {
                for &j in &keep_ref {
                    if iou(&dets[i].bbox, &dets[j].bbox) > 0.4 {
                        continue 'outer;
                    }
                }
                keep_ref.push(i);
            }
            assert_eq!(kept.len(), keep_ref.len());
            for (k, &i) in kept.iter().zip(&keep_ref) {
                assert_eq!(k.score, dets[i].score);
            }
        }
    }

    #[test]
    fn assign_roi_equal_to_gt_gives_zero_deltas() {
        let gt = [[8.0, 8.0, 24.0, 28.0]];
        let roi = RegionOfInterest::from_corners(gt[0]);
        let t = assign_targets(&[roi], &gt, &[2]);
        assert_eq!(t[0].class, 3);
        let d = t[0].deltas.unwrap();
        for v in d {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn assign_low_iou_is_background() {
        let gt = [[0.0, 0.0, 10.0, 10.0]];
        let roi = RegionOfInterest::new(6.0, 6.0, 10.0, 10.0); // IoU ~ 0.09
        assert!(iou(&roi.corners(), &gt[0]) < 0.5);
        let t = assign_targets(&[roi], &gt, &[0]);
        assert_eq!(t[0].class, 0);
        assert!(t[0].deltas.is_none());
    }

    #[test]
    fn deltas_match_hand_computation_and_roundtrip() {
        let roi = RegionOfInterest::new(10.0, 20.0, 20.0, 10.0);
        let gt = [12.0, 21.0, 36.0, 33.0];
        let d = encode_deltas(&roi, &gt);
        // hand values: roi center (20,25), gt center (24,27), gw=24, gh=12
        assert!((d[0] - 4.0 / 20.0).abs() < 1e-12);
        assert!((d[1] - 2.0 / 10.0).abs() < 1e-12);
        assert!((d[2] - (24.0f64 / 20.0).ln()).abs() < 1e-12);
        assert!((d[3] - (12.0f64 / 10.0).ln()).abs() < 1e-12);
        let back = decode_deltas(&roi, &d);
        for (a, b) in back.iter().zip(&gt) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn forward_is_deterministic_per_seed() {
        let cfg = tiny_config();
        let image = demo_image(5, 32);
        let rois = vec![RegionOfInterest::new(4.0, 6.0, 18.0, 16.0)];
        let run = || {
            let mut rng = SplitMix64::new(123);
            let params = ModelParams::init(&cfg, &mut rng).unwrap();
            let (features, _) = backbone_forward(&image, &params).unwrap();
            let (out, _) = head_forward(&features, &rois, &params, &cfg).unwrap();
            (out[0].logits.clone(), out[0].deltas)
        };
        let (l1, d1) = run();
        let (l2, d2) = run();
        for (a, b) in l1.data().iter().zip(l2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scores_sum_to_one_per_roi() {
        let cfg = tiny_config();
        let mut rng = SplitMix64::new(3);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let image = demo_image(6, 32);
        let (features, _) = backbone_forward(&image, &params).unwrap();
        let rois = vec![
            RegionOfInterest::new(2.0, 2.0, 20.0, 14.0),
            RegionOfInterest::new(8.0, 10.0, 16.0, 18.0),
        ];
        let (outs, _) = head_forward(&features, &rois, &params, &cfg).unwrap();
        for out in outs {
            let p = softmax_row(out.logits.data());
            let total: f64 = p.iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn head_matches_module_by_module_oracle() {
        let cfg = tiny_config();
        let mut rng = SplitMix64::new(42);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let image = demo_image(7, 32);
        let (features, _) = backbone_forward(&image, &params).unwrap();
        let roi = RegionOfInterest::new(5.0, 3.0, 17.0, 21.0);
        let (outs, _) = head_forward(&features, &[roi], &params, &cfg).unwrap();

        // oracle: chain the public module operations by hand
        let (summary, _) = summarize_roi(&features, &roi, FEATURE_STRIDE, 2).unwrap();
        let (thetas, _) = rsn_forward(&summary, &params.rsn).unwrap();
        let mut concat = Vec::new();
        for (ki, theta) in thetas.iter().enumerate() {
            let grid = grid_generate(theta, &roi, 2, 2, FEATURE_STRIDE);
            let v = warp_forward(&features, &grid).unwrap();
            let (gated, _) =
                gate_forward(&v, &params.gates[ki], cfg.gate.granularity).unwrap();
            let (pooled, _) = regionlet_pool_forward(&gated, &cfg.pool).unwrap();
            concat.extend_from_slice(pooled.data());
        }
        let concat = Tensor::from_vec(&[1, concat.len()], concat).unwrap();
        let a = relu_forward(&fc_forward(&concat, &params.trunk_w, &params.trunk_b).unwrap());
        let logits = fc_forward(&a, &params.cls_w, &params.cls_b).unwrap();
        let deltas = fc_forward(&a, &params.box_w, &params.box_b).unwrap();
        for (x, y) in outs[0].logits.data().iter().zip(logits.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
        for (x, y) in outs[0].deltas.iter().zip(deltas.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn global_mode_reduces_to_single_region_head() {
        let mut cfg = tiny_config();
        cfg.rsn.num_regions = 1;
        cfg.rsn.mode = RsnMode::Global;
        let mut rng = SplitMix64::new(81);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        // head starts at the identity transform
        assert_eq!(
            params.rsn.head_b[0].data(),
            AffineParams::identity().theta.as_slice()
        );
        let image = demo_image(8, 32);
        let (features, _) = backbone_forward(&image, &params).unwrap();
        let roi = RegionOfInterest::new(4.0, 4.0, 20.0, 20.0);
        let (outs, caches) = head_forward(&features, &[roi], &params, &cfg).unwrap();
        assert_eq!(caches[0].thetas.len(), 1);
        // zero head weights at init: theta is exactly the identity
        assert_eq!(caches[0].thetas[0], AffineParams::identity());
        assert_eq!(outs[0].logits.shape(), &[1, 4]);
    }

    #[test]
    fn disabled_gate_equals_pipeline_without_gating() {
        let mut cfg = tiny_config();
        cfg.gate.enabled = false;
        let mut rng = SplitMix64::new(9);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        assert!(params.gates.is_empty());
        let image = demo_image(10, 32);
        let (features, _) = backbone_forward(&image, &params).unwrap();
        let roi = RegionOfInterest::new(6.0, 6.0, 18.0, 14.0);
        let (outs, _) = head_forward(&features, &[roi], &params, &cfg).unwrap();

        // oracle with the gating module removed entirely
        let (summary, _) = summarize_roi(&features, &roi, FEATURE_STRIDE, 2).unwrap();
        let (thetas, _) = rsn_forward(&summary, &params.rsn).unwrap();
        let mut concat = Vec::new();
        for theta in &thetas {
            let grid = grid_generate(theta, &roi, 2, 2, FEATURE_STRIDE);
            let v = warp_forward(&features, &grid).unwrap();
            let (pooled, _) = regionlet_pool_forward(&v, &cfg.pool).unwrap();
            concat.extend_from_slice(pooled.data());
        }
        let concat = Tensor::from_vec(&[1, concat.len()], concat).unwrap();
        let a = relu_forward(&fc_forward(&concat, &params.trunk_w, &params.trunk_b).unwrap());
        let logits = fc_forward(&a, &params.cls_w, &params.cls_b).unwrap();
        for (x, y) in outs[0].logits.data().iter().zip(logits.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_model() {
        let cfg = tiny_config();
        let mut rng = SplitMix64::new(33);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let entries: Vec<(String, Tensor)> = params
            .checkpoint_entries()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let restored = ModelParams::from_checkpoint(&cfg, &entries).unwrap();
        for (a, b) in params.tensors().iter().zip(restored.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn backward_accumulates_all_parameter_grads() {
        let cfg = tiny_config();
        let mut rng = SplitMix64::new(55);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let image = demo_image(11, 32);
        let (features, _) = backbone_forward(&image, &params).unwrap();
        let rois = vec![RegionOfInterest::new(3.0, 5.0, 19.0, 15.0)];
        let (outs, caches) = head_forward(&features, &rois, &params, &cfg).unwrap();
        let mut up_logits = outs[0].logits.zeros_like();
        up_logits.data_mut()[1] = 1.0;
        let upstream = vec![(up_logits, [0.1, -0.2, 0.3, 0.05])];
        let mut grads = params.zeros_like();
        let d_feat =
            head_backward(&features, &rois, &params, &cfg, &caches, &upstream, &mut grads)
                .unwrap();
        assert!(d_feat.max_abs() > 0.0);
        assert!(grads.cls_w.max_abs() > 0.0);
        assert!(grads.trunk_w.max_abs() > 0.0);
        assert!(grads.gates[0].weights.max_abs() > 0.0);
        // head biases receive gradient at zero-weight init via the trunk path
        assert!(grads.rsn.head_b[0].max_abs() > 0.0);
    }
}
