//! Deterministic synthetic detection benchmark: images with colored disks,
//! triangles and rotated bars (the bars exercise non-rectangular region
//! selection), ground-truth boxes, jittered proposals plus random negatives,
//! and a VOC-style AP/mAP evaluator.

use crate::head::Detection;
use crate::region::RegionOfInterest;
use crate::rng::{mix, SplitMix64};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["disk", "triangle", "bar"];

/// Salt separating the per-image streams of a dataset from other uses of the
/// same base seed.
const IMAGE_SALT: u64 = 0x5ee_d001;

#[derive(Clone, Copy, Debug)]
pub struct BenchConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Uniform +-fraction applied to proposal scale and translation.
    pub jitter: f64,
    /// Random negative proposals per image.
    pub negatives: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            image_size: 64,
            min_shapes: 1,
            max_shapes: 3,
            jitter: 0.2,
            negatives: 4,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::invalid("image_size must be >= 16"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid("need 1 <= min_shapes <= max_shapes"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::invalid("jitter must be in [0,1)"));
        }
        Ok(())
    }
}

/// Ground-truth object: box corners and foreground class index.
#[derive(Clone, Copy, Debug)]
pub struct GtBox {
    pub bbox: [f64; 4],
    pub class: usize,
}

/// One synthetic image with its ground truth and proposal set.
#[derive(Clone, Debug)]
pub struct DetectionInstance {
    pub image: Tensor,
    pub gt: Vec<GtBox>,
    pub proposals: Vec<RegionOfInterest>,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Triangle {
        ax: f64,
        ay: f64,
        bx: f64,
        by: f64,
        cx: f64,
        cy: f64,
    },
    Bar {
        cx: f64,
        cy: f64,
        half_len: f64,
        half_wid: f64,
        cos_t: f64,
        sin_t: f64,
    },
}

impl Shape {
    fn class(&self) -> usize {
        match self {
            Shape::Disk { .. } => 0,
            Shape::Triangle { .. } => 1,
            Shape::Bar { .. } => 2,
        }
    }

    fn bbox(&self) -> [f64; 4] {
        match *self {
            Shape::Disk { cx, cy, r } => [cx - r, cy - r, cx + r, cy + r],
            Shape::Triangle {
                ax,
                ay,
                bx,
                by,
                cx,
                cy,
            } => [
                ax.min(bx).min(cx),
                ay.min(by).min(cy),
                ax.max(bx).max(cx),
                ay.max(by).max(cy),
            ],
            Shape::Bar {
                cx,
                cy,
                half_len,
                half_wid,
                cos_t,
                sin_t,
            } => {
                let ex = half_len * cos_t.abs() + half_wid * sin_t.abs();
                let ey = half_len * sin_t.abs() + half_wid * cos_t.abs();
                [cx - ex, cy - ey, cx + ex, cy + ey]
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => {
                let dx = x - cx;
                let dy = y - cy;
                dx * dx + dy * dy <= r * r
            }
            Shape::Triangle {
                ax,
                ay,
                bx,
                by,
                cx,
                cy,
            } => {
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| {
                    (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx, cy);
                let d3 = sign(cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
            Shape::Bar {
                cx,
                cy,
                half_len,
                half_wid,
                cos_t,
                sin_t,
            } => {
                let dx = x - cx;
                let dy = y - cy;
                let u = dx * cos_t + dy * sin_t;
                let v = -dx * sin_t + dy * cos_t;
                u.abs() <= half_len && v.abs() <= half_wid
            }
        }
    }
}

fn sample_shape(class: usize, size: f64, rng: &mut SplitMix64) -> Shape {
    match class {
        0 => {
            let r = rng.uniform(0.11 * size, 0.2 * size);
            let cx = rng.uniform(r + 1.0, size - r - 1.0);
            let cy = rng.uniform(r + 1.0, size - r - 1.0);
            Shape::Disk { cx, cy, r }
        }
        1 => {
            // near-equilateral triangle from a circumradius and a rotation
            let r = rng.uniform(0.14 * size, 0.24 * size);
            let cx = rng.uniform(r + 1.0, size - r - 1.0);
            let cy = rng.uniform(r + 1.0, size - r - 1.0);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let mut pts = [0.0; 6];
            for k in 0..3 {
                let ang = phase + k as f64 * std::f64::consts::TAU / 3.0;
                pts[2 * k] = cx + r * ang.cos();
                pts[2 * k + 1] = cy + r * ang.sin();
            }
            Shape::Triangle {
                ax: pts[0],
                ay: pts[1],
                bx: pts[2],
                by: pts[3],
                cx: pts[4],
                cy: pts[5],
            }
        }
        _ => {
            // aspect ratio >= 3, random orientation
            let half_len = rng.uniform(0.2 * size, 0.32 * size);
            let aspect = rng.uniform(3.0, 6.0);
            let half_wid = (half_len / aspect).max(1.5);
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let (sin_t, cos_t) = theta.sin_cos();
            let ex = half_len * cos_t.abs() + half_wid * sin_t.abs();
            let ey = half_len * sin_t.abs() + half_wid * cos_t.abs();
            let cx = rng.uniform(ex + 1.0, size - ex - 1.0);
            let cy = rng.uniform(ey + 1.0, size - ey - 1.0);
            Shape::Bar {
                cx,
                cy,
                half_len,
                half_wid,
                cos_t,
                sin_t,
            }
        }
    }
}

fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    crate::head::iou(a, b)
}

/// Saturated random color, well separated from the dark background.
fn bright_color(rng: &mut SplitMix64) -> [f64; 3] {
    let h = rng.uniform(0.0, 6.0);
    let s = rng.uniform(0.55, 0.9);
    let v = rng.uniform(0.7, 1.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one image and its annotations from an already-mixed stream seed.
/// Shapes are drawn with 2x2 supersampled coverage blending; class colors
/// are distinct and jittered per instance.
pub fn generate_instance(cfg: &BenchConfig, stream_seed: u64) -> DetectionInstance {
    let mut rng = SplitMix64::new(stream_seed);
    let size = cfg.image_size;
    let sz = size as f64;

    // muted background with per-channel jitter
    let bg = [
        rng.uniform(0.05, 0.25),
        rng.uniform(0.05, 0.25),
        rng.uniform(0.05, 0.25),
    ];
    let mut image = Tensor::zeros(&[3, size, size]);
    for c in 0..3 {
        for p in 0..size * size {
            image.data_mut()[c * size * size + p] = bg[c];
        }
    }

    let n_shapes = cfg.min_shapes + rng.below(cfg.max_shapes - cfg.min_shapes + 1);
    let mut shapes: Vec<Shape> = Vec::new();
    let mut gt: Vec<GtBox> = Vec::new();
    for s in 0..n_shapes {
        let class = rng.below(NUM_CLASSES);
        let mut placed = None;
        for _attempt in 0..20 {
            let cand = sample_shape(class, sz, &mut rng);
            let bb = cand.bbox();
            let crowded = gt.iter().any(|g| box_iou(&g.bbox, &bb) >= 0.3);
            if !crowded {
                placed = Some(cand);
                break;
            }
        }
        let Some(shape) = placed else {
            // dense image: drop extra shapes but always keep the first
            if s == 0 {
                let shape = sample_shape(class, sz, &mut rng);
                gt.push(GtBox {
                    bbox: shape.bbox(),
                    class,
                });
                shapes.push(shape);
            }
            continue;
        };
        gt.push(GtBox {
            bbox: shape.bbox(),
            class,
        });
        shapes.push(shape);
    }

    // colors are class-independent (random bright hue per shape), so only
    // geometry separates the classes
    for shape in &shapes {
        let color = bright_color(&mut rng);
        let bb = shape.bbox();
        let x_lo = (bb[0].floor().max(0.0)) as usize;
        let y_lo = (bb[1].floor().max(0.0)) as usize;
        let x_hi = (bb[2].ceil().min(sz) as usize).min(size);
        let y_hi = (bb[3].ceil().min(sz) as usize).min(size);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                // 2x2 supersampling inside the pixel
                let mut hits = 0.0;
                for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if shape.contains(px as f64 + ox, py as f64 + oy) {
                        hits += 0.25;
                    }
                }
                if hits > 0.0 {
                    for c in 0..3 {
                        let idx = (c * size + py) * size + px;
                        let old = image.data()[idx];
                        image.data_mut()[idx] = old * (1.0 - hits) + color[c] * hits;
                    }
                }
            }
        }
    }

    // faint pixel noise so features are not piecewise constant
    for v in image.data_mut().iter_mut() {
        *v = (*v + rng.uniform(-0.02, 0.02)).clamp(0.0, 1.0);
    }

    // proposals: jittered copies of every GT box, then random negatives
    let mut proposals = Vec::new();
    for g in &gt {
        let roi = RegionOfInterest::from_corners(g.bbox);
        let (cx, cy) = roi.center();
        let jcx = cx + rng.uniform(-cfg.jitter, cfg.jitter) * roi.w;
        let jcy = cy + rng.uniform(-cfg.jitter, cfg.jitter) * roi.h;
        let jw = roi.w * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter));
        let jh = roi.h * (1.0 + rng.uniform(-cfg.jitter, cfg.jitter));
        let jittered =
            RegionOfInterest::new(jcx - 0.5 * jw, jcy - 0.5 * jh, jw, jh).clamped_to(sz, sz, 4.0);
        proposals.push(jittered);
    }
    for _ in 0..cfg.negatives {
        let w = rng.uniform(8.0, 0.45 * sz);
        let h = rng.uniform(8.0, 0.45 * sz);
        let x = rng.uniform(0.0, sz - w);
        let y = rng.uniform(0.0, sz - h);
        proposals.push(RegionOfInterest::new(x, y, w, h).clamped_to(sz, sz, 4.0));
    }

    DetectionInstance {
        image,
        gt,
        proposals,
    }
}

/// Generates `count` instances; instance i uses the stream seed
/// mix(mix(seed, IMAGE_SALT), i), a pure function of (cfg, seed, i).
pub fn generate_dataset(
    cfg: &BenchConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<DetectionInstance>> {
    cfg.validate()?;
    let base = mix(seed, IMAGE_SALT);
    Ok((0..count)
        .map(|i| generate_instance(cfg, mix(base, i as u64)))
        .collect())
}

/// Writes one PPM per image plus `annotations.txt` with one line per
/// ground-truth box: `<idx> <class> <x1> <y1> <x2> <y2>`.
pub fn export_dataset(dir: &std::path::Path, instances: &[DetectionInstance]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut annotations = String::new();
    for (idx, inst) in instances.iter().enumerate() {
        crate::ppm::write_ppm(&dir.join(format!("img_{idx:05}.ppm")), &inst.image)?;
        for g in &inst.gt {
            annotations.push_str(&format!(
                "{idx} {} {} {} {} {}\n",
                g.class, g.bbox[0], g.bbox[1], g.bbox[2], g.bbox[3]
            ));
        }
    }
    std::fs::write(dir.join("annotations.txt"), annotations.as_bytes())?;
    Ok(())
}

/// Per-class average precision and their mean.
#[derive(Clone, Debug)]
pub struct MapReport {
    pub per_class_ap: Vec<f64>,
    pub map: f64,
}

/// VOC-style evaluation: detections ranked by score; each matches the
/// highest-IoU unmatched ground truth of its class (IoU >= threshold);
/// AP integrates the precision envelope over all recall points. Classes with
/// no ground truth anywhere are excluded from the mean.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    iou_thresh: f64,
    num_classes: usize,
) -> Result<MapReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "detections for {} images but ground truth for {}",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut per_class_ap = vec![0.0; num_classes];
    let mut classes_with_gt = 0usize;
    let mut ap_sum = 0.0;
    for class in 0..num_classes {
        let total_gt: usize = ground_truth
            .iter()
            .map(|g| g.iter().filter(|b| b.class == class).count())
            .sum();
        if total_gt == 0 {
            continue;
        }
        classes_with_gt += 1;

        // rank all detections of this class; break score ties by image then
        // insertion order for determinism
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for (di, d) in dets.iter().enumerate() {
                if d.class == class {
                    ranked.push((img, di));
                }
            }
        }
        ranked.sort_by(|&(ia, da), &(ib, db)| {
            let sa = detections[ia][da].score;
            let sb = detections[ib][db].score;
            sb.partial_cmp(&sa)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(&ib))
                .then(da.cmp(&db))
        });

        let mut matched: Vec<Vec<bool>> = ground_truth
            .iter()
            .map(|g| vec![false; g.len()])
            .collect();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
        for &(img, di) in &ranked {
            let det = &detections[img][di];
            let mut best = (0.0, None);
            for (gi, g) in ground_truth[img].iter().enumerate() {
                if g.class != class || matched[img][gi] {
                    continue;
                }
                let v = box_iou(&det.bbox, &g.bbox);
                if v > best.0 {
                    best = (v, Some(gi));
                }
            }
            match best {
                (v, Some(gi)) if v >= iou_thresh => {
                    matched[img][gi] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
        }

        // all-points integration of the precision envelope
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..curve.len() {
            let (r, _) = curve[i];
            if r > prev_recall {
                let envelope = curve[i..].iter().map(|&(_, p)| p).fold(0.0f64, f64::max);
                ap += (r - prev_recall) * envelope;
                prev_recall = r;
            }
        }
        per_class_ap[class] = ap;
        ap_sum += ap;
    }
    let map = if classes_with_gt == 0 {
        0.0
    } else {
        ap_sum / classes_with_gt as f64
    };
    Ok(MapReport { per_class_ap, map })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(bbox: [f64; 4], class: usize, score: f64) -> Detection {
        Detection { bbox, class, score }
    }

    #[test]
    fn same_seed_gives_bit_identical_datasets() {
        let cfg = BenchConfig::default();
        let a = generate_dataset(&cfg, 9, 5).unwrap();
        let b = generate_dataset(&cfg, 9, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.image.data().iter().zip(y.image.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
            assert_eq!(x.gt.len(), y.gt.len());
            assert_eq!(x.proposals.len(), y.proposals.len());
        }
        let c = generate_dataset(&cfg, 10, 1).unwrap();
        assert_ne!(
            a[0].image.data()[0].to_bits(),
            c[0].image.data()[0].to_bits()
        );
    }

    #[test]
    fn single_shape_config_gives_one_gt() {
        let cfg = BenchConfig {
            min_shapes: 1,
            max_shapes: 1,
            ..BenchConfig::default()
        };
        for inst in generate_dataset(&cfg, 4, 20).unwrap() {
            assert_eq!(inst.gt.len(), 1);
            assert!(!inst.proposals.is_empty());
        }
    }

    #[test]
    fn gt_boxes_inside_image_and_proposals_exist() {
        let cfg = BenchConfig::default();
        for inst in generate_dataset(&cfg, 11, 30).unwrap() {
            let sz = cfg.image_size as f64;
            for g in &inst.gt {
                assert!(g.bbox[0] >= 0.0 && g.bbox[1] >= 0.0);
                assert!(g.bbox[2] <= sz && g.bbox[3] <= sz);
                assert!(g.bbox[2] > g.bbox[0] && g.bbox[3] > g.bbox[1]);
                assert!(g.class < NUM_CLASSES);
            }
            assert!(inst.proposals.len() >= inst.gt.len() + cfg.negatives);
            for p in &inst.proposals {
                p.validate().unwrap();
                let c = p.corners();
                assert!(c[0] >= 0.0 && c[1] >= 0.0 && c[2] <= sz && c[3] <= sz);
            }
        }
    }

    #[test]
    fn disk_pixel_coverage_near_area() {
        let cfg = BenchConfig {
            min_shapes: 1,
            max_shapes: 1,
            ..BenchConfig::default()
        };
        let mut checked = 0;
        for inst in generate_dataset(&cfg, 21, 40).unwrap() {
            let g = inst.gt[0];
            if g.class != 0 {
                continue;
            }
            let r = 0.25 * ((g.bbox[2] - g.bbox[0]) + (g.bbox[3] - g.bbox[1]));
            let size = cfg.image_size;
            let cx = 0.5 * (g.bbox[0] + g.bbox[2]);
            let cy = 0.5 * (g.bbox[1] + g.bbox[3]);
            // count pixels whose half-pixel center falls in the analytic disk
            let mut count = 0;
            for py in 0..size {
                for px in 0..size {
                    let dx = px as f64 + 0.5 - cx;
                    let dy = py as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        count += 1;
                    }
                }
            }
            let area = std::f64::consts::PI * r * r;
            assert!(
                (count as f64 - area).abs() <= 0.1 * area,
                "disk r={r}: {count} px vs area {area}"
            );
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn ap_one_detection_matching_one_gt() {
        let gt = vec![vec![GtBox {
            bbox: [10.0, 10.0, 30.0, 30.0],
            class: 0,
        }]];
        let dets = vec![vec![det([11.0, 11.0, 30.0, 31.0], 0, 0.9)]];
        let report = evaluate_map(&dets, &gt, 0.5, NUM_CLASSES).unwrap();
        assert_eq!(report.per_class_ap[0], 1.0);
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn ap_zero_without_detections() {
        let gt = vec![vec![GtBox {
            bbox: [10.0, 10.0, 30.0, 30.0],
            class: 1,
        }]];
        let dets = vec![vec![]];
        let report = evaluate_map(&dets, &gt, 0.5, NUM_CLASSES).unwrap();
        assert_eq!(report.map, 0.0);
    }

    #[test]
    fn ap_matches_hand_pr_integration() {
        // 2 GT of one class; 3 detections ranked by score: TP, FP, TP.
        // precision after each rank: 1, 1/2, 2/3; recall: 1/2, 1/2, 1.
        // all-points AP = 0.5 * 1.0 + 0.5 * 2/3 = 5/6.
        let gt = vec![
            vec![GtBox {
                bbox: [0.0, 0.0, 10.0, 10.0],
                class: 0,
            }],
            vec![GtBox {
                bbox: [20.0, 20.0, 30.0, 30.0],
                class: 0,
            }],
        ];
        let dets = vec![
            vec![
                det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
                det([40.0, 40.0, 50.0, 50.0], 0, 0.8),
            ],
            vec![det([20.0, 20.0, 30.0, 30.0], 0, 0.7)],
        ];
        let report = evaluate_map(&dets, &gt, 0.5, 1).unwrap();
        assert!((report.map - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_count_once() {
        let gt = vec![vec![
            GtBox {
                bbox: [0.0, 0.0, 10.0, 10.0],
                class: 0,
            },
            GtBox {
                bbox: [20.0, 0.0, 30.0, 10.0],
                class: 0,
            },
        ]];
        // both detections cover the same GT; the duplicate is a FP and the
        // second GT is never found: AP = 0.5
        let dets = vec![vec![
            det([0.0, 0.0, 10.0, 10.0], 0, 0.9),
            det([0.5, 0.5, 10.0, 10.0], 0, 0.8),
        ]];
        let report = evaluate_map(&dets, &gt, 0.5, 1).unwrap();
        assert!((report.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn export_writes_ppms_and_annotations() {
        let cfg = BenchConfig {
            min_shapes: 1,
            max_shapes: 1,
            ..BenchConfig::default()
        };
        let data = generate_dataset(&cfg, 5, 3).unwrap();
        let dir = std::env::temp_dir().join("regionlets-export-test");
        let _ = std::fs::remove_dir_all(&dir);
        export_dataset(&dir, &data).unwrap();
        for i in 0..3 {
            assert!(dir.join(format!("img_{i:05}.ppm")).exists());
        }
        let ann = std::fs::read_to_string(dir.join("annotations.txt")).unwrap();
        assert_eq!(ann.lines().count(), 3);
        let first: Vec<&str> = ann.lines().next().unwrap().split(' ').collect();
        assert_eq!(first.len(), 6);
        assert_eq!(first[0], "0");
    }

    #[test]
    fn map_monotone_in_iou_threshold() {
        let cfg = BenchConfig::default();
        let data = generate_dataset(&cfg, 3, 10).unwrap();
        // fabricate detections straight from the jittered proposals
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for inst in &data {
            let mut per_img = Vec::new();
            for (i, g) in inst.gt.iter().enumerate() {
                let p = inst.proposals[i].corners();
                per_img.push(det(p, g.class, 0.9 - 0.01 * i as f64));
            }
            dets.push(per_img);
            gts.push(inst.gt.clone());
        }
        let m50 = evaluate_map(&dets, &gts, 0.5, NUM_CLASSES).unwrap().map;
        let m70 = evaluate_map(&dets, &gts, 0.7, NUM_CLASSES).unwrap().map;
        assert!(m70 <= m50 + 1e-12);
        assert!((0.0..=1.0).contains(&m50));
        assert!((0.0..=1.0).contains(&m70));
    }
}
