//! Interactive browser bindings: synthetic scenes, the affine region warp
//! with its sample grid, the cell-grid initialization and a small in-browser
//! training run. All functions return plain buffers; the page does the
//! canvas work.

use wasm_bindgen::prelude::wasm_bindgen;

use regionlets::bench::{generate_instance, BenchConfig};
use regionlets::config::ExperimentConfig;
use regionlets::gate::{GateConfig, PoolConfig, PoolMode};
use regionlets::head::{backbone_forward, detect, HeadConfig, PipelineConfig};
use regionlets::region::{cell_init, AffineParams, RegionOfInterest, RsnConfig};
use regionlets::rng::mix;
use regionlets::tensor::Tensor;
use regionlets::train::{run_training, validation_set};
use regionlets::warp::{grid_generate, warp_forward};

fn scene(seed: u32, size: u32) -> regionlets::bench::DetectionInstance {
    let cfg = BenchConfig {
        image_size: size.max(32) as usize,
        ..BenchConfig::default()
    };
    generate_instance(&cfg, mix(seed as u64, 0xDE_30))
}

fn tensor_to_rgba(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// RGBA pixels (row-major, size x size) of a synthetic benchmark scene.
#[wasm_bindgen]
pub fn scene_rgba(seed: u32, size: u32) -> Vec<u8> {
    tensor_to_rgba(&scene(seed, size).image)
}

/// Ground truth of the same scene: per box, 5 values
/// (class, x1, y1, x2, y2).
#[wasm_bindgen]
pub fn scene_ground_truth(seed: u32, size: u32) -> Vec<f64> {
    let inst = scene(seed, size);
    let mut out = Vec::with_capacity(inst.gt.len() * 5);
    for g in &inst.gt {
        out.push(g.class as f64);
        out.extend_from_slice(&g.bbox);
    }
    out
}

fn checked_theta(theta: &[f64]) -> AffineParams {
    let mut six = [0.0; 6];
    for (dst, src) in six.iter_mut().zip(theta.iter()) {
        *dst = src.clamp(-1.0, 1.0);
    }
    AffineParams::new(six)
}

/// Warps the RoI (x, y, w, h in scene pixels) of a scene with the six affine
/// values; returns RGBA pixels of the out_h x out_w result.
#[wasm_bindgen]
pub fn warp_rgba(
    seed: u32,
    size: u32,
    theta: &[f64],
    roi: &[f64],
    out_h: u32,
    out_w: u32,
) -> Vec<u8> {
    let inst = scene(seed, size);
    let roi = RegionOfInterest::new(roi[0], roi[1], roi[2].max(2.0), roi[3].max(2.0));
    let grid = grid_generate(
        &checked_theta(theta),
        &roi,
        out_h.max(1) as usize,
        out_w.max(1) as usize,
        1.0,
    );
    match warp_forward(&inst.image, &grid) {
        Ok(v) => tensor_to_rgba(&v),
        Err(_) => vec![0; (4 * out_h * out_w) as usize],
    }
}

/// Source sample coordinates (x, y pairs in scene pixels) for the same warp;
/// the page overlays them on the scene canvas.
#[wasm_bindgen]
pub fn warp_grid(theta: &[f64], roi: &[f64], out_h: u32, out_w: u32) -> Vec<f64> {
    let roi = RegionOfInterest::new(roi[0], roi[1], roi[2].max(2.0), roi[3].max(2.0));
    let grid = grid_generate(
        &checked_theta(theta),
        &roi,
        out_h.max(1) as usize,
        out_w.max(1) as usize,
        1.0,
    );
    let mut out = Vec::with_capacity(2 * grid.len());
    for p in 0..grid.len() {
        out.push(grid.x_s[p]);
        out.push(grid.y_s[p]);
    }
    out
}

/// The non-overlapping cell initialization for an n x n region grid: per
/// region, six affine values, row-major over (row, col).
#[wasm_bindgen]
pub fn cell_grid(n: u32) -> Vec<f64> {
    let n = n.clamp(1, 8) as usize;
    let mut out = Vec::with_capacity(n * n * 6);
    for row in 0..n {
        for col in 0..n {
            let t = cell_init(n, row, col).expect("in-range cell");
            out.extend_from_slice(&t.theta);
        }
    }
    out
}

fn mini_config(seed: u32, train_images: u32, epochs: u32) -> ExperimentConfig {
    ExperimentConfig {
        seed: seed as u64,
        epochs: epochs.clamp(1, 20) as usize,
        batch_size: 2,
        schedule: vec![(0, 1e-3)],
        momentum: 0.9,
        train_images: train_images.clamp(4, 200) as usize,
        val_images: 4,
        bench: BenchConfig::default(),
        pipeline: PipelineConfig {
            rsn: RsnConfig {
                num_regions: 4,
                hidden: 32,
                summary_grid: 2,
                ..RsnConfig::default()
            },
            gate: GateConfig::default(),
            pool: PoolConfig {
                mode: PoolMode::Max,
                out_h: 1,
                out_w: 1,
            },
            head: HeadConfig {
                regionlet_h: 3,
                regionlet_w: 3,
                hidden: 64,
                ..HeadConfig::default()
            },
        },
    }
}

/// Trains a small model in the page and runs it on one validation scene.
/// Returns: [final_cls_loss, final_val_map, n_detections, then per
/// detection: class, score, x1, y1, x2, y2].
#[wasm_bindgen]
pub fn train_mini_and_detect(seed: u32, train_images: u32, epochs: u32) -> Vec<f64> {
    let exp = mini_config(seed, train_images, epochs);
    let Ok(out) = run_training(&exp) else {
        return vec![f64::NAN, 0.0, 0.0];
    };
    let Ok(val) = validation_set(&exp) else {
        return vec![f64::NAN, 0.0, 0.0];
    };
    let inst = &val[0];
    let sz = exp.bench.image_size as f64;
    let dets = backbone_forward(&inst.image, &out.params)
        .and_then(|(features, _)| {
            detect(
                &features,
                &inst.proposals,
                &out.params,
                &exp.pipeline,
                sz,
                sz,
            )
        })
        .unwrap_or_default();
    let last = out.history.last();
    let mut result = vec![
        last.map(|r| r.cls_loss).unwrap_or(f64::NAN),
        last.map(|r| r.val_map50).unwrap_or(0.0),
        dets.len() as f64,
    ];
    for d in dets {
        result.push(d.class as f64);
        result.push(d.score);
        result.extend_from_slice(&d.bbox);
    }
    result
}

/// The validation scene used by [`train_mini_and_detect`], as RGBA.
#[wasm_bindgen]
pub fn mini_val_scene_rgba(seed: u32) -> Vec<u8> {
    let exp = mini_config(seed, 16, 1);
    match validation_set(&exp) {
        Ok(val) => tensor_to_rgba(&val[0].image),
        Err(_) => Vec::new(),
    }
}

/// Ground truth of the mini validation scene, 5 values per box.
#[wasm_bindgen]
pub fn mini_val_scene_gt(seed: u32) -> Vec<f64> {
    let exp = mini_config(seed, 16, 1);
    let Ok(val) = validation_set(&exp) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for g in &val[0].gt {
        out.push(g.class as f64);
        out.extend_from_slice(&g.bbox);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_buffer_has_rgba_layout() {
        let px = scene_rgba(3, 64);
        assert_eq!(px.len(), 64 * 64 * 4);
        assert!(px.chunks(4).all(|c| c[3] == 255));
    }

    #[test]
    fn warp_outputs_match_requested_size() {
        let roi = [8.0, 8.0, 40.0, 40.0];
        let theta = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let px = warp_rgba(3, 64, &theta, &roi, 32, 24);
        assert_eq!(px.len(), 32 * 24 * 4);
        let grid = warp_grid(&theta, &roi, 32, 24);
        assert_eq!(grid.len(), 32 * 24 * 2);
        // identity keeps samples inside the RoI
        for pair in grid.chunks(2) {
            assert!(pair[0] >= roi[0] && pair[0] <= roi[0] + roi[2]);
            assert!(pair[1] >= roi[1] && pair[1] <= roi[1] + roi[3]);
        }
    }

    #[test]
    fn cell_grid_returns_six_values_per_region() {
        let v = cell_grid(3);
        assert_eq!(v.len(), 9 * 6);
        assert_eq!(&v[0..6], cell_init(3, 0, 0).unwrap().theta.as_slice());
    }

    #[test]
    fn mini_training_returns_detections_header() {
        let out = train_mini_and_detect(1, 8, 1);
        assert!(out.len() >= 3);
        assert!(out[0].is_finite());
        let n = out[2] as usize;
        assert_eq!(out.len(), 3 + 6 * n);
    }
}
