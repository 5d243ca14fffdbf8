//! Region Selection Network: a bilinear S x S summary of the RoI's feature
//! window feeds a two-layer FC trunk with ReLU, and K independent heads each
//! predict six affine values clamped into [-1, 1]. Head weights start at
//! zero with cell-grid biases, so training begins from the exact
//! non-overlapping cell tiling.

use crate::layers::{
    fc_backward_acc, fc_forward, relu_backward, relu_forward, LayerGradients,
};
use crate::region::{cell_init, AffineParams, RegionOfInterest, RsnConfig, RsnMode};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::warp::{grid_generate, warp_backward_input, warp_forward, SampleGrid};
use crate::{Error, Result};

/// Bilinearly resamples the RoI's feature window to S x S and flattens it.
/// Differentiable: reuses the warp kernel with the identity transform.
/// A degenerate RoI (smaller than one feature cell) is clamped to one cell.
pub fn summarize_roi(
    features: &Tensor,
    roi: &RegionOfInterest,
    stride: f64,
    s: usize,
) -> Result<(Tensor, SampleGrid)> {
    let shape = features.shape();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "feature map must be [C,H,W], got {shape:?}"
        )));
    }
    let eff = RegionOfInterest {
        w0: roi.w0,
        h0: roi.h0,
        w: roi.w.max(stride),
        h: roi.h.max(stride),
    };
    let grid = grid_generate(&AffineParams::identity(), &eff, s, s, stride);
    let sampled = warp_forward(features, &grid)?;
    let c = shape[0];
    let flat = sampled.reshaped(&[c * s * s])?;
    Ok((flat, grid))
}

/// Backward of [`summarize_roi`] into the feature map.
pub fn summarize_roi_backward(
    upstream_flat: &Tensor,
    grid: &SampleGrid,
    feature_shape: &[usize],
) -> Result<Tensor> {
    let c = feature_shape[0];
    let up = Tensor::from_vec(&[c, grid.h, grid.w], upstream_flat.data().to_vec())?;
    warp_backward_input(&up, grid, feature_shape)
}

/// RSN weights: shared trunk plus K affine heads.
#[derive(Clone, Debug)]
pub struct RsnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub head_w: Vec<Tensor>,
    pub head_b: Vec<Tensor>,
}

impl RsnParams {
    /// Trunk weights are Xavier-uniform; head weights are zero with biases
    /// set to the cell-grid initialization (identity in global mode), so the
    /// initial output is exactly the non-overlapping cell tiling.
    pub fn init(cfg: &RsnConfig, input_dim: usize, rng: &mut SplitMix64) -> Result<RsnParams> {
        cfg.validate()?;
        let side = cfg.grid_side()?;
        let mut w1 = Tensor::zeros(&[input_dim, cfg.hidden]);
        let mut w2 = Tensor::zeros(&[cfg.hidden, cfg.hidden]);
        xavier(&mut w1, rng);
        xavier(&mut w2, rng);
        let mut head_w = Vec::with_capacity(cfg.num_regions);
        let mut head_b = Vec::with_capacity(cfg.num_regions);
        for row in 0..side {
            for col in 0..side {
                head_w.push(Tensor::zeros(&[cfg.hidden, 6]));
                let theta = if cfg.mode == RsnMode::Global {
                    AffineParams::identity()
                } else {
                    cell_init(side, row, col)?
                };
                head_b.push(Tensor::from_vec(&[6], theta.theta.to_vec())?);
            }
        }
        Ok(RsnParams {
            w1,
            b1: Tensor::zeros(&[cfg.hidden]),
            w2,
            b2: Tensor::zeros(&[cfg.hidden]),
            head_w,
            head_b,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.head_w.len()
    }

    /// Parameter tensors in a fixed order: trunk then heads.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w1, &self.b1, &self.w2, &self.b2];
        for w in &self.head_w {
            out.push(w);
        }
        for b in &self.head_b {
            out.push(b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2];
        out.extend(self.head_w.iter_mut());
        out.extend(self.head_b.iter_mut());
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "rsn.fc1.weight".to_string(),
            "rsn.fc1.bias".to_string(),
            "rsn.fc2.weight".to_string(),
            "rsn.fc2.bias".to_string(),
        ];
        for k in 0..self.head_w.len() {
            out.push(format!("rsn.head{k}.weight"));
        }
        for k in 0..self.head_b.len() {
            out.push(format!("rsn.head{k}.bias"));
        }
        out
    }

    pub fn zeros_like(&self) -> RsnParams {
        RsnParams {
            w1: self.w1.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
            head_w: self.head_w.iter().map(Tensor::zeros_like).collect(),
            head_b: self.head_b.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

pub(crate) fn xavier(t: &mut Tensor, rng: &mut SplitMix64) {
    let s = t.shape();
    let (fan_in, fan_out) = match s.len() {
        2 => (s[0], s[1]),
        4 => (s[1] * s[2] * s[3], s[0] * s[2] * s[3]),
        _ => (t.len(), t.len()),
    };
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.fill_uniform(t.data_mut(), -limit, limit);
}

#[derive(Clone, Debug)]
pub struct RsnCache {
    summary: Tensor,
    z1: Tensor,
    a1: Tensor,
    z2: Tensor,
    a2: Tensor,
    raw: Vec<[f64; 6]>,
}

/// FC(->hidden) ReLU, FC(->hidden) ReLU, then K heads FC(->6), each output
/// hard-clamped into [-1, 1].
pub fn rsn_forward(summary: &Tensor, params: &RsnParams) -> Result<(Vec<AffineParams>, RsnCache)> {
    let d = summary.len();
    let flat = Tensor::from_vec(&[1, d], summary.data().to_vec())?;
    let z1 = fc_forward(&flat, &params.w1, &params.b1)?;
    let a1 = relu_forward(&z1);
    let z2 = fc_forward(&a1, &params.w2, &params.b2)?;
    let a2 = relu_forward(&z2);
    a2.check_finite("rsn activations")?;

    let mut thetas = Vec::with_capacity(params.num_regions());
    let mut raw = Vec::with_capacity(params.num_regions());
    for k in 0..params.num_regions() {
        let out = fc_forward(&a2, &params.head_w[k], &params.head_b[k])?;
        let mut r = [0.0; 6];
        r.copy_from_slice(out.data());
        raw.push(r);
        thetas.push(AffineParams::clamped(r));
    }
    Ok((
        thetas,
        RsnCache {
            summary: flat,
            z1,
            a1,
            z2,
            a2,
            raw,
        },
    ))
}

/// Backward through the heads, the clamp (zero gradient where |raw| > 1), an
/// optional freeze mask over the six components, and the trunk.
///
/// Returned parameter order matches [`RsnParams::tensors`]:
/// `[w1, b1, w2, b2, head_w[0..K], head_b[0..K]]`.
pub fn rsn_backward(
    params: &RsnParams,
    cache: &RsnCache,
    upstream: &[[f64; 6]],
    mask: &[f64; 6],
) -> Result<LayerGradients> {
    let mut grads = params.zeros_like();
    let d_summary = rsn_backward_acc(params, cache, upstream, mask, &mut grads)?;
    let mut wrt_params = Vec::with_capacity(4 + 2 * params.num_regions());
    wrt_params.push(grads.w1);
    wrt_params.push(grads.b1);
    wrt_params.push(grads.w2);
    wrt_params.push(grads.b2);
    wrt_params.extend(grads.head_w);
    wrt_params.extend(grads.head_b);
    Ok(LayerGradients {
        wrt_input: d_summary,
        wrt_params,
    })
}

/// [`rsn_backward`] accumulating into an `RsnParams`-shaped gradient holder.
pub(crate) fn rsn_backward_acc(
    params: &RsnParams,
    cache: &RsnCache,
    upstream: &[[f64; 6]],
    mask: &[f64; 6],
    grads: &mut RsnParams,
) -> Result<Tensor> {
    let k = params.num_regions();
    if upstream.len() != k {
        return Err(Error::invalid(format!(
            "expected {k} upstream theta gradients, got {}",
            upstream.len()
        )));
    }
    let mut d_a2 = Tensor::zeros(&[1, cache.a2.len()]);
    for i in 0..k {
        let mut d_raw = [0.0; 6];
        for j in 0..6 {
            let pass = if cache.raw[i][j].abs() <= 1.0 { 1.0 } else { 0.0 };
            d_raw[j] = upstream[i][j] * pass * mask[j];
        }
        let up = Tensor::from_vec(&[1, 6], d_raw.to_vec())?;
        let d_in = fc_backward_acc(
            &cache.a2,
            &params.head_w[i],
            &up,
            &mut grads.head_w[i],
            &mut grads.head_b[i],
        )?;
        d_a2.add_assign(&d_in)?;
    }

    let d_z2 = relu_backward(&cache.z2, &d_a2)?;
    let d_a1 = fc_backward_acc(&cache.a1, &params.w2, &d_z2, &mut grads.w2, &mut grads.b2)?;
    let d_z1 = relu_backward(&cache.z1, &d_a1)?;
    let d_flat = fc_backward_acc(
        &cache.summary,
        &params.w1,
        &d_z1,
        &mut grads.w1,
        &mut grads.b1,
    )?;
    d_flat.reshaped(&[cache.summary.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::freeze_mask;

    fn default_params(input_dim: usize, seed: u64) -> (RsnConfig, RsnParams) {
        let cfg = RsnConfig {
            num_regions: 4,
            hidden: 16,
            summary_grid: 2,
            mode: RsnMode::Full,
        };
        let mut rng = SplitMix64::new(seed);
        let params = RsnParams::init(&cfg, input_dim, &mut rng).unwrap();
        (cfg, params)
    }

    #[test]
    fn summarize_constant_map_gives_constant() {
        let features = Tensor::filled(&[3, 8, 8], 2.5);
        let roi = RegionOfInterest::new(10.0, 12.0, 30.0, 25.0);
        let (summary, _) = summarize_roi(&features, &roi, 8.0, 4).unwrap();
        assert_eq!(summary.len(), 3 * 16);
        for &v in summary.data() {
            assert!((v - 2.5).abs() <= 1e-12);
        }
    }

    #[test]
    fn summarize_exact_window_copy() {
        // RoI spanning a 3x3 cell window, cell-center aligned, S = 3:
        // samples land exactly on the lattice and copy the window.
        let mut features = Tensor::zeros(&[1, 6, 6]);
        for i in 0..36 {
            features.data_mut()[i] = i as f64;
        }
        let stride = 2.0;
        let roi = RegionOfInterest::new(
            (1.0 - 0.5) * stride,
            (2.0 - 0.5) * stride,
            3.0 * stride,
            3.0 * stride,
        );
        let (summary, _) = summarize_roi(&features, &roi, stride, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = features.at3(0, 2 + i, 1 + j);
                assert!((summary.data()[i * 3 + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn summarize_matches_pointwise_bilinear_oracle() {
        let mut rng = SplitMix64::new(40);
        let mut features = Tensor::zeros(&[2, 7, 7]);
        rng.fill_uniform(features.data_mut(), -1.0, 1.0);
        let roi = RegionOfInterest::new(3.0, 5.0, 17.0, 11.0);
        let stride = 3.0;
        let s = 4;
        let (summary, grid) = summarize_roi(&features, &roi, stride, s).unwrap();
        for c in 0..2 {
            for p in 0..grid.len() {
                let (x, y) = (grid.x_s[p], grid.y_s[p]);
                let mut want = 0.0;
                for n in 0..7 {
                    for m in 0..7 {
                        let wy = (1.0 - (y - n as f64).abs()).max(0.0);
                        let wx = (1.0 - (x - m as f64).abs()).max(0.0);
                        want += features.at3(c, n, m) * wy * wx;
                    }
                }
                assert!((summary.data()[c * grid.len() + p] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_roi_clamps_to_one_cell() {
        let features = Tensor::filled(&[1, 8, 8], 1.0);
        let roi = RegionOfInterest::new(16.0, 16.0, 0.5, 0.5);
        let out = summarize_roi(&features, &roi, 8.0, 4);
        assert!(out.is_ok());
    }

    #[test]
    fn initialization_fixed_point_outputs_cell_grid() {
        let (cfg, mut params) = default_params(8, 1);
        // zero the trunk so the heads see a zero input regardless
        params.w1 = params.w1.zeros_like();
        params.w2 = params.w2.zeros_like();
        let summary = Tensor::filled(&[8], 0.3);
        let (thetas, _) = rsn_forward(&summary, &params).unwrap();
        let side = cfg.grid_side().unwrap();
        for row in 0..side {
            for col in 0..side {
                let want = cell_init(side, row, col).unwrap();
                assert_eq!(thetas[row * side + col], want);
            }
        }
    }

    #[test]
    fn outputs_always_clamped() {
        let (_, mut params) = default_params(8, 2);
        // blow up one head weight column to force saturation
        for v in params.head_w[0].data_mut().iter_mut() {
            *v = 3.0;
        }
        let summary = Tensor::filled(&[8], 1.0);
        let (thetas, _) = rsn_forward(&summary, &params).unwrap();
        for t in &thetas {
            assert!(t.in_range());
        }
    }

    #[test]
    fn forward_matches_layer_by_layer_oracle() {
        let (_, mut params) = default_params(8, 3);
        let mut rng = SplitMix64::new(9);
        for w in params.head_w.iter_mut() {
            rng.fill_uniform(w.data_mut(), -0.3, 0.3);
        }
        let mut summary = Tensor::zeros(&[8]);
        rng.fill_uniform(summary.data_mut(), -1.0, 1.0);
        let (thetas, _) = rsn_forward(&summary, &params).unwrap();

        // oracle: compose public fc/relu ops directly
        let flat = Tensor::from_vec(&[1, 8], summary.data().to_vec()).unwrap();
        let a1 = relu_forward(&fc_forward(&flat, &params.w1, &params.b1).unwrap());
        let a2 = relu_forward(&fc_forward(&a1, &params.w2, &params.b2).unwrap());
        for k in 0..4 {
            let raw = fc_forward(&a2, &params.head_w[k], &params.head_b[k]).unwrap();
            for j in 0..6 {
                let want = raw.data()[j].clamp(-1.0, 1.0);
                assert!((thetas[k].theta[j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let (_, params) = default_params(8, 4);
        let summary = Tensor::filled(&[8], 0.5);
        let (_, cache) = rsn_forward(&summary, &params).unwrap();
        let upstream = vec![[0.0; 6]; 4];
        let g = rsn_backward(&params, &cache, &upstream, &[1.0; 6]).unwrap();
        assert_eq!(g.wrt_input.max_abs(), 0.0);
        for t in &g.wrt_params {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn saturated_component_gets_zero_gradient() {
        let (_, mut params) = default_params(8, 5);
        // push head 0, component 2 beyond the clamp
        params.head_b[0].data_mut()[2] = 5.0;
        let summary = Tensor::filled(&[8], 0.25);
        let (thetas, cache) = rsn_forward(&summary, &params).unwrap();
        assert_eq!(thetas[0].theta[2], 1.0);
        let mut upstream = vec![[0.0; 6]; 4];
        upstream[0] = [1.0; 6];
        let g = rsn_backward(&params, &cache, &upstream, &[1.0; 6]).unwrap();
        // head bias gradient: component 2 frozen by the clamp
        let head_b0 = &g.wrt_params[4 + 4]; // [w1,b1,w2,b2, head_w x4, head_b0]
        assert_eq!(head_b0.data()[2], 0.0);
        assert_ne!(head_b0.data()[3], 0.0);
    }

    #[test]
    fn offset_only_mask_zeroes_scale_gradients() {
        let (_, params) = default_params(8, 6);
        let summary = Tensor::filled(&[8], 0.25);
        let (_, cache) = rsn_forward(&summary, &params).unwrap();
        let upstream = vec![[1.0; 6]; 4];
        let mask = freeze_mask(RsnMode::OffsetOnly);
        let g = rsn_backward(&params, &cache, &upstream, &mask).unwrap();
        for k in 0..4 {
            let head_b = &g.wrt_params[4 + 4 + k];
            for j in [0usize, 1, 3, 4] {
                assert_eq!(head_b.data()[j], 0.0);
            }
            let head_w = &g.wrt_params[4 + k];
            for row in 0..16 {
                for j in [0usize, 1, 3, 4] {
                    assert_eq!(head_w.at2(row, j), 0.0);
                }
            }
        }
    }
}
