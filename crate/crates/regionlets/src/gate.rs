//! Soft regionlet selection (an FC + sigmoid gate multiplied into the warped
//! features) and the regionlet pool that compacts each region's H x W grid.

use crate::layers::{
    fc_backward_acc, fc_forward, sigmoid_backward, sigmoid_forward, LayerGradients,
};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateGranularity {
    /// One gate per element of V (C*H*W outputs).
    PerElement,
    /// One gate per regionlet (H*W outputs, broadcast across channels).
    PerRegionlet,
}

impl GateGranularity {
    pub fn parse(s: &str) -> Result<GateGranularity> {
        match s {
            "per-element" => Ok(GateGranularity::PerElement),
            "per-regionlet" => Ok(GateGranularity::PerRegionlet),
            other => Err(Error::invalid(format!(
                "unknown gate granularity `{other}` (expected per-element|per-regionlet)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GateGranularity::PerElement => "per-element",
            GateGranularity::PerRegionlet => "per-regionlet",
        }
    }

    pub fn gate_count(&self, c: usize, h: usize, w: usize) -> usize {
        match self {
            GateGranularity::PerElement => c * h * w,
            GateGranularity::PerRegionlet => h * w,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateConfig {
    pub enabled: bool,
    pub granularity: GateGranularity,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            enabled: true,
            granularity: GateGranularity::PerElement,
        }
    }
}

/// Gate parameters: a single FC layer from flattened V to the gate count.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct GateCache {
    pub input: Tensor,
    pub gates: Tensor,
    granularity: GateGranularity,
    v_shape: Vec<usize>,
}

/// gates = sigmoid(FC(flatten(V))); gated = V * gates (broadcast across
/// channels in per-regionlet mode). Gates are always inside (0,1).
pub fn gate_forward(
    v: &Tensor,
    params: &GateParams,
    granularity: GateGranularity,
) -> Result<(Tensor, GateCache)> {
    let s = v.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("gate input must be [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let n_in = c * h * w;
    let n_gates = granularity.gate_count(c, h, w);
    params.weights.check_shape(&[n_in, n_gates])?;
    params.bias.check_shape(&[n_gates])?;

    let flat = Tensor::from_vec(&[1, n_in], v.data().to_vec())?;
    let z = fc_forward(&flat, &params.weights, &params.bias)?;
    let gates = sigmoid_forward(&z);

    let mut gated = v.clone();
    apply_gates(gated.data_mut(), gates.data(), granularity, c, h * w);
    let cache = GateCache {
        input: flat,
        gates,
        granularity,
        v_shape: s.to_vec(),
    };
    Ok((gated, cache))
}

fn apply_gates(v: &mut [f64], gates: &[f64], granularity: GateGranularity, c: usize, hw: usize) {
    match granularity {
        GateGranularity::PerElement => {
            for (x, &g) in v.iter_mut().zip(gates) {
                *x *= g;
            }
        }
        GateGranularity::PerRegionlet => {
            for ch in 0..c {
                for p in 0..hw {
                    v[ch * hw + p] *= gates[p];
                }
            }
        }
    }
}

/// Product rule through the gate graph; V feeds both the FC input and the
/// elementwise product, so the gradient w.r.t. V has two paths.
pub fn gate_backward(
    params: &GateParams,
    cache: &GateCache,
    upstream: &Tensor,
) -> Result<LayerGradients> {
    let mut d_weights = params.weights.zeros_like();
    let mut d_bias = params.bias.zeros_like();
    let wrt_v = gate_backward_acc(params, cache, upstream, &mut d_weights, &mut d_bias)?;
    Ok(LayerGradients {
        wrt_input: wrt_v,
        wrt_params: vec![d_weights, d_bias],
    })
}

/// [`gate_backward`] accumulating parameter gradients in place.
pub(crate) fn gate_backward_acc(
    params: &GateParams,
    cache: &GateCache,
    upstream: &Tensor,
    d_weights: &mut Tensor,
    d_bias: &mut Tensor,
) -> Result<Tensor> {
    upstream.check_shape(&cache.v_shape)?;
    let (c, h, w) = (cache.v_shape[0], cache.v_shape[1], cache.v_shape[2]);
    let hw = h * w;
    let n_gates = cache.gates.len();
    let v = cache.input.data();
    let gates = cache.gates.data();
    let up = upstream.data();

    // direct path: d gated / d V = gates
    let mut wrt_v = upstream.clone();
    apply_gates(wrt_v.data_mut(), gates, cache.granularity, c, hw);

    // gate path: d L / d gates
    let mut d_gates = Tensor::zeros(&[1, n_gates]);
    match cache.granularity {
        GateGranularity::PerElement => {
            for (dg, (&u, &x)) in d_gates.data_mut().iter_mut().zip(up.iter().zip(v)) {
                *dg = u * x;
            }
        }
        GateGranularity::PerRegionlet => {
            let dg = d_gates.data_mut();
            for ch in 0..c {
                for p in 0..hw {
                    dg[p] += up[ch * hw + p] * v[ch * hw + p];
                }
            }
        }
    }
    let d_z = sigmoid_backward(&cache.gates, &d_gates)?;
    let d_flat = fc_backward_acc(&cache.input, &params.weights, &d_z, d_weights, d_bias)?;
    for (out, &dv) in wrt_v.data_mut().iter_mut().zip(d_flat.data()) {
        *out += dv;
    }
    Ok(wrt_v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

impl PoolMode {
    pub fn parse(s: &str) -> Result<PoolMode> {
        match s {
            "max" => Ok(PoolMode::Max),
            "average" | "ave" => Ok(PoolMode::Average),
            other => Err(Error::invalid(format!(
                "unknown pool mode `{other}` (expected max|average)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::Average => "average",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoolConfig {
    pub mode: PoolMode,
    pub out_h: usize,
    pub out_w: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        // average keeps every regionlet on the gradient path, which feeds
        // the affine-parameter updates; max is available via `pool.mode`
        PoolConfig {
            mode: PoolMode::Average,
            out_h: 1,
            out_w: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    /// Flat argmax index per output element (max mode only).
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

/// Non-overlapping window max/average over equal partitions of H x W.
/// Ties in max mode go to the first index in row-major scan order.
pub fn regionlet_pool_forward(x: &Tensor, cfg: &PoolConfig) -> Result<(Tensor, PoolCache)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!("pool input must be [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if cfg.out_h == 0
        || cfg.out_w == 0
        || cfg.out_h > h
        || cfg.out_w > w
        || h % cfg.out_h != 0
        || w % cfg.out_w != 0
    {
        return Err(Error::invalid(format!(
            "pool output {}x{} does not evenly partition {h}x{w}",
            cfg.out_h, cfg.out_w
        )));
    }
    let (bh, bw) = (h / cfg.out_h, w / cfg.out_w);
    let mut out = Tensor::zeros(&[c, cfg.out_h, cfg.out_w]);
    let mut argmax = Vec::new();
    if cfg.mode == PoolMode::Max {
        argmax.resize(c * cfg.out_h * cfg.out_w, 0);
    }
    let src = x.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for oy in 0..cfg.out_h {
            for ox in 0..cfg.out_w {
                let oi = (ch * cfg.out_h + oy) * cfg.out_w + ox;
                match cfg.mode {
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for iy in oy * bh..(oy + 1) * bh {
                            for ix in ox * bw..(ox + 1) * bw {
                                let idx = (ch * h + iy) * w + ix;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        dst[oi] = best;
                        argmax[oi] = best_idx;
                    }
                    PoolMode::Average => {
                        let mut acc = 0.0;
                        for iy in oy * bh..(oy + 1) * bh {
                            for ix in ox * bw..(ox + 1) * bw {
                                acc += src[(ch * h + iy) * w + ix];
                            }
                        }
                        dst[oi] = acc / (bh * bw) as f64;
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            argmax,
            in_shape: s.to_vec(),
        },
    ))
}

pub fn regionlet_pool_backward(
    cache: &PoolCache,
    cfg: &PoolConfig,
    upstream: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = (cache.in_shape[0], cache.in_shape[1], cache.in_shape[2]);
    upstream.check_shape(&[c, cfg.out_h, cfg.out_w])?;
    let mut d_input = Tensor::zeros(&cache.in_shape);
    let (bh, bw) = (h / cfg.out_h, w / cfg.out_w);
    let up = upstream.data();
    let dst = d_input.data_mut();
    match cfg.mode {
        PoolMode::Max => {
            for (oi, &g) in up.iter().enumerate() {
                dst[cache.argmax[oi]] += g;
            }
        }
        PoolMode::Average => {
            let scale = 1.0 / (bh * bw) as f64;
            for ch in 0..c {
                for oy in 0..cfg.out_h {
                    for ox in 0..cfg.out_w {
                        let g = up[(ch * cfg.out_h + oy) * cfg.out_w + ox] * scale;
                        for iy in oy * bh..(oy + 1) * bh {
                            for ix in ox * bw..(ox + 1) * bw {
                                dst[(ch * h + iy) * w + ix] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(d_input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::fc_forward;
    use crate::rng::SplitMix64;

    fn random_tensor(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        rng.fill_uniform(t.data_mut(), -1.0, 1.0);
        t
    }

    fn zero_gate(c: usize, h: usize, w: usize, g: GateGranularity) -> GateParams {
        GateParams {
            weights: Tensor::zeros(&[c * h * w, g.gate_count(c, h, w)]),
            bias: Tensor::zeros(&[g.gate_count(c, h, w)]),
        }
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let mut rng = SplitMix64::new(4);
        let v = random_tensor(&[2, 2, 2], &mut rng);
        let params = zero_gate(2, 2, 2, GateGranularity::PerElement);
        let (gated, cache) = gate_forward(&v, &params, GateGranularity::PerElement).unwrap();
        for (&g, &x) in cache.gates.data().iter().zip(v.data()) {
            assert_eq!(g, 0.5);
            let _ = x;
        }
        for (&y, &x) in gated.data().iter().zip(v.data()) {
            assert!((y - 0.5 * x).abs() <= 1e-15);
        }
    }

    #[test]
    fn saturated_bias_passes_input_through() {
        let mut rng = SplitMix64::new(5);
        let v = random_tensor(&[2, 2, 2], &mut rng);
        let mut params = zero_gate(2, 2, 2, GateGranularity::PerElement);
        for b in params.bias.data_mut() {
            *b = 50.0;
        }
        let (gated, cache) = gate_forward(&v, &params, GateGranularity::PerElement).unwrap();
        for (&y, &x) in gated.data().iter().zip(v.data()) {
            assert!((y - x).abs() <= 1e-12);
        }
        for &g in cache.gates.data() {
            assert!(g > 0.0 && g <= 1.0);
        }
    }

    #[test]
    fn matches_fc_sigmoid_product_composition() {
        let mut rng = SplitMix64::new(6);
        let v = random_tensor(&[2, 3, 2], &mut rng);
        let n = 12;
        let params = GateParams {
            weights: random_tensor(&[n, n], &mut rng),
            bias: random_tensor(&[n], &mut rng),
        };
        let (gated, _) = gate_forward(&v, &params, GateGranularity::PerElement).unwrap();
        // oracle: explicit fc -> sigmoid -> product composition
        let flat = Tensor::from_vec(&[1, n], v.data().to_vec()).unwrap();
        let z = fc_forward(&flat, &params.weights, &params.bias).unwrap();
        for (i, (&y, &x)) in gated.data().iter().zip(v.data()).enumerate() {
            let g = 1.0 / (1.0 + (-z.data()[i]).exp());
            assert!((y - x * g).abs() <= 1e-12);
        }
    }

    #[test]
    fn per_regionlet_broadcasts_across_channels() {
        let mut rng = SplitMix64::new(7);
        let v = random_tensor(&[3, 2, 2], &mut rng);
        let params = GateParams {
            weights: random_tensor(&[12, 4], &mut rng),
            bias: random_tensor(&[4], &mut rng),
        };
        let (gated, cache) = gate_forward(&v, &params, GateGranularity::PerRegionlet).unwrap();
        assert_eq!(cache.gates.len(), 4);
        for ch in 0..3 {
            for p in 0..4 {
                let want = v.data()[ch * 4 + p] * cache.gates.data()[p];
                assert!((gated.data()[ch * 4 + p] - want).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zeros() {
        let mut rng = SplitMix64::new(8);
        let v = random_tensor(&[2, 2, 2], &mut rng);
        let params = GateParams {
            weights: random_tensor(&[8, 8], &mut rng),
            bias: random_tensor(&[8], &mut rng),
        };
        let (_, cache) = gate_forward(&v, &params, GateGranularity::PerElement).unwrap();
        let up = Tensor::zeros(&[2, 2, 2]);
        let g = gate_backward(&params, &cache, &up).unwrap();
        assert_eq!(g.wrt_input.max_abs(), 0.0);
        assert_eq!(g.wrt_params[0].max_abs(), 0.0);
    }

    #[test]
    fn saturated_gate_passes_upstream_to_v() {
        let mut rng = SplitMix64::new(9);
        let v = random_tensor(&[2, 2, 2], &mut rng);
        let mut params = zero_gate(2, 2, 2, GateGranularity::PerElement);
        for b in params.bias.data_mut() {
            *b = 50.0;
        }
        let (_, cache) = gate_forward(&v, &params, GateGranularity::PerElement).unwrap();
        let up = random_tensor(&[2, 2, 2], &mut rng);
        let g = gate_backward(&params, &cache, &up).unwrap();
        for (&got, &u) in g.wrt_input.data().iter().zip(up.data()) {
            assert!((got - u).abs() <= 1e-12);
        }
    }

    #[test]
    fn max_pool_examples() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 4.0, 3.0]).unwrap();
        let (out, _) = regionlet_pool_forward(
            &x,
            &PoolConfig {
                mode: PoolMode::Max,
                out_h: 1,
                out_w: 1,
            },
        )
        .unwrap();
        assert_eq!(out.data(), &[4.0]);
        let (out, _) = regionlet_pool_forward(
            &x,
            &PoolConfig {
                mode: PoolMode::Average,
                out_h: 1,
                out_w: 1,
            },
        )
        .unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn pool_matches_window_scan_oracle() {
        let mut rng = SplitMix64::new(10);
        let x = random_tensor(&[2, 4, 4], &mut rng);
        let cfg = PoolConfig {
            mode: PoolMode::Max,
            out_h: 2,
            out_w: 2,
        };
        let (out, _) = regionlet_pool_forward(&x, &cfg).unwrap();
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut want = f64::NEG_INFINITY;
                    for iy in oy * 2..oy * 2 + 2 {
                        for ix in ox * 2..ox * 2 + 2 {
                            want = want.max(x.at3(c, iy, ix));
                        }
                    }
                    assert_eq!(out.at3(c, oy, ox), want);
                }
            }
        }
    }

    #[test]
    fn pool_bounds_within_window() {
        let mut rng = SplitMix64::new(11);
        let x = random_tensor(&[1, 4, 4], &mut rng);
        for mode in [PoolMode::Max, PoolMode::Average] {
            let cfg = PoolConfig {
                mode,
                out_h: 2,
                out_w: 2,
            };
            let (out, _) = regionlet_pool_forward(&x, &cfg).unwrap();
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for iy in oy * 2..oy * 2 + 2 {
                        for ix in ox * 2..ox * 2 + 2 {
                            lo = lo.min(x.at3(0, iy, ix));
                            hi = hi.max(x.at3(0, iy, ix));
                        }
                    }
                    let v = out.at3(0, oy, ox);
                    assert!(v >= lo && v <= hi);
                }
            }
        }
    }

    #[test]
    fn max_tie_break_takes_first_row_major() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![3.0, 1.0, 3.0, 2.0]).unwrap();
        let cfg = PoolConfig {
            mode: PoolMode::Max,
            out_h: 1,
            out_w: 1,
        };
        let (_, cache) = regionlet_pool_forward(&x, &cfg).unwrap();
        let up = Tensor::filled(&[1, 1, 1], 1.0);
        let g = regionlet_pool_backward(&cache, &cfg, &up).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_backward_is_one_hot_per_window() {
        let mut rng = SplitMix64::new(12);
        let x = random_tensor(&[1, 4, 4], &mut rng);
        let cfg = PoolConfig {
            mode: PoolMode::Max,
            out_h: 2,
            out_w: 2,
        };
        let (_, cache) = regionlet_pool_forward(&x, &cfg).unwrap();
        let up = Tensor::filled(&[1, 2, 2], 1.0);
        let g = regionlet_pool_backward(&cache, &cfg, &up).unwrap();
        let nonzero = g.data().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn average_backward_distributes_uniformly() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let cfg = PoolConfig {
            mode: PoolMode::Average,
            out_h: 1,
            out_w: 1,
        };
        let (_, cache) = regionlet_pool_forward(&x, &cfg).unwrap();
        let up = Tensor::filled(&[1, 1, 1], 1.0);
        let g = regionlet_pool_backward(&cache, &cfg, &up).unwrap();
        assert_eq!(g.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn invalid_partition_rejected() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let cfg = PoolConfig {
            mode: PoolMode::Max,
            out_h: 3,
            out_w: 1,
        };
        assert!(regionlet_pool_forward(&x, &cfg).is_err());
    }
}
