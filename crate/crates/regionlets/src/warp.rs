//! Bilinear regionlet warping: generate a sample grid inside a selected
//! region via the affine map, sample the feature map with the hat kernel
//! max(0, 1-|d|), and propagate gradients analytically both into the feature
//! map and into all six affine parameters.
//!
//! Feature-map value U[c,n,m] sits at continuous coordinate (m, n); a sample
//! exactly on the lattice reproduces the stored value. Out-of-bounds
//! neighbors contribute zero.

use crate::region::{AffineParams, RegionOfInterest};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Target-space coordinates in [-1,1] and the matching source coordinates in
/// feature-map pixel units for each of the H*W regionlets (row-major, point
/// p = i*W + j).
#[derive(Clone, Debug)]
pub struct SampleGrid {
    pub h: usize,
    pub w: usize,
    pub x_t: Vec<f64>,
    pub y_t: Vec<f64>,
    pub x_s: Vec<f64>,
    pub y_s: Vec<f64>,
}

impl SampleGrid {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.x_s.iter().chain(&self.y_s).all(|v| v.is_finite())
    }

    /// Smallest distance from any source coordinate to the integer lattice;
    /// used by gradient checks to exclude hat-kernel kinks.
    pub fn min_lattice_distance(&self) -> f64 {
        self.x_s
            .iter()
            .chain(&self.y_s)
            .map(|&v| (v - v.round()).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Warped output values of one region plus the grid needed for backward.
#[derive(Clone, Debug)]
pub struct WarpedRegionlets {
    pub values: Tensor,
    pub grid: SampleGrid,
}

/// Builds the H x W sample grid for one region. Target coordinates are cell
/// centers x_t(j) = -1 + (2j+1)/W, y_t(i) = -1 + (2i+1)/H. The affine map
/// gives region-normalized coordinates
///   x_n = t1 x_t + t2 y_t + t3,   y_n = t4 x_t + t5 y_t + t6,
/// which denormalize into feature-map pixels through the RoI and stride:
///   x_s = (w0 + (x_n+1)/2 * w) / stride,
///   y_s = (h0 + (y_n+1)/2 * h) / stride.
pub fn grid_generate(
    theta: &AffineParams,
    roi: &RegionOfInterest,
    h: usize,
    w: usize,
    stride: f64,
) -> SampleGrid {
    let t = &theta.theta;
    let n = h * w;
    let mut grid = SampleGrid {
        h,
        w,
        x_t: Vec::with_capacity(n),
        y_t: Vec::with_capacity(n),
        x_s: Vec::with_capacity(n),
        y_s: Vec::with_capacity(n),
    };
    for i in 0..h {
        let y_t = -1.0 + (2.0 * i as f64 + 1.0) / h as f64;
        for j in 0..w {
            let x_t = -1.0 + (2.0 * j as f64 + 1.0) / w as f64;
            let x_n = t[0] * x_t + t[1] * y_t + t[2];
            let y_n = t[3] * x_t + t[4] * y_t + t[5];
            grid.x_t.push(x_t);
            grid.y_t.push(y_t);
            grid.x_s.push((roi.w0 + 0.5 * (x_n + 1.0) * roi.w) / stride);
            grid.y_s.push((roi.h0 + 0.5 * (y_n + 1.0) * roi.h) / stride);
        }
    }
    grid
}

#[inline]
fn neighbors(v: f64) -> (isize, f64) {
    let lo = v.floor();
    (lo as isize, v - lo)
}

/// V[c,i,j] = sum_{n,m} U[c,n,m] max(0, 1-|x_s - m|) max(0, 1-|y_s - n|),
/// restricted to the at-most-four contributing integer neighbors.
pub fn warp_forward(u: &Tensor, grid: &SampleGrid) -> Result<Tensor> {
    let (c, hf, wf) = feature_dims(u)?;
    if !grid.is_finite() {
        return Err(Error::non_finite("sample grid"));
    }
    let mut out = Tensor::zeros(&[c, grid.h, grid.w]);
    let npts = grid.len();
    let src = u.data();
    let dst = out.data_mut();
    for p in 0..npts {
        let (m0, fx) = neighbors(grid.x_s[p]);
        let (n0, fy) = neighbors(grid.y_s[p]);
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        for ch in 0..c {
            let base = ch * hf * wf;
            let mut acc = 0.0;
            for (dy, &wyv) in wy.iter().enumerate() {
                let n = n0 + dy as isize;
                if n < 0 || n >= hf as isize || wyv == 0.0 {
                    continue;
                }
                for (dx, &wxv) in wx.iter().enumerate() {
                    let m = m0 + dx as isize;
                    if m < 0 || m >= wf as isize || wxv == 0.0 {
                        continue;
                    }
                    acc += src[base + n as usize * wf + m as usize] * wyv * wxv;
                }
            }
            dst[ch * npts + p] = acc;
        }
    }
    Ok(out)
}

pub fn warp_region(
    u: &Tensor,
    theta: &AffineParams,
    roi: &RegionOfInterest,
    h: usize,
    w: usize,
    stride: f64,
) -> Result<WarpedRegionlets> {
    let grid = grid_generate(theta, roi, h, w, stride);
    let values = warp_forward(u, &grid)?;
    Ok(WarpedRegionlets { values, grid })
}

/// Gradient w.r.t. the feature map: scatter-add of the kernel weights over
/// the grid points, in fixed channel-then-point order.
pub fn warp_backward_input(
    upstream: &Tensor,
    grid: &SampleGrid,
    input_shape: &[usize],
) -> Result<Tensor> {
    if input_shape.len() != 3 {
        return Err(Error::invalid(format!(
            "input shape must be rank 3, got {input_shape:?}"
        )));
    }
    let (c, hf, wf) = (input_shape[0], input_shape[1], input_shape[2]);
    upstream.check_shape(&[c, grid.h, grid.w])?;
    let mut d_input = Tensor::zeros(input_shape);
    let npts = grid.len();
    let up = upstream.data();
    let dst = d_input.data_mut();
    for ch in 0..c {
        let base = ch * hf * wf;
        for p in 0..npts {
            let g = up[ch * npts + p];
            if g == 0.0 {
                continue;
            }
            let (m0, fx) = neighbors(grid.x_s[p]);
            let (n0, fy) = neighbors(grid.y_s[p]);
            let wx = [1.0 - fx, fx];
            let wy = [1.0 - fy, fy];
            for (dy, &wyv) in wy.iter().enumerate() {
                let n = n0 + dy as isize;
                if n < 0 || n >= hf as isize || wyv == 0.0 {
                    continue;
                }
                for (dx, &wxv) in wx.iter().enumerate() {
                    let m = m0 + dx as isize;
                    if m < 0 || m >= wf as isize || wxv == 0.0 {
                        continue;
                    }
                    dst[base + n as usize * wf + m as usize] += g * wyv * wxv;
                }
            }
        }
    }
    Ok(d_input)
}

/// d kernel / d coordinate: 0 outside the unit support and at the peak and
/// edges (the measure-zero boundary takes the 0 branch), +1 when the lattice
/// site lies above the sample coordinate, -1 below.
#[inline]
fn hat_slope(site: f64, coord: f64) -> f64 {
    let d = site - coord;
    if d.abs() >= 1.0 || d == 0.0 {
        0.0
    } else if d > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Gradient w.r.t. the six affine parameters: for each grid point,
/// dV/dx_s uses the sign-case kernel derivative, then chains through the
/// denormalization (dx_s/dx_n = w / (2 stride)) and the affine map
/// (dx_n/dt1 = x_t, dx_n/dt2 = y_t, dx_n/dt3 = 1; t4..t6 via y_n).
pub fn warp_backward_theta(
    upstream: &Tensor,
    grid: &SampleGrid,
    u: &Tensor,
    roi: &RegionOfInterest,
    stride: f64,
) -> Result<[f64; 6]> {
    let (c, hf, wf) = feature_dims(u)?;
    upstream.check_shape(&[c, grid.h, grid.w])?;
    let npts = grid.len();
    let src = u.data();
    let up = upstream.data();
    let dxs_dxn = 0.5 * roi.w / stride;
    let dys_dyn = 0.5 * roi.h / stride;
    let mut d_theta = [0.0; 6];
    for p in 0..npts {
        let xs = grid.x_s[p];
        let ys = grid.y_s[p];
        let (m0, fx) = neighbors(xs);
        let (n0, fy) = neighbors(ys);
        let wx = [1.0 - fx, fx];
        let wy = [1.0 - fy, fy];
        // dL/dx_s and dL/dy_s accumulated over channels
        let mut dl_dxs = 0.0;
        let mut dl_dys = 0.0;
        for ch in 0..c {
            let base = ch * hf * wf;
            let g = up[ch * npts + p];
            if g == 0.0 {
                continue;
            }
            let mut dv_dxs = 0.0;
            let mut dv_dys = 0.0;
            for dy in 0..2usize {
                let n = n0 + dy as isize;
                if n < 0 || n >= hf as isize {
                    continue;
                }
                for dx in 0..2usize {
                    let m = m0 + dx as isize;
                    if m < 0 || m >= wf as isize {
                        continue;
                    }
                    let uv = src[base + n as usize * wf + m as usize];
                    dv_dxs += uv * wy[dy] * hat_slope(m as f64, xs);
                    dv_dys += uv * wx[dx] * hat_slope(n as f64, ys);
                }
            }
            dl_dxs += g * dv_dxs;
            dl_dys += g * dv_dys;
        }
        let dl_dxn = dl_dxs * dxs_dxn;
        let dl_dyn = dl_dys * dys_dyn;
        d_theta[0] += dl_dxn * grid.x_t[p];
        d_theta[1] += dl_dxn * grid.y_t[p];
        d_theta[2] += dl_dxn;
        d_theta[3] += dl_dyn * grid.x_t[p];
        d_theta[4] += dl_dyn * grid.y_t[p];
        d_theta[5] += dl_dyn;
    }
    Ok(d_theta)
}

fn feature_dims(u: &Tensor) -> Result<(usize, usize, usize)> {
    let s = u.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!(
            "feature map must be [C,H,W], got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}
