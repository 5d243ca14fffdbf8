//! Detection-window proposals and normalized affine region parameters,
//! plus the non-overlapping cell-grid initialization for the region
//! selection network.

use crate::{Error, Result};

/// A detection-window proposal in image pixel coordinates: top-left corner
/// (w0, h0), width w and height h.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionOfInterest {
    pub w0: f64,
    pub h0: f64,
    pub w: f64,
    pub h: f64,
}

impl RegionOfInterest {
    pub fn new(w0: f64, h0: f64, w: f64, h: f64) -> RegionOfInterest {
        RegionOfInterest { w0, h0, w, h }
    }

    /// From corner coordinates (x1, y1, x2, y2).
    pub fn from_corners(b: [f64; 4]) -> RegionOfInterest {
        RegionOfInterest {
            w0: b[0],
            h0: b[1],
            w: b[2] - b[0],
            h: b[3] - b[1],
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.w0, self.h0, self.w0 + self.w, self.h0 + self.h]
    }

    pub fn center(&self) -> (f64, f64) {
        (self.w0 + 0.5 * self.w, self.h0 + 0.5 * self.h)
    }

    /// Clamps the box into [0, img_w] x [0, img_h] keeping a minimal extent.
    pub fn clamped_to(&self, img_w: f64, img_h: f64, min_extent: f64) -> RegionOfInterest {
        let x1 = self.w0.max(0.0).min(img_w - min_extent);
        let y1 = self.h0.max(0.0).min(img_h - min_extent);
        let x2 = (self.w0 + self.w).min(img_w).max(x1 + min_extent);
        let y2 = (self.h0 + self.h).min(img_h).max(y1 + min_extent);
        RegionOfInterest::from_corners([x1, y1, x2, y2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.w > 0.0 && self.h > 0.0 && self.w0.is_finite() && self.h0.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate RoI {self:?}")))
        }
    }
}

/// Six normalized affine values [t1, t2, t3; t4, t5, t6] mapping target grid
/// coordinates to region-normalized source coordinates; each value lives in
/// [-1, 1] after the clamp stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub theta: [f64; 6],
}

impl AffineParams {
    pub fn new(theta: [f64; 6]) -> AffineParams {
        AffineParams { theta }
    }

    pub fn identity() -> AffineParams {
        AffineParams {
            theta: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// Hard clamp of raw network outputs into [-1, 1].
    pub fn clamped(raw: [f64; 6]) -> AffineParams {
        let mut theta = raw;
        for t in theta.iter_mut() {
            *t = t.clamp(-1.0, 1.0);
        }
        AffineParams { theta }
    }

    pub fn in_range(&self) -> bool {
        self.theta.iter().all(|t| (-1.0..=1.0).contains(t))
    }
}

/// Affine parameters for cell (row, col) of an n x n non-overlapping grid
/// over the detection box: scale 1/n on both axes, translation placing the
/// cell centers so the n^2 cells tile [-1,1]^2 exactly.
///
/// Normalized y increases downward here, so the top-left cell gets
/// ty = -(n-1)/n; the published example value for that cell uses the
/// opposite vertical sign convention but the same magnitudes.
pub fn cell_init(grid_n: usize, row: usize, col: usize) -> Result<AffineParams> {
    if grid_n == 0 {
        return Err(Error::invalid("cell grid must have n >= 1"));
    }
    if row >= grid_n || col >= grid_n {
        return Err(Error::invalid(format!(
            "cell ({row},{col}) out of range for {grid_n}x{grid_n} grid"
        )));
    }
    let n = grid_n as f64;
    let tx = (2.0 * col as f64 + 1.0) / n - 1.0;
    let ty = (2.0 * row as f64 + 1.0) / n - 1.0;
    Ok(AffineParams {
        theta: [1.0 / n, 0.0, tx, 0.0, 1.0 / n, ty],
    })
}

/// Ablation modes for the region selection network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RsnMode {
    /// All six affine parameters learn.
    Full,
    /// Only the offsets t3, t6 learn; scale/rotation stay at initialization.
    OffsetOnly,
    /// A single region initialized to the identity transform.
    Global,
}

impl RsnMode {
    pub fn parse(s: &str) -> Result<RsnMode> {
        match s {
            "full" => Ok(RsnMode::Full),
            "offset-only" => Ok(RsnMode::OffsetOnly),
            "global" => Ok(RsnMode::Global),
            other => Err(Error::invalid(format!(
                "unknown rsn mode `{other}` (expected full|offset-only|global)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RsnMode::Full => "full",
            RsnMode::OffsetOnly => "offset-only",
            RsnMode::Global => "global",
        }
    }
}

/// 0/1 mask over the six affine parameters: gradients are multiplied by the
/// mask, so zero entries freeze their parameter at initialization.
pub fn freeze_mask(mode: RsnMode) -> [f64; 6] {
    match mode {
        RsnMode::Full | RsnMode::Global => [1.0; 6],
        RsnMode::OffsetOnly => [0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
    }
}

/// Region selection network configuration.
#[derive(Clone, Copy, Debug)]
pub struct RsnConfig {
    /// Number of selected regions; must be a perfect square for the grid
    /// initialization (1 in global mode).
    pub num_regions: usize,
    pub hidden: usize,
    /// Side of the bilinear summary grid fed to the RSN.
    pub summary_grid: usize,
    pub mode: RsnMode,
}

impl Default for RsnConfig {
    fn default() -> Self {
        RsnConfig {
            num_regions: 16,
            hidden: 256,
            summary_grid: 4,
            mode: RsnMode::Full,
        }
    }
}

impl RsnConfig {
    pub fn grid_side(&self) -> Result<usize> {
        let side = (self.num_regions as f64).sqrt().round() as usize;
        if side * side != self.num_regions || self.num_regions == 0 {
            return Err(Error::invalid(format!(
                "num_regions {} is not a positive perfect square",
                self.num_regions
            )));
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_side()?;
        if self.mode == RsnMode::Global && self.num_regions != 1 {
            return Err(Error::invalid(format!(
                "global mode requires num_regions = 1, got {}",
                self.num_regions
            )));
        }
        if self.hidden == 0 || self.summary_grid == 0 {
            return Err(Error::invalid("rsn hidden and summary_grid must be >= 1"));
        }
        Ok(())
    }
}
