//! Edit masks, exact L1 distance fields and blend-weight kernels.
//!
//! Kernel values are blend weights for the *source*: 0 keeps the generated
//! target content, 1 keeps the source.

use crate::error::{invalid, Result};
use crate::grid::FeatureMap;

/// Boolean grid; `true` marks the edit region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl EditMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("mask dims must be positive");
        }
        if cells.len() != height * width {
            return invalid(format!("mask {height}x{width} needs {} cells, got {}", height * width, cells.len()));
        }
        Ok(Self { height, width, cells })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, cells: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let cells = (0..height * width).map(|p| f(p / width, p % width)).collect();
        Self { height, width, cells }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn complement(&self) -> EditMask {
        EditMask { cells: self.cells.iter().map(|c| !c).collect(), ..*self }
    }
}

/// Per-cell L1 distance to the nearest edit-region cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    height: usize,
    width: usize,
    values: Vec<u32>,
}

impl DistanceField {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.values[i * self.width + j]
    }
}

/// Per-cell blend weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingKernel {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SmoothingKernel {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return invalid("kernel dims do not match value count");
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("kernel values must lie in [0, 1]");
        }
        Ok(Self { height, width, values })
    }

    /// # Panics
    /// If `value` is outside `[0, 1]` or a dimension is zero.
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0);
        assert!((0.0..=1.0).contains(&value), "kernel value {value} outside [0, 1]");
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    /// The kernel as a depth-1 feature map, for export.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap::new(self.height, self.width, 1, self.values.clone()).expect("kernel values are finite")
    }
}

/// Kernel family and parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear { tau1: f64, tau2: f64 },
    Gaussian { alpha: f64 },
    /// Same weight everywhere, ignoring distances.
    Constant { value: f64 },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Linear { tau1: 1.0, tau2: 4.0 }
    }
}

impl KernelSpec {
    pub fn build(&self, field: &DistanceField) -> Result<SmoothingKernel> {
        match *self {
            KernelSpec::Linear { tau1, tau2 } => linear_kernel(field, tau1, tau2),
            KernelSpec::Gaussian { alpha } => gaussian_kernel(field, alpha),
            KernelSpec::Constant { value } => {
                if !(0.0..=1.0).contains(&value) {
                    return invalid(format!("constant kernel value {value} outside [0, 1]"));
                }
                let (h, w) = field.dims();
                Ok(SmoothingKernel::constant(h, w, value))
            }
        }
    }
}

/// Exact Manhattan distance transform by a forward and a backward sweep.
pub fn manhattan_distance_field(mask: &EditMask) -> Result<DistanceField> {
    if mask.count() == 0 {
        return invalid("no edit region: mask has no foreground cells");
    }
    let (h, w) = mask.dims();
    let far = (h + w) as u32;
    let mut dist: Vec<u32> = mask.cells.iter().map(|&c| if c { 0 } else { far }).collect();
    for i in 0..h {
        for j in 0..w {
            let mut v = dist[i * w + j];
            if i > 0 {
                v = v.min(dist[(i - 1) * w + j] + 1);
            }
            if j > 0 {
                v = v.min(dist[i * w + j - 1] + 1);
            }
            dist[i * w + j] = v;
        }
    }
    for i in (0..h).rev() {
        for j in (0..w).rev() {
            let mut v = dist[i * w + j];
            if i + 1 < h {
                v = v.min(dist[(i + 1) * w + j] + 1);
            }
            if j + 1 < w {
                v = v.min(dist[i * w + j + 1] + 1);
            }
            dist[i * w + j] = v;
        }
    }
    Ok(DistanceField { height: h, width: w, values: dist })
}

/// Piecewise-linear ramp: 0 up to `tau1`, 1 from `tau2`, linear between.
pub fn linear_kernel(field: &DistanceField, tau1: f64, tau2: f64) -> Result<SmoothingKernel> {
    if !(tau1.is_finite() && tau2.is_finite()) || tau1 < 0.0 || tau1 >= tau2 {
        return invalid(format!("linear kernel needs 0 ≤ tau1 < tau2, got tau1={tau1}, tau2={tau2}"));
    }
    let values = field
        .values
        .iter()
        .map(|&d| {
            let d = d as f64;
            if d <= tau1 {
                0.0
            } else if d >= tau2 {
                1.0
            } else {
                (d - tau1) / (tau2 - tau1)
            }
        })
        .collect();
    Ok(SmoothingKernel { height: field.height, width: field.width, values })
}

/// `1 − exp(−d² / 2α²)` per cell.
pub fn gaussian_kernel(field: &DistanceField, alpha: f64) -> Result<SmoothingKernel> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return invalid(format!("gaussian kernel needs alpha > 0, got {alpha}"));
    }
    let values = field
        .values
        .iter()
        .map(|&d| {
            let d = d as f64;
            -(-d * d / (2.0 * alpha * alpha)).exp_m1()
        })
        .collect();
    Ok(SmoothingKernel { height: field.height, width: field.width, values })
}

/// Marks cells whose attention weight is strictly above `threshold`.
pub fn mask_from_attention(attention: &FeatureMap, threshold: f64) -> Result<EditMask> {
    if attention.depth() != 1 {
        return invalid(format!("attention map must have depth 1, got {}", attention.depth()));
    }
    let cells: Vec<bool> = attention.data().iter().map(|&a| a > threshold).collect();
    if !cells.contains(&true) {
        return invalid(format!("threshold too high: no attention value exceeds {threshold}"));
    }
    EditMask::new(attention.height(), attention.width(), cells)
}

/// Pixel mask → token mask: a token is marked if any pixel of its patch is.
pub fn mask_to_token_grid(mask: &EditMask, token_dims: (usize, usize), patch: usize) -> Result<EditMask> {
    let (th, tw) = token_dims;
    if patch == 0 || mask.dims() != (th * patch, tw * patch) {
        return invalid(format!(
            "pixel mask {:?} does not match token grid {token_dims:?} at patch {patch}",
            mask.dims()
        ));
    }
    let mut out = EditMask::filled(th, tw, false);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                out.set(y / patch, x / patch, true);
            }
        }
    }
    Ok(out)
}
