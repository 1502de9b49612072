//! Dense feature grids, scale schedules, bilinear resampling and blending.

use crate::error::{invalid, Result};
use crate::smoothing::SmoothingKernel;

/// An `height × width` grid of `depth`-dimensional real vectors, stored
/// row-major with the channel index innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    depth: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return invalid(format!("feature map dims must be positive, got {height}x{width}x{depth}"));
        }
        if data.len() != height * width * depth {
            return invalid(format!(
                "feature map {height}x{width}x{depth} needs {} values, got {}",
                height * width * depth,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite feature value at flat index {pos}"));
        }
        Ok(Self { height, width, depth, data })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        assert!(height > 0 && width > 0 && depth > 0, "feature map dims must be positive");
        Self { height, width, depth, data: vec![0.0; height * width * depth] }
    }

    pub fn filled(height: usize, width: usize, depth: usize, value: f64) -> Self {
        let mut map = Self::zeros(height, width, depth);
        map.data.fill(value);
        map
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The feature vector at row `i`, column `j`.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.depth;
        &self.data[start..start + self.depth]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = (i * self.width + j) * self.depth;
        &mut self.data[start..start + self.depth]
    }

    /// Iterates over the per-position vectors in row-major order.
    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.depth)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.depth == other.depth
    }

    fn check_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return invalid(format!(
                "{what}: shape mismatch {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.depth, other.height, other.width, other.depth
            ));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &FeatureMap) -> Result<()> {
        self.check_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        self.check_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(FeatureMap { data, ..*self })
    }

    pub fn scaled(&self, factor: f64) -> FeatureMap {
        FeatureMap { data: self.data.iter().map(|v| v * factor).collect(), ..*self }
    }

    /// Squared Frobenius norm.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Coarse-to-fine list of token resolutions; the last entry is the full
/// token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleSchedule(Vec<(usize, usize)>);

impl ScaleSchedule {
    pub fn new(scales: Vec<(usize, usize)>) -> Result<Self> {
        if scales.is_empty() {
            return invalid("scale schedule must contain at least one scale");
        }
        if scales.iter().any(|&(h, w)| h == 0 || w == 0) {
            return invalid("scale schedule entries must be positive");
        }
        for pair in scales.windows(2) {
            let ((h0, w0), (h1, w1)) = (pair[0], pair[1]);
            if h0 > h1 || w0 > w1 {
                return invalid(format!("scale schedule not monotone: {h0}x{w0} before {h1}x{w1}"));
            }
        }
        Ok(Self(scales))
    }

    /// The default ramp for a 16×16 token grid.
    pub fn default_16() -> Self {
        Self(vec![(1, 1), (2, 2), (4, 4), (6, 6), (8, 8), (12, 12), (16, 16)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scale(&self, k: usize) -> (usize, usize) {
        self.0[k]
    }

    pub fn full(&self) -> (usize, usize) {
        *self.0.last().expect("schedule is non-empty")
    }

    pub fn scales(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Total number of token positions over all scales.
    pub fn total_positions(&self) -> usize {
        self.0.iter().map(|&(h, w)| h * w).sum()
    }
}

impl std::fmt::Display for ScaleSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(h, w)| format!("{h}x{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for ScaleSchedule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut scales = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (h, w) = part
                .split_once(['x', 'X'])
                .ok_or_else(|| crate::Error::InvalidArgument(format!("bad scale entry {part:?}")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| crate::Error::InvalidArgument(format!("bad scale entry {part:?}")))
            };
            scales.push((parse(h)?, parse(w)?));
        }
        ScaleSchedule::new(scales)
    }
}

/// Source taps for one output index along one axis.
#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(src: usize, dst: usize) -> Vec<Tap> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|t| {
            let x = ((t as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = x.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, frac: x - lo as f64 }
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Resampling to the map's own size returns an exact copy.
pub fn bilinear_resample(map: &FeatureMap, target: (usize, usize)) -> Result<FeatureMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return invalid(format!("resample target must be positive, got {th}x{tw}"));
    }
    if target == map.dims() {
        return Ok(map.clone());
    }
    let d = map.depth;
    let rows = axis_taps(map.height, th);
    let cols = axis_taps(map.width, tw);
    let mut out = FeatureMap::zeros(th, tw, d);
    for (i, ry) in rows.iter().enumerate() {
        for (j, cx) in cols.iter().enumerate() {
            let v00 = map.at(ry.lo, cx.lo);
            let v01 = map.at(ry.lo, cx.hi);
            let v10 = map.at(ry.hi, cx.lo);
            let v11 = map.at(ry.hi, cx.hi);
            let (fy, fx) = (ry.frac, cx.frac);
            let dst = out.at_mut(i, j);
            for c in 0..d {
                let top = (1.0 - fx) * v00[c] + fx * v01[c];
                let bottom = (1.0 - fx) * v10[c] + fx * v11[c];
                dst[c] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    Ok(out)
}

/// Per-position convex combination `a·(1−w) + b·w`, broadcast over depth.
pub fn weighted_blend(a: &FeatureMap, b: &FeatureMap, weights: &SmoothingKernel) -> Result<FeatureMap> {
    a.check_shape(b, "weighted_blend")?;
    if weights.dims() != a.dims() {
        return invalid(format!(
            "weighted_blend: kernel {:?} does not match map {:?}",
            weights.dims(),
            a.dims()
        ));
    }
    let d = a.depth;
    let data = a
        .data
        .chunks_exact(d)
        .zip(b.data.chunks_exact(d))
        .zip(weights.values())
        .flat_map(|((va, vb), &w)| va.iter().zip(vb).map(move |(x, y)| x * (1.0 - w) + y * w))
        .collect();
    Ok(FeatureMap { data, ..*a })
}
