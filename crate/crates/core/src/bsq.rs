//! Binary spherical quantization and multi-scale residual tokenization.
//!
//! A `d`-vector is quantized to the vertex of `{±1/√d}^d` that shares its sign
//! pattern, which is also the unit-sphere codeword of maximal cosine
//! similarity. Codes are stored as one little-endian `u32` per position, bit
//! `b` set meaning component `b` is `+1/√d`.
//!
//! Tokenization walks the schedule coarse to fine. At scale `k` the residual
//! between the target feature and the running reconstruction is downsampled,
//! quantized, and its dequantized upsample is added to the reconstruction.

use crate::error::{invalid, Result};
use crate::grid::{bilinear_resample, FeatureMap, ScaleSchedule};

/// Largest supported code width.
pub const MAX_BITS: usize = 32;

/// Sign pattern of `z`; a zero component maps to a set bit.
///
/// # Panics
/// If `z` is longer than [`MAX_BITS`].
pub fn quantize_bsq(z: &[f64]) -> u32 {
    assert!(z.len() <= MAX_BITS, "code width {} exceeds {MAX_BITS}", z.len());
    z.iter()
        .enumerate()
        .fold(0u32, |code, (b, &v)| if v >= 0.0 { code | (1 << b) } else { code })
}

pub fn dequantize(code: u32, depth: usize) -> Vec<f64> {
    let mut out = vec![0.0; depth];
    dequantize_into(code, &mut out);
    out
}

pub fn dequantize_into(code: u32, out: &mut [f64]) {
    let s = 1.0 / (out.len() as f64).sqrt();
    for (b, v) in out.iter_mut().enumerate() {
        *v = if code >> b & 1 == 1 { s } else { -s };
    }
}

/// One scale of binary tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    height: usize,
    width: usize,
    depth: usize,
    codes: Vec<u32>,
}

impl TokenMap {
    pub fn new(height: usize, width: usize, depth: usize, codes: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("token map dims must be positive");
        }
        if depth == 0 || depth > MAX_BITS {
            return invalid(format!("token depth must be in 1..={MAX_BITS}, got {depth}"));
        }
        if codes.len() != height * width {
            return invalid(format!("token map {height}x{width} needs {} codes, got {}", height * width, codes.len()));
        }
        let mask = if depth == 32 { u32::MAX } else { (1u32 << depth) - 1 };
        if codes.iter().any(|&c| c & !mask != 0) {
            return invalid(format!("token code uses bits beyond depth {depth}"));
        }
        Ok(Self { height, width, depth, codes })
    }

    /// Quantizes every position of `features`.
    pub fn quantize(features: &FeatureMap) -> Result<Self> {
        if features.depth() > MAX_BITS {
            return invalid(format!("feature depth {} exceeds {MAX_BITS}", features.depth()));
        }
        let codes = features.vectors().map(quantize_bsq).collect();
        Ok(Self { height: features.height(), width: features.width(), depth: features.depth(), codes })
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

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn code(&self, i: usize, j: usize) -> u32 {
        self.codes[i * self.width + j]
    }

    pub fn bit(&self, i: usize, j: usize, b: usize) -> bool {
        self.code(i, j) >> b & 1 == 1
    }

    pub fn dequantize(&self) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.height, self.width, self.depth);
        for (pos, &code) in self.codes.iter().enumerate() {
            let (i, j) = (pos / self.width, pos % self.width);
            dequantize_into(code, out.at_mut(i, j));
        }
        out
    }

    /// Dequantized tokens bilinearly resampled to `full`.
    pub fn upsampled(&self, full: (usize, usize)) -> FeatureMap {
        bilinear_resample(&self.dequantize(), full).expect("full resolution is positive")
    }

    /// Number of differing bits against another map of the same shape.
    pub fn bit_mismatches(&self, other: &TokenMap) -> usize {
        self.codes.iter().zip(&other.codes).map(|(a, b)| (a ^ b).count_ones() as usize).sum()
    }
}

/// Token maps for every scale of a schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPyramid {
    schedule: ScaleSchedule,
    maps: Vec<TokenMap>,
}

impl TokenPyramid {
    pub fn new(schedule: ScaleSchedule, maps: Vec<TokenMap>) -> Result<Self> {
        if maps.is_empty() {
            return invalid("token pyramid is empty");
        }
        if maps.len() != schedule.len() {
            return invalid(format!("pyramid has {} maps but schedule has {} scales", maps.len(), schedule.len()));
        }
        let depth = maps[0].depth;
        for (k, (map, &dims)) in maps.iter().zip(schedule.scales()).enumerate() {
            if map.dims() != dims {
                return invalid(format!("scale {k}: token map {:?} does not match schedule {dims:?}", map.dims()));
            }
            if map.depth != depth {
                return invalid(format!("scale {k}: depth {} differs from {depth}", map.depth));
            }
        }
        Ok(Self { schedule, maps })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn maps(&self) -> &[TokenMap] {
        &self.maps
    }

    pub fn depth(&self) -> usize {
        self.maps[0].depth
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Cumulative reconstructions `F_1..F_K` at full token resolution.
    pub fn cumulative(&self) -> Vec<FeatureMap> {
        let full = self.schedule.full();
        let mut acc = FeatureMap::zeros(full.0, full.1, self.depth());
        self.maps
            .iter()
            .map(|map| {
                accumulate(&mut acc, map, full);
                acc.clone()
            })
            .collect()
    }

    pub fn total_bits(&self) -> usize {
        self.schedule.total_positions() * self.depth()
    }

    pub fn bit_mismatches(&self, other: &TokenPyramid) -> usize {
        self.maps.iter().zip(&other.maps).map(|(a, b)| a.bit_mismatches(b)).sum()
    }
}

fn accumulate(acc: &mut FeatureMap, map: &TokenMap, full: (usize, usize)) {
    acc.add_assign(&map.upsampled(full)).expect("upsampled to accumulator shape");
}

/// Multi-scale residual tokenization. Returns the pyramid and the final
/// cumulative reconstruction `F_K`.
pub fn tokenize(features: &FeatureMap, schedule: &ScaleSchedule) -> Result<(TokenPyramid, FeatureMap)> {
    let full = schedule.full();
    if features.dims() != full {
        return invalid(format!(
            "feature map {:?} does not match schedule resolution {full:?}",
            features.dims()
        ));
    }
    if features.depth() > MAX_BITS {
        return invalid(format!("feature depth {} exceeds {MAX_BITS}", features.depth()));
    }
    let mut acc = FeatureMap::zeros(full.0, full.1, features.depth());
    let mut maps = Vec::with_capacity(schedule.len());
    for &dims in schedule.scales() {
        let residual = features.sub(&acc)?;
        let z = bilinear_resample(&residual, dims)?;
        let tokens = TokenMap::quantize(&z)?;
        accumulate(&mut acc, &tokens, full);
        maps.push(tokens);
    }
    Ok((TokenPyramid { schedule: schedule.clone(), maps }, acc))
}

/// Sum of the upsampled dequantized token maps, `F_K`.
pub fn reconstruct(pyramid: &TokenPyramid) -> Result<FeatureMap> {
    if pyramid.maps.is_empty() {
        return invalid("cannot reconstruct an empty pyramid");
    }
    let full = pyramid.schedule.full();
    let mut acc = FeatureMap::zeros(full.0, full.1, pyramid.depth());
    for map in &pyramid.maps {
        accumulate(&mut acc, map, full);
    }
    Ok(acc)
}
