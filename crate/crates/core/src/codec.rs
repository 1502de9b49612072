//! Grayscale images and the fixed linear image ↔ feature codec.
//!
//! Encoding is space-to-depth: each `p×p` patch becomes one `p²`-vector whose
//! entries are the patch pixels (row-major within the patch) mapped affinely
//! from `[0, 1]` to `[−gain, +gain]`. Decoding inverts this and clamps.

use crate::error::{invalid, Result};
use crate::grid::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid(format!("image dims must be positive, got {height}x{width}"));
        }
        if pixels.len() != height * width {
            return invalid(format!("image {height}x{width} needs {} pixels, got {}", height * width, pixels.len()));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return invalid("non-finite pixel value");
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0);
        Self { height, width, pixels: vec![value; height * width] }
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }
}

/// Patch size and value gain of the toy codec.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Codec {
    pub patch: usize,
    pub gain: f64,
}

impl Default for Codec {
    fn default() -> Self {
        Self { patch: 4, gain: 1.0 }
    }
}

impl Codec {
    pub fn new(patch: usize, gain: f64) -> Result<Self> {
        if patch == 0 {
            return invalid("codec patch size must be positive");
        }
        if !(gain > 0.0 && gain.is_finite()) {
            return invalid(format!("codec gain must be positive and finite, got {gain}"));
        }
        Ok(Self { patch, gain })
    }

    /// Feature depth produced by this codec.
    pub fn depth(&self) -> usize {
        self.patch * self.patch
    }

    pub fn token_dims(&self, image_dims: (usize, usize)) -> Result<(usize, usize)> {
        let p = self.patch;
        let (h, w) = image_dims;
        if h % p != 0 || w % p != 0 {
            return invalid(format!("image {h}x{w} is not divisible by patch size {p}"));
        }
        Ok((h / p, w / p))
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        encode_image(image, self.patch, self.gain)
    }

    pub fn decode(&self, features: &FeatureMap) -> Result<Image> {
        decode_image(features, self.patch, self.gain)
    }
}

pub fn encode_image(image: &Image, patch: usize, gain: f64) -> Result<FeatureMap> {
    let codec = Codec::new(patch, gain)?;
    let (th, tw) = codec.token_dims(image.dims())?;
    let d = codec.depth();
    let mut out = FeatureMap::zeros(th, tw, d);
    for ti in 0..th {
        for tj in 0..tw {
            let v = out.at_mut(ti, tj);
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = image.get(ti * patch + dy, tj * patch + dx);
                    v[dy * patch + dx] = (2.0 * px - 1.0) * gain;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`encode_image`], clamping pixels to `[0, 1]`.
pub fn decode_image(features: &FeatureMap, patch: usize, gain: f64) -> Result<Image> {
    let raw = decode_unclamped(features, patch, gain)?;
    let pixels = raw.pixels.iter().map(|p| p.clamp(0.0, 1.0)).collect();
    Ok(Image { pixels, ..raw })
}

/// Inverse of [`encode_image`] without the final clamp.
pub fn decode_unclamped(features: &FeatureMap, patch: usize, gain: f64) -> Result<Image> {
    let codec = Codec::new(patch, gain)?;
    if features.depth() != codec.depth() {
        return invalid(format!(
            "feature depth {} does not equal patch² = {}",
            features.depth(),
            codec.depth()
        ));
    }
    let (h, w) = (features.height() * patch, features.width() * patch);
    let mut pixels = vec![0.0; h * w];
    for ti in 0..features.height() {
        for tj in 0..features.width() {
            let v = features.at(ti, tj);
            for dy in 0..patch {
                for dx in 0..patch {
                    pixels[(ti * patch + dy) * w + tj * patch + dx] = (v[dy * patch + dx] / gain + 1.0) * 0.5;
                }
            }
        }
    }
    Ok(Image { height: h, width: w, pixels })
}
