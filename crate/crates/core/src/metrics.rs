//! Pixel-space quality metrics with optional region restriction.
//!
//! Images are in `[0, 1]`, so the dynamic range is 1. A region mask marks
//! the pixels (for SSIM, the window centers) that are included.

use crate::codec::Image;
use crate::error::{invalid, Result};
use crate::smoothing::EditMask;

/// PSNR reported for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

const MSE_FLOOR: f64 = 1e-10;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Whole,
    Background,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Whole => "whole",
            Region::Background => "background",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub region: Region,
    pub psnr: f64,
    pub mse: f64,
    pub ssim: f64,
}

fn check(a: &Image, b: &Image, region: Option<&EditMask>) -> Result<()> {
    if a.dims() != b.dims() {
        return invalid(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    if let Some(r) = region {
        if r.dims() != a.dims() {
            return invalid(format!("region dims {:?} do not match image dims {:?}", r.dims(), a.dims()));
        }
        if r.count() == 0 {
            return invalid("empty metric region");
        }
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image, region: Option<&EditMask>) -> Result<f64> {
    check(a, b, region)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, (x, y)) in a.pixels().iter().zip(b.pixels()).enumerate() {
        if region.is_none_or(|r| r.cells()[idx]) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image, region: Option<&EditMask>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, region)?))
}

fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let half = (WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let mut w = [0.0; WINDOW * WINDOW];
    for y in 0..WINDOW {
        for x in 0..WINDOW {
            w[y * WINDOW + x] = taps[y] * taps[x] / (total * total);
        }
    }
    w
}

/// Single-scale SSIM over every full window whose center lies in the
/// region. Each window's statistics are computed in the same order for
/// `(a, b)` and `(b, a)`, so the result is symmetric.
pub fn ssim(a: &Image, b: &Image, region: Option<&EditMask>) -> Result<f64> {
    check(a, b, region)?;
    let (h, w) = a.dims();
    if h < WINDOW || w < WINDOW {
        return invalid(format!("image {h}x{w} smaller than the {WINDOW}x{WINDOW} SSIM window"));
    }
    let win = gaussian_window();
    let half = WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            if region.is_some_and(|r| !r.get(cy, cx)) {
                continue;
            }
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let g = win[dy * WINDOW + dx];
                    let (y, x) = (cy + dy - half, cx + dx - half);
                    let (va, vb) = (a.get(y, x), b.get(y, x));
                    ma += g * va;
                    mb += g * vb;
                    saa += g * va * va;
                    sbb += g * vb * vb;
                    sab += g * va * vb;
                }
            }
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            let den = (ma * ma + mb * mb + C1) * (var_a + var_b + C2);
            sum += num / den;
            n += 1;
        }
    }
    if n == 0 {
        return invalid("no SSIM window center lies inside the region");
    }
    Ok(sum / n as f64)
}

pub fn report(a: &Image, b: &Image, region: Option<&EditMask>, kind: Region) -> Result<MetricReport> {
    let mse = mse(a, b, region)?;
    Ok(MetricReport { region: kind, psnr: psnr_from_mse(mse), mse, ssim: ssim(a, b, region)? })
}
