//! Binary file formats. All integers and floats are little-endian; reals
//! are stored as `f32`, so values round-trip exactly only when they are
//! representable in single precision.
//!
//! | magic  | contents                                            |
//! |--------|-----------------------------------------------------|
//! | `BQFM` | one feature map                                     |
//! | `BQTK` | token pyramid, bits packed LSB-first per scale      |
//! | `BQPM` | predictor weights and/or inversion sidecar          |
//! | `BQEP` | edited pyramid (blended full-resolution maps)       |
//!
//! Images use binary PGM (`P5`) and PPM (`P6`) with maxval ≤ 255.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bsq::{TokenMap, TokenPyramid};
use crate::codec::Image;
use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ScaleSchedule};
use crate::predictor::{LoraFactors, PredictorParams, PredictorShape};
use crate::smoothing::EditMask;
use crate::tensor::Matrix;

const VERSION: u8 = 1;

fn malformed<T>(kind: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(Error::Format { kind, reason: reason.into() })
}

struct Reader<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(kind: &'static str, bytes: &'a [u8]) -> Result<Self> {
        let mut r = Self { kind, bytes, pos: 0 };
        if r.take(4)? != kind.as_bytes() {
            return malformed(kind, "bad magic");
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return malformed(kind, format!("unsupported version {version}"));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return malformed(self.kind, "unexpected end of data");
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format { kind: self.kind, reason: "size overflow".into() })?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix::from_vec(rows, cols, self.f32s(rows * cols)?))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return malformed(self.kind, format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: &str) -> Self {
        let mut w = Self(kind.as_bytes().to_vec());
        w.0.push(VERSION);
        w
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("dimension {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f32s(&mut self, values: &[f64]) {
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

fn checked_map(kind: &'static str, h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<FeatureMap> {
    FeatureMap::new(h, w, d, data).or_else(|e| malformed(kind, e.to_string()))
}

pub fn encode_feature_map(map: &FeatureMap) -> Result<Vec<u8>> {
    let mut w = Writer::new("BQFM");
    w.u32(map.height())?;
    w.u32(map.width())?;
    w.u32(map.depth())?;
    w.f32s(map.data());
    Ok(w.0)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new("BQFM", bytes)?;
    let (h, w, d) = (r.u32()?, r.u32()?, r.u32()?);
    let data = r.f32s(h.saturating_mul(w).saturating_mul(d))?;
    r.finish()?;
    checked_map("BQFM", h, w, d, data)
}

pub fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    write_all(path, &encode_feature_map(map)?)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(&read_all(path)?)
}

pub fn encode_tokens(pyramid: &TokenPyramid) -> Result<Vec<u8>> {
    let mut w = Writer::new("BQTK");
    w.u32(pyramid.len())?;
    w.u32(pyramid.depth())?;
    for &(h, wd) in pyramid.schedule().scales() {
        w.u32(h)?;
        w.u32(wd)?;
    }
    let d = pyramid.depth();
    for map in pyramid.maps() {
        let mut packed = vec![0u8; (map.codes().len() * d).div_ceil(8)];
        for (p, &code) in map.codes().iter().enumerate() {
            for b in 0..d {
                if code >> b & 1 == 1 {
                    let bit = p * d + b;
                    packed[bit / 8] |= 1 << (bit % 8);
                }
            }
        }
        w.0.extend_from_slice(&packed);
    }
    Ok(w.0)
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenPyramid> {
    let mut r = Reader::new("BQTK", bytes)?;
    let (k, d) = (r.u32()?, r.u32()?);
    if k == 0 || d == 0 || d > crate::bsq::MAX_BITS {
        return malformed("BQTK", format!("invalid header K={k}, d={d}"));
    }
    let mut scales = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        scales.push((r.u32()?, r.u32()?));
    }
    let schedule = ScaleSchedule::new(scales).or_else(|e| malformed("BQTK", e.to_string()))?;
    let mut maps = Vec::with_capacity(k);
    for &(h, w) in schedule.scales() {
        let n = h * w;
        let packed = r.take((n * d).div_ceil(8))?;
        let codes = (0..n)
            .map(|p| (0..d).fold(0u32, |c, b| c | (((packed[(p * d + b) / 8] >> ((p * d + b) % 8)) & 1) as u32) << b))
            .collect();
        maps.push(TokenMap::new(h, w, d, codes).or_else(|e| malformed("BQTK", e.to_string()))?);
    }
    r.finish()?;
    TokenPyramid::new(schedule, maps).or_else(|e| malformed("BQTK", e.to_string()))
}

pub fn write_tokens(path: &Path, pyramid: &TokenPyramid) -> Result<()> {
    write_all(path, &encode_tokens(pyramid)?)
}

pub fn read_tokens(path: &Path) -> Result<TokenPyramid> {
    decode_tokens(&read_all(path)?)
}

/// Contents of a BQPM file: any combination of base weights, adapters and
/// learnable prompt rows over a shared architecture. A file without base
/// weights (vocabulary 0) is an inversion sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBundle {
    pub width: usize,
    pub bits: usize,
    pub schedule: ScaleSchedule,
    pub base: Option<PredictorParams>,
    pub lora: Option<LoraFactors>,
    pub learnable: Option<Matrix>,
}

impl ParamBundle {
    pub fn from_params(params: &PredictorParams) -> Self {
        Self {
            width: params.width(),
            bits: params.bits(),
            schedule: params.schedule().clone(),
            base: Some(params.clone().with_lora(None).expect("removing adapters")),
            lora: params.lora.clone(),
            learnable: None,
        }
    }

    pub fn sidecar(params: &PredictorParams, learnable: Matrix, lora: LoraFactors) -> Self {
        Self {
            width: params.width(),
            bits: params.bits(),
            schedule: params.schedule().clone(),
            base: None,
            lora: Some(lora),
            learnable: Some(learnable),
        }
    }

    /// Base weights, or an error naming what is missing.
    pub fn params(&self) -> Result<&PredictorParams> {
        self.base
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("parameter file holds no predictor weights (is it a sidecar?)".into()))
    }

    /// Checks that a sidecar fits the given predictor.
    pub fn check_compatible(&self, params: &PredictorParams) -> Result<()> {
        if self.width != params.width() || self.bits != params.bits() || &self.schedule != params.schedule() {
            return Err(Error::InvalidArgument("sidecar architecture does not match the predictor".into()));
        }
        Ok(())
    }
}

pub fn encode_params(bundle: &ParamBundle) -> Result<Vec<u8>> {
    let (m, d) = (bundle.width, bundle.bits);
    if let Some(b) = &bundle.base {
        if b.width() != m || b.bits() != d || b.schedule() != &bundle.schedule || b.lora.is_some() {
            return Err(Error::InvalidArgument("base weights do not match the bundle header".into()));
        }
    }
    let rank = bundle.lora.as_ref().map_or(0, LoraFactors::rank);
    let learnable_rows = bundle.learnable.as_ref().map_or(0, Matrix::rows);
    if bundle.learnable.as_ref().is_some_and(|l| l.cols() != m || l.rows() == 0) {
        return Err(Error::InvalidArgument("learnable prompt rows do not match the model width".into()));
    }
    let vocab = bundle.base.as_ref().map_or(0, |b| b.shape().vocab);
    let mut w = Writer::new("BQPM");
    for v in [m, d, learnable_rows, rank, vocab, bundle.schedule.len()] {
        w.u32(v)?;
    }
    for &(h, wd) in bundle.schedule.scales() {
        w.u32(h)?;
        w.u32(wd)?;
    }
    if let Some(b) = &bundle.base {
        for t in b.base_tensors() {
            w.f32s(t.data());
        }
    }
    if let Some(l) = &bundle.lora {
        if l.a1.rows() != m {
            return Err(Error::InvalidArgument("adapter shapes do not match the model width".into()));
        }
        for t in l.tensors() {
            w.f32s(t.data());
        }
    }
    if let Some(l) = &bundle.learnable {
        w.f32s(l.data());
    }
    Ok(w.0)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamBundle> {
    let mut r = Reader::new("BQPM", bytes)?;
    let (m, d, n, rank, vocab, k) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if m == 0 || d == 0 || d > crate::bsq::MAX_BITS || k == 0 {
        return malformed("BQPM", format!("invalid header m={m}, d={d}, K={k}"));
    }
    let mut scales = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        scales.push((r.u32()?, r.u32()?));
    }
    let schedule = ScaleSchedule::new(scales).or_else(|e| malformed("BQPM", e.to_string()))?;
    let base = if vocab > 0 {
        let shape = PredictorShape { width: m, bits: d, vocab, schedule: schedule.clone() };
        let mut p = PredictorParams::zeros(shape).or_else(|e| malformed("BQPM", e.to_string()))?;
        for t in p.base_tensors_mut() {
            let (rows, cols) = t.shape();
            *t = r.matrix(rows, cols)?;
        }
        Some(p)
    } else {
        None
    };
    let lora = if rank > 0 {
        let h = 4 * m;
        Some(LoraFactors { a1: r.matrix(m, rank)?, b1: r.matrix(rank, h)?, a2: r.matrix(h, rank)?, b2: r.matrix(rank, m)? })
    } else {
        None
    };
    let learnable = if n > 0 { Some(r.matrix(n, m)?) } else { None };
    r.finish()?;
    let all_finite = base.iter().flat_map(|b| b.base_tensors()).chain(lora.iter().flat_map(|l| l.tensors())).chain(learnable.iter())
        .all(|t| t.data().iter().all(|v| v.is_finite()));
    if !all_finite {
        return malformed("BQPM", "non-finite tensor values");
    }
    Ok(ParamBundle { width: m, bits: d, schedule, base, lora, learnable })
}

pub fn write_params(path: &Path, bundle: &ParamBundle) -> Result<()> {
    write_all(path, &encode_params(bundle)?)
}

pub fn read_params(path: &Path) -> Result<ParamBundle> {
    decode_params(&read_all(path)?)
}

pub fn encode_edited(maps: &[FeatureMap]) -> Result<Vec<u8>> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no edited maps to write".into()))?;
    if maps.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::InvalidArgument("edited maps differ in shape".into()));
    }
    let mut w = Writer::new("BQEP");
    for v in [maps.len(), first.height(), first.width(), first.depth()] {
        w.u32(v)?;
    }
    for m in maps {
        w.f32s(m.data());
    }
    Ok(w.0)
}

pub fn decode_edited(bytes: &[u8]) -> Result<Vec<FeatureMap>> {
    let mut r = Reader::new("BQEP", bytes)?;
    let (k, h, w, d) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let mut out = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        let data = r.f32s(h.saturating_mul(w).saturating_mul(d))?;
        out.push(checked_map("BQEP", h, w, d, data)?);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_edited(path: &Path, maps: &[FeatureMap]) -> Result<()> {
    write_all(path, &encode_edited(maps)?)
}

pub fn read_edited(path: &Path) -> Result<Vec<FeatureMap>> {
    decode_edited(&read_all(path)?)
}

/// Netpbm header tokenizer: whitespace-separated fields, `#` comments.
fn pnm_header(bytes: &[u8], fields: usize) -> Result<(Vec<String>, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    while out.len() < fields {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return malformed("PNM", "truncated header");
        }
        out.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return malformed("PNM", "missing raster");
    }
    Ok((out, pos + 1))
}

fn parse_dim(s: &str) -> Result<usize> {
    s.parse::<usize>().ok().filter(|&v| v > 0).map_or_else(|| malformed("PNM", format!("bad header field '{s}'")), Ok)
}

/// Reads a P5 (grayscale) or P6 (RGB, averaged to gray) image.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    let (fields, start) = pnm_header(bytes, 4)?;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return malformed("PNM", format!("unsupported magic '{other}' (expected P5 or P6)")),
    };
    let (w, h, maxval) = (parse_dim(&fields[1])?, parse_dim(&fields[2])?, parse_dim(&fields[3])?);
    if maxval > 255 {
        return malformed("PNM", format!("maxval {maxval} above 255 is not supported"));
    }
    let raster = &bytes[start..];
    if raster.len() != h * w * channels {
        return malformed("PNM", format!("expected {} raster bytes, found {}", h * w * channels, raster.len()));
    }
    let scale = maxval as f64;
    let pixels = raster
        .chunks_exact(channels)
        .map(|px| (px.iter().map(|&v| v as f64).sum::<f64>() / channels as f64 / scale).min(1.0))
        .collect();
    Image::new(h, w, pixels)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.pixels().iter().map(|&v| to_byte(v)));
    out
}

/// Gray replicated into three channels.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for &v in image.pixels() {
        out.extend([to_byte(v); 3]);
    }
    out
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_image(&read_all(path)?)
}

/// Writes PPM when the extension is `.ppm`, PGM otherwise.
pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let ppm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    write_all(path, &if ppm { encode_ppm(image) } else { encode_pgm(image) })
}

/// Mask PGM: dark pixels (< 128) are the edit region.
pub fn decode_mask(bytes: &[u8]) -> Result<EditMask> {
    let image = decode_image(bytes)?;
    let cells = image.pixels().iter().map(|&v| v < 128.0 / 255.0).collect();
    EditMask::new(image.height(), image.width(), cells)
}

pub fn encode_mask(mask: &EditMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.cells().iter().map(|&fg| if fg { 0u8 } else { 255 }));
    out
}

pub fn read_mask(path: &Path) -> Result<EditMask> {
    decode_mask(&read_all(path)?)
}

pub fn write_mask(path: &Path, mask: &EditMask) -> Result<()> {
    write_all(path, &encode_mask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsq::tokenize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn f32_exact(values: impl Iterator<Item = f64>) -> Vec<f64> {
        values.map(|v| v as f32 as f64).collect()
    }

    fn round_params(p: &mut PredictorParams) {
        for t in p.base_tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        if let Some(l) = p.lora.as_mut() {
            for t in l.tensors_mut() {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }

    #[test]
    fn feature_map_layout_and_round_trip() {
        let m = FeatureMap::new(1, 2, 1, vec![0.5, -2.0]).unwrap();
        let bytes = encode_feature_map(&m).unwrap();
        let mut expected = b"BQFM\x01".to_vec();
        for v in [1u32, 2, 1] {
            expected.extend(v.to_le_bytes());
        }
        expected.extend(0.5f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_feature_map(&bytes).unwrap(), m);
    }

    #[test]
    fn token_layout() {
        // d = 3, two positions: codes 0b101 and 0b011 → bits 1,0,1,1,1,0 LSB-first
        let schedule = ScaleSchedule::new(vec![(1, 2)]).unwrap();
        let pyramid = TokenPyramid::new(schedule, vec![TokenMap::new(1, 2, 3, vec![0b101, 0b011]).unwrap()]).unwrap();
        let bytes = encode_tokens(&pyramid).unwrap();
        assert_eq!(&bytes[..5], b"BQTK\x01");
        assert_eq!(bytes.len(), 5 + 8 + 8 + 1);
        assert_eq!(bytes[21], 0b011101);
        assert_eq!(decode_tokens(&bytes).unwrap(), pyramid);
    }

    #[test]
    fn token_round_trip_default_schedule() {
        let schedule = ScaleSchedule::default_16();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FeatureMap::new(16, 16, 16, (0..16 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (pyramid, _) = tokenize(&f, &schedule).unwrap();
        assert_eq!(decode_tokens(&encode_tokens(&pyramid).unwrap()).unwrap(), pyramid);
    }

    #[test]
    fn param_round_trips() {
        let shape = PredictorShape { width: 4, bits: 4, vocab: 3, schedule: ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap() };
        let mut p = PredictorParams::init(shape, 3).unwrap();
        round_params(&mut p);
        let bundle = ParamBundle::from_params(&p);
        assert_eq!(decode_params(&encode_params(&bundle).unwrap()).unwrap(), bundle);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lora = LoraFactors::init(4, 2, &mut rng);
        for t in lora.tensors_mut() {
            let v = f32_exact(t.data().iter().copied());
            t.data_mut().copy_from_slice(&v);
        }
        let learn = Matrix::from_vec(2, 4, f32_exact((0..8).map(|i| i as f64 * 0.1)));
        let side = ParamBundle::sidecar(&p, learn, lora);
        let bytes = encode_params(&side).unwrap();
        // header: magic, version, six u32 fields, two scales
        assert_eq!(bytes.len(), 5 + 24 + 16 + 4 * (4 * 2 + 2 * 16 + 16 * 2 + 2 * 4 + 2 * 4));
        let back = decode_params(&bytes).unwrap();
        assert_eq!(back, side);
        assert!(back.params().is_err());
        back.check_compatible(&p).unwrap();
    }

    #[test]
    fn edited_round_trip() {
        let maps = vec![FeatureMap::filled(2, 3, 4, 0.25), FeatureMap::filled(2, 3, 4, -1.5)];
        assert_eq!(decode_edited(&encode_edited(&maps).unwrap()).unwrap(), maps);
        assert!(encode_edited(&[]).is_err());
    }

    #[test]
    fn pgm_and_mask() {
        let img = Image::new(2, 3, vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = decode_image(&bytes).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(decode_image(&encode_ppm(&back)).unwrap(), back);

        let commented = b"P5\n# comment\n2 1\n# another\n255\n\x00\xff";
        assert_eq!(decode_image(commented).unwrap().pixels(), &[0.0, 1.0]);

        let mask = EditMask::from_fn(3, 4, |y, x| (y + x) % 2 == 0);
        assert_eq!(decode_mask(&encode_mask(&mask)).unwrap(), mask);
        assert_eq!(decode_mask(b"P5 2 1 255 \x7f\x80").unwrap().cells(), &[true, false]);
    }

    #[test]
    fn malformed_inputs_rejected() {
        assert!(decode_feature_map(b"BQFX\x01").is_err());
        assert!(decode_feature_map(b"BQFM\x02\x01\x00\x00\x00").is_err());
        let mut ok = encode_feature_map(&FeatureMap::zeros(1, 1, 2)).unwrap();
        ok.push(0);
        assert!(decode_feature_map(&ok).is_err());
        ok.truncate(ok.len() - 3);
        assert!(decode_feature_map(&ok).is_err());
        assert!(decode_image(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_image(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_image(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_tokens(b"BQTK\x01\x00\x00\x00\x00\x01\x00\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn feature_maps_round_trip(h in 1usize..5, w in 1usize..5, d in 1usize..4, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = f32_exact((0..h * w * d).map(|_| rng.random_range(-4.0..4.0)));
            let m = FeatureMap::new(h, w, d, data).unwrap();
            prop_assert_eq!(decode_feature_map(&encode_feature_map(&m).unwrap()).unwrap(), m);
        }

        #[test]
        fn token_maps_round_trip(h in 1usize..5, w in 1usize..5, d in 1usize..=32, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = if d == 32 { u32::MAX } else { (1u32 << d) - 1 };
            let codes = (0..h * w).map(|_| rng.random::<u32>() & mask).collect();
            let schedule = ScaleSchedule::new(vec![(h, w)]).unwrap();
            let p = TokenPyramid::new(schedule, vec![TokenMap::new(h, w, d, codes).unwrap()]).unwrap();
            prop_assert_eq!(decode_tokens(&encode_tokens(&p).unwrap()).unwrap(), p);
        }
    }
}
