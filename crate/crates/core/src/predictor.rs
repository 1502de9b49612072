//! Toy next-scale predictor with per-bit classifiers.
//!
//! Every token position is processed independently given its context
//! vector (the cumulative reconstruction from earlier scales, resampled to
//! the current scale):
//!
//! ```text
//! e  = c·W_in + b_in + pos[k][i,j] + scale[k]
//! h1 = e + CrossAttn(e, prompt)            single head, softmax over prompt rows
//! h2 = h1 + GELU(h1·W1' + b1)·W2' + b2     W' = W + A·B when adapters are installed
//! ℓ  = h2·W_head + b_head                  one logit per bit
//! ```
//!
//! Gradients are computed by hand; see [`evaluate`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

use crate::bsq::{TokenMap, TokenPyramid};
use crate::error::{invalid, Result};
use crate::grid::{bilinear_resample, FeatureMap, ScaleSchedule};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{add_outer, axpy, dot, mat_vec, sigmoid, softplus, vec_mat, Matrix};

/// Architecture dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictorShape {
    /// Model width `m`.
    pub width: usize,
    /// Bits per token `d`.
    pub bits: usize,
    /// Number of rows in the prompt lookup table.
    pub vocab: usize,
    pub schedule: ScaleSchedule,
}

impl PredictorShape {
    pub fn hidden(&self) -> usize {
        4 * self.width
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.bits == 0 || self.vocab == 0 {
            return invalid("predictor width, bits and vocab must be positive");
        }
        if self.bits > crate::bsq::MAX_BITS {
            return invalid(format!("predictor bits exceed {}", crate::bsq::MAX_BITS));
        }
        Ok(())
    }
}

/// Low-rank FFN adapters: `W1' = W1 + a1·b1`, `W2' = W2 + a2·b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a1: Matrix,
    pub b1: Matrix,
    pub a2: Matrix,
    pub b2: Matrix,
}

impl LoraFactors {
    /// `A` factors uniform in `[−1/√fan_in, 1/√fan_in]`, `B` factors zero.
    pub fn init(width: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = 4 * width;
        let bound = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            a1: Matrix::random_uniform(width, rank, bound(width), rng),
            b1: Matrix::zeros(rank, hidden),
            a2: Matrix::random_uniform(hidden, rank, bound(hidden), rng),
            b2: Matrix::zeros(rank, width),
        }
    }

    pub fn rank(&self) -> usize {
        self.a1.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 4] {
        [&self.a1, &self.b1, &self.a2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.a1, &mut self.b1, &mut self.a2, &mut self.b2]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            a1: self.a1.zeros_like(),
            b1: self.b1.zeros_like(),
            a2: self.a2.zeros_like(),
            b2: self.b2.zeros_like(),
        }
    }

    pub fn deltas(&self) -> (Matrix, Matrix) {
        (self.a1.matmul(&self.b1), self.a2.matmul(&self.b2))
    }

    fn check(&self, width: usize) -> Result<()> {
        let (h, r) = (4 * width, self.rank());
        let ok = r > 0
            && self.a1.shape() == (width, r)
            && self.b1.shape() == (r, h)
            && self.a2.shape() == (h, r)
            && self.b2.shape() == (r, width);
        if !ok {
            return invalid("LoRA factor shapes do not match the predictor");
        }
        Ok(())
    }
}

/// All weights of the predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    shape: PredictorShape,
    pub prompt_table: Matrix,
    pub input_proj: Matrix,
    pub input_bias: Matrix,
    pub positions: Vec<Matrix>,
    pub scale_embed: Matrix,
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ffn_in: Matrix,
    pub ffn_in_bias: Matrix,
    pub ffn_out: Matrix,
    pub ffn_out_bias: Matrix,
    pub head: Matrix,
    pub head_bias: Matrix,
    pub lora: Option<LoraFactors>,
}

impl PredictorParams {
    /// All-zero weights.
    pub fn zeros(shape: PredictorShape) -> Result<Self> {
        shape.validate()?;
        let (m, d, h) = (shape.width, shape.bits, shape.hidden());
        Ok(Self {
            prompt_table: Matrix::zeros(shape.vocab, m),
            input_proj: Matrix::zeros(d, m),
            input_bias: Matrix::zeros(1, m),
            positions: shape.schedule.scales().iter().map(|&(a, b)| Matrix::zeros(a * b, m)).collect(),
            scale_embed: Matrix::zeros(shape.schedule.len(), m),
            query: Matrix::zeros(m, m),
            key: Matrix::zeros(m, m),
            value: Matrix::zeros(m, m),
            output: Matrix::zeros(m, m),
            ffn_in: Matrix::zeros(m, h),
            ffn_in_bias: Matrix::zeros(1, h),
            ffn_out: Matrix::zeros(h, m),
            ffn_out_bias: Matrix::zeros(1, m),
            head: Matrix::zeros(m, d),
            head_bias: Matrix::zeros(1, d),
            lora: None,
            shape,
        })
    }

    /// Random initialization; the output head starts at zero so every bit
    /// starts at probability ½.
    pub fn init(shape: PredictorShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, h) = (p.shape.width, p.shape.bits, p.shape.hidden());
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        p.prompt_table = Matrix::random_normal(p.shape.vocab, m, 1.0, &mut rng);
        p.input_proj = Matrix::random_normal(d, m, inv(d), &mut rng);
        for pos in &mut p.positions {
            *pos = Matrix::random_normal(pos.rows(), m, 0.1, &mut rng);
        }
        p.scale_embed = Matrix::random_normal(p.shape.schedule.len(), m, 0.1, &mut rng);
        p.query = Matrix::random_normal(m, m, inv(m), &mut rng);
        p.key = Matrix::random_normal(m, m, inv(m), &mut rng);
        p.value = Matrix::random_normal(m, m, inv(m), &mut rng);
        p.output = Matrix::random_normal(m, m, inv(m), &mut rng);
        p.ffn_in = Matrix::random_normal(m, h, inv(m), &mut rng);
        p.ffn_out = Matrix::random_normal(h, m, inv(h), &mut rng);
        Ok(p)
    }

    pub fn shape(&self) -> &PredictorShape {
        &self.shape
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.shape.schedule
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn bits(&self) -> usize {
        self.shape.bits
    }

    /// Base tensors in serialization order (adapters excluded).
    pub fn base_tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.prompt_table, &self.input_proj, &self.input_bias];
        out.extend(self.positions.iter());
        out.extend([
            &self.scale_embed,
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.head,
            &self.head_bias,
        ]);
        out
    }

    pub fn base_tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.prompt_table, &mut self.input_proj, &mut self.input_bias];
        out.extend(self.positions.iter_mut());
        out.extend([
            &mut self.scale_embed,
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.head,
            &mut self.head_bias,
        ]);
        out
    }

    pub fn with_lora(mut self, lora: Option<LoraFactors>) -> Result<Self> {
        if let Some(l) = &lora {
            l.check(self.shape.width)?;
        }
        self.lora = lora;
        Ok(self)
    }

    fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.shape.clone()).expect("shape already validated");
        z.lora = self.lora.as_ref().map(LoraFactors::zeros_like);
        z
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .base_tensors()
            .into_iter()
            .chain(self.lora.iter().flat_map(|l| l.tensors()))
            .all(|t| t.data().iter().all(|v| v.is_finite()));
        if !finite {
            return invalid("predictor parameters contain non-finite values");
        }
        Ok(())
    }

    /// Checks tensor shapes against the declared architecture.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::zeros(self.shape.clone())?;
        for (a, b) in self.base_tensors().into_iter().zip(reference.base_tensors()) {
            if a.shape() != b.shape() {
                return invalid(format!("tensor shape {:?} does not match expected {:?}", a.shape(), b.shape()));
            }
        }
        if let Some(l) = &self.lora {
            l.check(self.shape.width)?;
        }
        self.check_finite()
    }
}

/// Effective FFN matrices, including adapter deltas when present.
pub fn effective_ffn_weights(params: &PredictorParams) -> (Matrix, Matrix) {
    match &params.lora {
        None => (params.ffn_in.clone(), params.ffn_out.clone()),
        Some(l) => {
            let (d1, d2) = l.deltas();
            (params.ffn_in.plus(&d1), params.ffn_out.plus(&d2))
        }
    }
}

/// Prompt rows: a fixed part looked up from the prompt table, followed by
/// free learnable rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    rows: Matrix,
    fixed: usize,
}

impl PromptEmbedding {
    pub fn compose(params: &PredictorParams, ids: &[usize], learnable: Option<&Matrix>) -> Result<Self> {
        let m = params.width();
        let extra = learnable.map_or(0, Matrix::rows);
        if ids.is_empty() && extra == 0 {
            return invalid("prompt must have at least one row");
        }
        if let Some(l) = learnable {
            if l.cols() != m {
                return invalid(format!("learnable prompt width {} does not match model width {m}", l.cols()));
            }
        }
        let mut rows = Matrix::zeros(ids.len() + extra, m);
        for (r, &id) in ids.iter().enumerate() {
            if id >= params.prompt_table.rows() {
                return invalid(format!("prompt id {id} outside vocabulary of {}", params.prompt_table.rows()));
            }
            rows.row_mut(r).copy_from_slice(params.prompt_table.row(id));
        }
        if let Some(l) = learnable {
            for r in 0..extra {
                rows.row_mut(ids.len() + r).copy_from_slice(l.row(r));
            }
        }
        Ok(Self { rows, fixed: ids.len() })
    }

    /// Arbitrary rows, all treated as fixed.
    pub fn from_rows(rows: Matrix) -> Result<Self> {
        if rows.rows() == 0 {
            return invalid("prompt must have at least one row");
        }
        let fixed = rows.rows();
        Ok(Self { rows, fixed })
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn fixed_len(&self) -> usize {
        self.fixed
    }

    pub fn learnable_len(&self) -> usize {
        self.rows.rows() - self.fixed
    }

    pub fn learnable(&self) -> Matrix {
        let m = self.rows.cols();
        Matrix::from_vec(self.learnable_len(), m, self.rows.data()[self.fixed * m..].to_vec())
    }

    pub fn learnable_slice_mut(&mut self) -> &mut [f64] {
        let m = self.rows.cols();
        &mut self.rows.data_mut()[self.fixed * m..]
    }

    pub fn learnable_slice(&self) -> &[f64] {
        let m = self.rows.cols();
        &self.rows.data()[self.fixed * m..]
    }
}

/// Pre-sigmoid per-bit logits for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsMap(FeatureMap);

impl LogitsMap {
    pub fn new(map: FeatureMap) -> Self {
        Self(map)
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }
}

/// How bits are drawn from logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Bit set iff logit ≥ 0.
    Greedy,
    /// Bit set with probability σ(logit), from a ChaCha8 stream.
    Bernoulli { seed: u64, stream: u64 },
}

impl Sampling {
    /// Same seed, stream selected by scale index so each scale draws
    /// independent bits.
    pub fn for_scale(self, k: usize) -> Sampling {
        match self {
            Sampling::Greedy => Sampling::Greedy,
            Sampling::Bernoulli { seed, .. } => Sampling::Bernoulli { seed, stream: k as u64 },
        }
    }
}

pub fn sample_tokens(logits: &LogitsMap, mode: Sampling) -> TokenMap {
    let map = logits.map();
    let d = map.depth();
    let codes: Vec<u32> = match mode {
        Sampling::Greedy => map.vectors().map(crate::bsq::quantize_bsq).collect(),
        Sampling::Bernoulli { seed, stream } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            map.vectors()
                .map(|v| {
                    v.iter().enumerate().fold(0u32, |code, (b, &l)| {
                        if rng.random::<f64>() < sigmoid(l) {
                            code | (1 << b)
                        } else {
                            code
                        }
                    })
                })
                .collect()
        }
    };
    TokenMap::new(map.height(), map.width(), d, codes).expect("logit depth already bounded")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Prompt-dependent quantities shared by every position.
struct Prepared {
    keys: Matrix,
    values: Matrix,
    ffn_in: Matrix,
    ffn_out: Matrix,
    inv_sqrt_m: f64,
}

impl Prepared {
    fn new(params: &PredictorParams, prompt: &PromptEmbedding) -> Result<Self> {
        if prompt.rows.cols() != params.width() {
            return invalid(format!(
                "prompt width {} does not match model width {}",
                prompt.rows.cols(),
                params.width()
            ));
        }
        let (ffn_in, ffn_out) = effective_ffn_weights(params);
        Ok(Self {
            keys: prompt.rows.matmul(&params.key),
            values: prompt.rows.matmul(&params.value),
            ffn_in,
            ffn_out,
            inv_sqrt_m: 1.0 / (params.width() as f64).sqrt(),
        })
    }
}

/// Per-position activations, reused across positions.
struct Scratch {
    e: Vec<f64>,
    q: Vec<f64>,
    attn: Vec<f64>,
    att: Vec<f64>,
    h1: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
    h2: Vec<f64>,
    tmp_m: Vec<f64>,
    logits: Vec<f64>,
    // backward
    dh2: Vec<f64>,
    dh1: Vec<f64>,
    dg: Vec<f64>,
    du: Vec<f64>,
    datt: Vec<f64>,
    da: Vec<f64>,
    dq: Vec<f64>,
}

impl Scratch {
    fn new(m: usize, h: usize, d: usize, n: usize) -> Self {
        Self {
            e: vec![0.0; m],
            q: vec![0.0; m],
            attn: vec![0.0; n],
            att: vec![0.0; m],
            h1: vec![0.0; m],
            u: vec![0.0; h],
            g: vec![0.0; h],
            h2: vec![0.0; m],
            tmp_m: vec![0.0; m],
            logits: vec![0.0; d],
            dh2: vec![0.0; m],
            dh1: vec![0.0; m],
            dg: vec![0.0; h],
            du: vec![0.0; h],
            datt: vec![0.0; m],
            da: vec![0.0; n],
            dq: vec![0.0; m],
        }
    }
}

fn check_context(params: &PredictorParams, context: &FeatureMap, k: usize) -> Result<()> {
    let schedule = params.schedule();
    if k >= schedule.len() {
        return invalid(format!("scale index {k} outside schedule of {} scales", schedule.len()));
    }
    if context.dims() != schedule.scale(k) || context.depth() != params.bits() {
        return invalid(format!(
            "context {}x{}x{} does not match scale {k} ({:?}, depth {})",
            context.height(),
            context.width(),
            context.depth(),
            schedule.scale(k),
            params.bits()
        ));
    }
    Ok(())
}

/// Forward pass for one position; fills `s.logits` and all activations.
fn forward_position(params: &PredictorParams, prep: &Prepared, s: &mut Scratch, ctx: &[f64], k: usize, pos: usize) {
    vec_mat(ctx, &params.input_proj, &mut s.e);
    let pos_row = params.positions[k].row(pos);
    let scale_row = params.scale_embed.row(k);
    for (idx, e) in s.e.iter_mut().enumerate() {
        *e += params.input_bias.data()[idx] + pos_row[idx] + scale_row[idx];
    }

    vec_mat(&s.e, &params.query, &mut s.q);
    mat_vec(&prep.keys, &s.q, &mut s.attn);
    let mut max = f64::NEG_INFINITY;
    for a in s.attn.iter_mut() {
        *a *= prep.inv_sqrt_m;
        max = max.max(*a);
    }
    let mut total = 0.0;
    for a in s.attn.iter_mut() {
        *a = (*a - max).exp();
        total += *a;
    }
    for a in s.attn.iter_mut() {
        *a /= total;
    }
    s.att.fill(0.0);
    for (j, &a) in s.attn.iter().enumerate() {
        axpy(a, prep.values.row(j), &mut s.att);
    }
    vec_mat(&s.att, &params.output, &mut s.tmp_m);
    for ((h1, e), o) in s.h1.iter_mut().zip(&s.e).zip(&s.tmp_m) {
        *h1 = e + o;
    }

    vec_mat(&s.h1, &prep.ffn_in, &mut s.u);
    for ((u, g), b) in s.u.iter_mut().zip(s.g.iter_mut()).zip(params.ffn_in_bias.data()) {
        *u += b;
        *g = gelu(*u);
    }
    vec_mat(&s.g, &prep.ffn_out, &mut s.tmp_m);
    for (((h2, h1), f), b) in s.h2.iter_mut().zip(&s.h1).zip(&s.tmp_m).zip(params.ffn_out_bias.data()) {
        *h2 = h1 + f + b;
    }

    vec_mat(&s.h2, &params.head, &mut s.logits);
    for (l, b) in s.logits.iter_mut().zip(params.head_bias.data()) {
        *l += b;
    }
}

/// Gradients accumulated before being folded into parameter tensors.
struct Accum {
    params: PredictorParams,
    dkeys: Matrix,
    dvalues: Matrix,
    dffn_in: Matrix,
    dffn_out: Matrix,
}

/// Backward pass for one position given `dlogits`; activations must be from
/// the matching [`forward_position`] call.
#[allow(clippy::too_many_arguments)]
fn backward_position(
    params: &PredictorParams,
    prep: &Prepared,
    s: &mut Scratch,
    acc: &mut Accum,
    ctx: &[f64],
    dlogits: &[f64],
    k: usize,
    pos: usize,
) {
    let g = &mut acc.params;
    add_outer(&mut g.head, &s.h2, dlogits);
    axpy(1.0, dlogits, g.head_bias.data_mut());
    mat_vec(&params.head, dlogits, &mut s.dh2);

    // FFN branch
    add_outer(&mut acc.dffn_out, &s.g, &s.dh2);
    axpy(1.0, &s.dh2, g.ffn_out_bias.data_mut());
    mat_vec(&prep.ffn_out, &s.dh2, &mut s.dg);
    for ((du, dg), u) in s.du.iter_mut().zip(&s.dg).zip(&s.u) {
        *du = dg * gelu_grad(*u);
    }
    add_outer(&mut acc.dffn_in, &s.h1, &s.du);
    axpy(1.0, &s.du, g.ffn_in_bias.data_mut());
    mat_vec(&prep.ffn_in, &s.du, &mut s.tmp_m);
    for ((dh1, dh2), t) in s.dh1.iter_mut().zip(&s.dh2).zip(&s.tmp_m) {
        *dh1 = dh2 + t;
    }

    // attention branch; dh1 is also the gradient of e through the residual
    add_outer(&mut g.output, &s.att, &s.dh1);
    mat_vec(&params.output, &s.dh1, &mut s.datt);
    for (j, &a) in s.attn.iter().enumerate() {
        axpy(a, &s.datt, acc.dvalues.row_mut(j));
        s.da[j] = dot(&s.datt, prep.values.row(j));
    }
    let mean: f64 = s.attn.iter().zip(&s.da).map(|(a, da)| a * da).sum();
    s.dq.fill(0.0);
    for (j, &a) in s.attn.iter().enumerate() {
        let ds = a * (s.da[j] - mean) * prep.inv_sqrt_m;
        axpy(ds, prep.keys.row(j), &mut s.dq);
        axpy(ds, &s.q, acc.dkeys.row_mut(j));
    }
    add_outer(&mut g.query, &s.e, &s.dq);
    mat_vec(&params.query, &s.dq, &mut s.tmp_m);
    // de = dh1 + Wq·dq
    for (t, dh1) in s.tmp_m.iter_mut().zip(&s.dh1) {
        *t += dh1;
    }
    let de = &s.tmp_m;
    add_outer(&mut g.input_proj, ctx, de);
    axpy(1.0, de, g.input_bias.data_mut());
    axpy(1.0, de, g.positions[k].row_mut(pos));
    axpy(1.0, de, g.scale_embed.row_mut(k));
}

/// Logits for scale `k` given the context at that scale's resolution.
pub fn predict_next_scale(
    params: &PredictorParams,
    prompt: &PromptEmbedding,
    context: &FeatureMap,
    k: usize,
) -> Result<LogitsMap> {
    check_context(params, context, k)?;
    let prep = Prepared::new(params, prompt)?;
    let d = params.bits();
    let mut s = Scratch::new(params.width(), params.shape.hidden(), d, prompt.len());
    let (h, w) = context.dims();
    let mut out = FeatureMap::zeros(h, w, d);
    for i in 0..h {
        for j in 0..w {
            forward_position(params, &prep, &mut s, context.at(i, j), k, i * w + j);
            out.at_mut(i, j).copy_from_slice(&s.logits);
        }
    }
    Ok(LogitsMap(out))
}

/// Attention weight on prompt row `row` at every position of scale `k`.
pub fn cross_attention_map(
    params: &PredictorParams,
    prompt: &PromptEmbedding,
    context: &FeatureMap,
    k: usize,
    row: usize,
) -> Result<FeatureMap> {
    if row >= prompt.len() {
        return invalid(format!("prompt row {row} out of range for {} rows", prompt.len()));
    }
    check_context(params, context, k)?;
    let prep = Prepared::new(params, prompt)?;
    let mut s = Scratch::new(params.width(), params.shape.hidden(), params.bits(), prompt.len());
    let (h, w) = context.dims();
    let mut out = FeatureMap::zeros(h, w, 1);
    for i in 0..h {
        for j in 0..w {
            forward_position(params, &prep, &mut s, context.at(i, j), k, i * w + j);
            out.at_mut(i, j)[0] = s.attn[row];
        }
    }
    Ok(out)
}

/// Context for scale `k`: the full-resolution cumulative feature resampled
/// to that scale.
pub fn context_for_scale(cumulative: &FeatureMap, schedule: &ScaleSchedule, k: usize) -> FeatureMap {
    bilinear_resample(cumulative, schedule.scale(k)).expect("schedule dims are positive")
}

/// Pure conditional generation over the whole schedule.
pub fn generate(params: &PredictorParams, prompt: &PromptEmbedding, sampling: Sampling) -> Result<TokenPyramid> {
    let schedule = params.schedule().clone();
    let full = schedule.full();
    let mut acc = FeatureMap::zeros(full.0, full.1, params.bits());
    let mut maps = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let ctx = context_for_scale(&acc, &schedule, k);
        let tokens = sample_tokens(&predict_next_scale(params, prompt, &ctx, k)?, sampling.for_scale(k));
        acc.add_assign(&tokens.upsampled(full))?;
        maps.push(tokens);
    }
    TokenPyramid::new(schedule, maps)
}

/// Ground-truth contexts and targets for teacher-forced evaluation.
#[derive(Debug, Clone)]
pub struct TeacherForcing {
    contexts: Vec<FeatureMap>,
    targets: Vec<TokenMap>,
}

impl TeacherForcing {
    pub fn new(pyramid: &TokenPyramid) -> Self {
        let schedule = pyramid.schedule();
        let full = schedule.full();
        let mut contexts = Vec::with_capacity(pyramid.len());
        let mut acc = FeatureMap::zeros(full.0, full.1, pyramid.depth());
        for (k, map) in pyramid.maps().iter().enumerate() {
            contexts.push(context_for_scale(&acc, schedule, k));
            acc.add_assign(&map.upsampled(full)).expect("matching shapes");
        }
        Self { contexts, targets: pyramid.maps().to_vec() }
    }

    pub fn contexts(&self) -> &[FeatureMap] {
        &self.contexts
    }

    pub fn targets(&self) -> &[TokenMap] {
        &self.targets
    }

    fn check(&self, params: &PredictorParams) -> Result<()> {
        let schedule = params.schedule();
        if self.targets.len() != schedule.len()
            || self.targets.iter().zip(schedule.scales()).any(|(t, &dims)| t.dims() != dims)
        {
            return invalid("token pyramid does not match the predictor's schedule");
        }
        if self.targets[0].depth() != params.bits() {
            return invalid(format!(
                "token depth {} does not match predictor bits {}",
                self.targets[0].depth(),
                params.bits()
            ));
        }
        Ok(())
    }

    /// Teacher-forced logits for every scale.
    pub fn logits(&self, params: &PredictorParams, prompt: &PromptEmbedding) -> Result<Vec<LogitsMap>> {
        self.check(params)?;
        self.contexts
            .iter()
            .enumerate()
            .map(|(k, ctx)| predict_next_scale(params, prompt, ctx, k))
            .collect()
    }
}

/// KL regularizer toward reference logits (usually the unadapted model).
#[derive(Debug, Clone, Copy)]
pub struct KlAnchor<'a> {
    pub reference: &'a [LogitsMap],
    pub weight: f64,
}

/// Parameter and prompt-row gradients of the objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: PredictorParams,
    pub prompt: Matrix,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Mean per-bit binary cross-entropy (averaged per scale, then over scales).
    pub ce: f64,
    /// Mean per-bit KL(adapted ‖ reference) under the same weighting; 0 without an anchor.
    pub kl: f64,
    /// `ce + weight·kl`.
    pub objective: f64,
    /// Fraction of bits where the greedy decision matches the target.
    pub bit_accuracy: f64,
    pub grads: Option<Gradients>,
}

/// Teacher-forced cross-entropy (plus optional KL) and, if requested, its
/// gradients with respect to every parameter and every prompt row.
///
/// Each scale contributes the mean over its positions and bits, and the
/// scales are averaged, so `ce = ln 2` whenever all logits are zero.
pub fn evaluate(
    params: &PredictorParams,
    prompt: &PromptEmbedding,
    tf: &TeacherForcing,
    anchor: Option<KlAnchor<'_>>,
    with_grads: bool,
) -> Result<Evaluation> {
    tf.check(params)?;
    if let Some(a) = anchor {
        if a.reference.len() != tf.targets.len()
            || a.reference.iter().zip(&tf.targets).any(|(l, t)| l.dims() != t.dims())
        {
            return invalid("KL reference logits do not match the token pyramid");
        }
    }
    let prep = Prepared::new(params, prompt)?;
    let (m, h, d, n) = (params.width(), params.shape.hidden(), params.bits(), prompt.len());
    let mut s = Scratch::new(m, h, d, n);
    let mut acc = with_grads.then(|| Accum {
        params: params.zeros_like(),
        dkeys: Matrix::zeros(n, m),
        dvalues: Matrix::zeros(n, m),
        dffn_in: Matrix::zeros(m, h),
        dffn_out: Matrix::zeros(h, m),
    });
    let k_count = tf.targets.len() as f64;
    let kl_weight = anchor.map_or(0.0, |a| a.weight);
    let (mut ce, mut kl) = (0.0, 0.0);
    let (mut correct, mut total_bits) = (0usize, 0usize);
    let mut dlogits = vec![0.0; d];

    for (k, (ctx, target)) in tf.contexts.iter().zip(&tf.targets).enumerate() {
        let (hk, wk) = target.dims();
        let norm = 1.0 / (k_count * (hk * wk * d) as f64);
        let (mut ce_k, mut kl_k) = (0.0, 0.0);
        for i in 0..hk {
            for j in 0..wk {
                let pos = i * wk + j;
                forward_position(params, &prep, &mut s, ctx.at(i, j), k, pos);
                let code = target.code(i, j);
                let reference = anchor.map(|a| a.reference[k].map().at(i, j));
                for b in 0..d {
                    let l = s.logits[b];
                    let t = if code >> b & 1 == 1 { 1.0 } else { 0.0 };
                    ce_k += softplus(l) - t * l;
                    let p = sigmoid(l);
                    let mut grad = p - t;
                    if let Some(r) = reference {
                        let l0 = r[b];
                        kl_k += p * (l - l0) + softplus(l0) - softplus(l);
                        grad += kl_weight * p * (1.0 - p) * (l - l0);
                    }
                    dlogits[b] = grad * norm;
                    if (l >= 0.0) == (t == 1.0) {
                        correct += 1;
                    }
                }
                total_bits += d;
                if let Some(acc) = acc.as_mut() {
                    backward_position(params, &prep, &mut s, acc, ctx.at(i, j), &dlogits, k, pos);
                }
            }
        }
        ce += ce_k * norm;
        kl += kl_k * norm;
    }

    let grads = acc.map(|acc| {
        let Accum { params: mut g, dkeys, dvalues, dffn_in, dffn_out } = acc;
        let rows = prompt.rows();
        g.key.add_assign(&rows.t_matmul(&dkeys));
        g.value.add_assign(&rows.t_matmul(&dvalues));
        let mut dprompt = dkeys.matmul_t(&params.key);
        dprompt.add_assign(&dvalues.matmul_t(&params.value));
        if let (Some(l), Some(gl)) = (&params.lora, g.lora.as_mut()) {
            gl.a1 = dffn_in.matmul_t(&l.b1);
            gl.b1 = l.a1.t_matmul(&dffn_in);
            gl.a2 = dffn_out.matmul_t(&l.b2);
            gl.b2 = l.a2.t_matmul(&dffn_out);
        }
        g.ffn_in = dffn_in;
        g.ffn_out = dffn_out;
        Gradients { params: g, prompt: dprompt }
    });

    Ok(Evaluation {
        ce,
        kl,
        objective: ce + kl_weight * kl,
        bit_accuracy: correct as f64 / total_bits as f64,
        grads,
    })
}

/// One training example: prompt ids (e.g. `[prompt, instruction]`) and the
/// token pyramid the prompt should generate.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub prompt_ids: Vec<usize>,
    pub pyramid: TokenPyramid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub optimizer: AdamWConfig,
    /// Stop once the mean training loss is at or below this value.
    pub target_loss: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            optimizer: AdamWConfig { lr: 1e-2, beta1: 0.9, beta2: 0.97, eps: 1e-8, weight_decay: 0.0 },
            target_loss: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: PredictorParams,
    /// Mean training loss before each optimizer step.
    pub loss_trace: Vec<f64>,
    /// Mean training loss of the returned parameters.
    pub final_loss: f64,
}

fn dataset_loss(
    params: &PredictorParams,
    samples: &[(Vec<usize>, TeacherForcing)],
    with_grads: bool,
) -> Result<(f64, Option<PredictorParams>)> {
    let count = samples.len() as f64;
    let mut loss = 0.0;
    let mut total: Option<PredictorParams> = None;
    for (ids, tf) in samples {
        let prompt = PromptEmbedding::compose(params, ids, None)?;
        let eval = evaluate(params, &prompt, tf, None, with_grads)?;
        loss += eval.ce / count;
        if let Some(g) = eval.grads {
            let mut gp = g.params;
            for (r, &id) in ids.iter().enumerate() {
                axpy(1.0, g.prompt.row(r), gp.prompt_table.row_mut(id));
            }
            match total.as_mut() {
                None => total = Some(gp),
                Some(t) => {
                    for (a, b) in t.base_tensors_mut().into_iter().zip(gp.base_tensors()) {
                        a.add_assign(b);
                    }
                }
            }
        }
    }
    Ok((loss, total))
}

/// Teacher-forced training of every base parameter on the dataset
/// (full batch, per-sample losses averaged).
pub fn train_predictor(shape: PredictorShape, dataset: &[TrainSample], config: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return invalid("training dataset is empty");
    }
    let mut params = PredictorParams::init(shape, config.seed)?;
    let mut samples = Vec::with_capacity(dataset.len());
    for s in dataset {
        if s.pyramid.schedule() != params.schedule() {
            return invalid("training pyramid schedule does not match the predictor");
        }
        if s.prompt_ids.is_empty() {
            return invalid("training sample has no prompt ids");
        }
        let tf = TeacherForcing::new(&s.pyramid);
        tf.check(&params)?;
        PromptEmbedding::compose(&params, &s.prompt_ids, None)?;
        samples.push((s.prompt_ids.clone(), tf));
    }
    let sizes: Vec<usize> = params.base_tensors().iter().map(|t| t.data().len()).collect();
    let mut opt = AdamW::new(config.optimizer, &sizes);
    let mut trace = Vec::new();
    for _ in 0..config.iterations {
        let (loss, grads) = dataset_loss(&params, &samples, true)?;
        if loss <= config.target_loss {
            break;
        }
        trace.push(loss);
        let grads = grads.expect("gradients requested");
        let g: Vec<&[f64]> = grads.base_tensors().into_iter().map(Matrix::data).collect();
        let mut p: Vec<&mut [f64]> = params.base_tensors_mut().into_iter().map(Matrix::data_mut).collect();
        opt.step(&mut p, &g);
    }
    let (final_loss, _) = dataset_loss(&params, &samples, false)?;
    params.check_finite()?;
    Ok(TrainReport { params, loss_trace: trace, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsq::tokenize;
    use rand::Rng;

    pub(crate) fn tiny_shape() -> PredictorShape {
        PredictorShape {
            width: 8,
            bits: 4,
            vocab: 3,
            schedule: ScaleSchedule::new(vec![(1, 1), (2, 2)]).unwrap(),
        }
    }

    fn random_pyramid(schedule: &ScaleSchedule, d: usize, seed: u64) -> TokenPyramid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = schedule.full();
        let f = FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        tokenize(&f, schedule).unwrap().0
    }

    fn randomized(shape: PredictorShape, seed: u64, lora_rank: Option<usize>) -> PredictorParams {
        let mut p = PredictorParams::init(shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        p.head = Matrix::random_normal(p.width(), p.bits(), 0.5, &mut rng);
        p.head_bias = Matrix::random_normal(1, p.bits(), 0.5, &mut rng);
        p.ffn_in_bias = Matrix::random_normal(1, p.shape.hidden(), 0.3, &mut rng);
        p.ffn_out_bias = Matrix::random_normal(1, p.width(), 0.3, &mut rng);
        p.input_bias = Matrix::random_normal(1, p.width(), 0.3, &mut rng);
        if let Some(r) = lora_rank {
            let m = p.width();
            let lora = LoraFactors {
                a1: Matrix::random_normal(m, r, 0.3, &mut rng),
                b1: Matrix::random_normal(r, 4 * m, 0.3, &mut rng),
                a2: Matrix::random_normal(4 * m, r, 0.3, &mut rng),
                b2: Matrix::random_normal(r, m, 0.3, &mut rng),
            };
            p = p.with_lora(Some(lora)).unwrap();
        }
        p
    }

    #[test]
    fn zero_network_gives_zero_logits_and_ln2_loss() {
        let p = PredictorParams::zeros(tiny_shape()).unwrap();
        let prompt = PromptEmbedding::compose(&p, &[0, 1], None).unwrap();
        let ctx = FeatureMap::filled(2, 2, 4, 0.3);
        let l = predict_next_scale(&p, &prompt, &ctx, 1).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.0));
        let tf = TeacherForcing::new(&random_pyramid(p.schedule(), 4, 1));
        let eval = evaluate(&p, &prompt, &tf, None, false).unwrap();
        assert!((eval.ce - 2f64.ln()).abs() < 1e-12);
        assert_eq!(eval.kl, 0.0);
    }

    #[test]
    fn zero_b_lora_matches_disabled_bitwise() {
        let p = randomized(tiny_shape(), 3, None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adapted = p.clone().with_lora(Some(LoraFactors::init(8, 2, &mut rng))).unwrap();
        let prompt = PromptEmbedding::compose(&p, &[2, 0], None).unwrap();
        let ctx = FeatureMap::new(2, 2, 4, (0..16).map(|i| (i as f64).sin()).collect()).unwrap();
        let a = predict_next_scale(&p, &prompt, &ctx, 1).unwrap();
        let b = predict_next_scale(&adapted, &prompt, &ctx, 1).unwrap();
        let bits = |l: &LogitsMap| l.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    /// Independent evaluation of the forward pass with plain loops.
    fn reference_logits(p: &PredictorParams, prompt: &Matrix, ctx: &FeatureMap, k: usize) -> Vec<f64> {
        let m = p.width();
        let (w1, w2) = match &p.lora {
            None => (p.ffn_in.clone(), p.ffn_out.clone()),
            Some(l) => (p.ffn_in.plus(&l.a1.matmul(&l.b1)), p.ffn_out.plus(&l.a2.matmul(&l.b2))),
        };
        let lin = |x: &[f64], w: &Matrix| -> Vec<f64> {
            (0..w.cols()).map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum()).collect()
        };
        let mut out = Vec::new();
        let (_, wk) = ctx.dims();
        for (pos, c) in ctx.vectors().enumerate() {
            let _ = wk;
            let mut e = lin(c, &p.input_proj);
            for i in 0..m {
                e[i] += p.input_bias.get(0, i) + p.positions[k].get(pos, i) + p.scale_embed.get(k, i);
            }
            let q = lin(&e, &p.query);
            let scores: Vec<f64> = (0..prompt.rows())
                .map(|j| {
                    let key = lin(prompt.row(j), &p.key);
                    q.iter().zip(&key).map(|(a, b)| a * b).sum::<f64>() / (m as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            let mut att = vec![0.0; m];
            for j in 0..prompt.rows() {
                let v = lin(prompt.row(j), &p.value);
                for i in 0..m {
                    att[i] += ex[j] / z * v[i];
                }
            }
            let o = lin(&att, &p.output);
            let h1: Vec<f64> = e.iter().zip(&o).map(|(a, b)| a + b).collect();
            let u: Vec<f64> = lin(&h1, &w1).iter().zip(p.ffn_in_bias.data()).map(|(a, b)| a + b).collect();
            let g: Vec<f64> = u
                .iter()
                .map(|&x| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh()))
                .collect();
            let f = lin(&g, &w2);
            let h2: Vec<f64> = (0..m).map(|i| h1[i] + f[i] + p.ffn_out_bias.get(0, i)).collect();
            let l = lin(&h2, &p.head);
            out.extend(l.iter().zip(p.head_bias.data()).map(|(a, b)| a + b));
        }
        out
    }

    #[test]
    fn forward_matches_reference() {
        for lora in [None, Some(2)] {
            let p = randomized(tiny_shape(), 5, lora);
            let prompt = PromptEmbedding::compose(&p, &[1, 2, 0], None).unwrap();
            let ctx = FeatureMap::new(2, 2, 4, (0..16).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
            let got = predict_next_scale(&p, &prompt, &ctx, 1).unwrap();
            let want = reference_logits(&p, prompt.rows(), &ctx, 1);
            for (a, b) in got.values().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn greedy_sampling_rules() {
        let zero = LogitsMap(FeatureMap::zeros(2, 2, 3));
        assert!(sample_tokens(&zero, Sampling::Greedy).codes().iter().all(|&c| c == 0b111));
        let tokens = TokenMap::new(2, 3, 5, vec![0, 31, 5, 9, 17, 2]).unwrap();
        let logits = LogitsMap(tokens.dequantize());
        assert_eq!(sample_tokens(&logits, Sampling::Greedy), tokens);
    }

    /// Smallest `t` with `P(Binomial(n, p) > t) < bound`.
    fn binomial_tail_threshold(n: u64, p: f64, bound: f64) -> u64 {
        let mut pmf = (1.0 - p).powf(n as f64);
        let mut cdf = pmf;
        let mut t = 0;
        while 1.0 - cdf >= bound {
            pmf *= (n - t) as f64 / (t + 1) as f64 * p / (1.0 - p);
            cdf += pmf;
            t += 1;
        }
        t
    }

    #[test]
    fn bernoulli_saturated_logits() {
        let logits = LogitsMap(FeatureMap::filled(100, 100, 1, 10.0));
        let tokens = sample_tokens(&logits, Sampling::Bernoulli { seed: 42, stream: 0 });
        let unset = tokens.codes().iter().filter(|&&c| c == 0).count() as u64;
        let threshold = binomial_tail_threshold(10_000, sigmoid(-10.0), 1e-6);
        assert!(unset <= threshold, "{unset} unset bits, threshold {threshold}");
    }

    #[test]
    fn bernoulli_is_reproducible() {
        let logits = LogitsMap(FeatureMap::new(4, 4, 2, (0..32).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap());
        let a = sample_tokens(&logits, Sampling::Bernoulli { seed: 7, stream: 3 });
        let b = sample_tokens(&logits, Sampling::Bernoulli { seed: 7, stream: 3 });
        assert_eq!(a, b);
        let c = sample_tokens(&logits, Sampling::Bernoulli { seed: 8, stream: 3 });
        assert_ne!(a, c);
    }

    #[test]
    fn attention_maps() {
        let p = randomized(tiny_shape(), 9, None);
        let ctx = FeatureMap::new(2, 2, 4, (0..16).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap();

        let single = PromptEmbedding::compose(&p, &[1], None).unwrap();
        let m = cross_attention_map(&p, &single, &ctx, 1, 0).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));

        let same = PromptEmbedding::compose(&p, &[2, 2, 2, 2], None).unwrap();
        let m = cross_attention_map(&p, &same, &ctx, 1, 3).unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let prompt = PromptEmbedding::compose(&p, &[0, 1, 2], None).unwrap();
        let mut sum = FeatureMap::zeros(2, 2, 1);
        for j in 0..3 {
            let map = cross_attention_map(&p, &prompt, &ctx, 1, j).unwrap();
            // independent softmax
            for (pos, c) in ctx.vectors().enumerate() {
                let mut e = vec![0.0; 8];
                vec_mat(c, &p.input_proj, &mut e);
                for i in 0..8 {
                    e[i] += p.input_bias.get(0, i) + p.positions[1].get(pos, i) + p.scale_embed.get(1, i);
                }
                let q = { let mut q = vec![0.0; 8]; vec_mat(&e, &p.query, &mut q); q };
                let scores: Vec<f64> = (0..3)
                    .map(|r| {
                        let mut key = vec![0.0; 8];
                        vec_mat(prompt.rows().row(r), &p.key, &mut key);
                        dot(&q, &key) / 8f64.sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                assert!((map.data()[pos] - scores[j].exp() / z).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&map.data()[pos]));
            }
            sum.add_assign(&map).unwrap();
        }
        assert!(sum.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(cross_attention_map(&p, &prompt, &ctx, 1, 3).is_err());
    }

    #[test]
    fn effective_weights() {
        let p = randomized(tiny_shape(), 1, None);
        let (w1, w2) = effective_ffn_weights(&p);
        assert_eq!((w1, w2), (p.ffn_in.clone(), p.ffn_out.clone()));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zero_b = p.clone().with_lora(Some(LoraFactors::init(8, 3, &mut rng))).unwrap();
        let (w1, w2) = effective_ffn_weights(&zero_b);
        assert_eq!((w1, w2), (p.ffn_in.clone(), p.ffn_out.clone()));

        // full rank r = min(m, 4m) = m
        let q = randomized(tiny_shape(), 1, Some(8));
        let l = q.lora.as_ref().unwrap();
        let (w1, w2) = effective_ffn_weights(&q);
        for r in 0..8 {
            for c in 0..32 {
                let direct: f64 = (0..8).map(|t| l.a1.get(r, t) * l.b1.get(t, c)).sum();
                assert!((w1.get(r, c) - q.ffn_in.get(r, c) - direct).abs() < 1e-12);
            }
        }
        for r in 0..32 {
            for c in 0..8 {
                let direct: f64 = (0..8).map(|t| l.a2.get(r, t) * l.b2.get(t, c)).sum();
                assert!((w2.get(r, c) - q.ffn_out.get(r, c) - direct).abs() < 1e-12);
            }
        }

        let low = randomized(tiny_shape(), 6, Some(2));
        let (d1, d2) = low.lora.as_ref().unwrap().deltas();
        assert!(d1.rank(1e-9) <= 2 && d2.rank(1e-9) <= 2);
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Central differences over every scalar of every tensor, including
    /// prompt rows and adapters, with and without the KL term.
    #[test]
    fn gradients_match_finite_differences() {
        let shape = tiny_shape();
        let pyramid = random_pyramid(&shape.schedule, 4, 21);
        let tf = TeacherForcing::new(&pyramid);
        let base = randomized(shape.clone(), 13, None);
        let p = randomized(shape, 13, Some(2));
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let learn = Matrix::random_normal(2, 8, 0.5, &mut rng);
        let prompt = PromptEmbedding::compose(&p, &[0, 2], Some(&learn)).unwrap();
        let reference = tf.logits(&base, &prompt).unwrap();
        let h = 1e-5;

        for anchor in [None, Some(KlAnchor { reference: &reference, weight: 0.7 })] {
            let eval = evaluate(&p, &prompt, &tf, anchor, true).unwrap();
            let grads = eval.grads.unwrap();
            let objective = |q: &PredictorParams, pr: &PromptEmbedding| evaluate(q, pr, &tf, anchor, false).unwrap().objective;

            let mut worst: f64 = 0.0;
            let base_count = p.base_tensors().len();
            for t in 0..base_count + 4 {
                let len = if t < base_count { p.base_tensors()[t].data().len() } else { p.lora.as_ref().unwrap().tensors()[t - base_count].data().len() };
                for idx in 0..len {
                    let bump = |delta: f64| {
                        let mut q = p.clone();
                        if t < base_count {
                            q.base_tensors_mut()[t].data_mut()[idx] += delta;
                        } else {
                            q.lora.as_mut().unwrap().tensors_mut()[t - base_count].data_mut()[idx] += delta;
                        }
                        objective(&q, &prompt)
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    let analytic = if t < base_count {
                        grads.params.base_tensors()[t].data()[idx]
                    } else {
                        grads.params.lora.as_ref().unwrap().tensors()[t - base_count].data()[idx]
                    };
                    worst = worst.max(relative_error(analytic, numeric));
                }
            }
            for idx in 0..prompt.rows().data().len() {
                let bump = |delta: f64| {
                    let mut pr = prompt.clone();
                    pr.rows.data_mut()[idx] += delta;
                    objective(&p, &pr)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                worst = worst.max(relative_error(grads.prompt.data()[idx], numeric));
            }
            assert!(worst <= 1e-4, "max relative error {worst}");
        }
    }

    #[test]
    fn context_validation() {
        let p = PredictorParams::zeros(tiny_shape()).unwrap();
        let prompt = PromptEmbedding::compose(&p, &[0], None).unwrap();
        assert!(predict_next_scale(&p, &prompt, &FeatureMap::zeros(2, 2, 4), 0).is_err());
        assert!(predict_next_scale(&p, &prompt, &FeatureMap::zeros(2, 2, 3), 1).is_err());
        assert!(predict_next_scale(&p, &prompt, &FeatureMap::zeros(2, 2, 4), 2).is_err());
        assert!(PromptEmbedding::compose(&p, &[3], None).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(train_predictor(tiny_shape(), &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn memorizes_one_sample() {
        let shape = PredictorShape { width: 16, bits: 4, vocab: 4, schedule: ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap() };
        let pyramid = random_pyramid(&shape.schedule, 4, 3);
        let sample = TrainSample { prompt_ids: vec![1, 0], pyramid: pyramid.clone() };
        let report = train_predictor(shape, &[sample], &TrainConfig { iterations: 1500, target_loss: 0.002, ..Default::default() }).unwrap();
        assert!((report.loss_trace[0] - 2f64.ln()).abs() < 1e-12);
        assert!(report.final_loss < 0.05);
        let prompt = PromptEmbedding::compose(&report.params, &[1, 0], None).unwrap();
        assert_eq!(generate(&report.params, &prompt, Sampling::Greedy).unwrap(), pyramid);
    }

    #[test]
    fn conditional_memorization_of_two_samples() {
        let shape = PredictorShape { width: 16, bits: 4, vocab: 4, schedule: ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap() };
        let a = random_pyramid(&shape.schedule, 4, 31);
        let b = random_pyramid(&shape.schedule, 4, 32);
        assert_ne!(a, b);
        let data = [
            TrainSample { prompt_ids: vec![1, 0], pyramid: a.clone() },
            TrainSample { prompt_ids: vec![2, 0], pyramid: b.clone() },
        ];
        let report = train_predictor(shape, &data, &TrainConfig { iterations: 2000, target_loss: 0.002, ..Default::default() }).unwrap();
        for (ids, want) in [([1, 0], &a), ([2, 0], &b)] {
            let prompt = PromptEmbedding::compose(&report.params, &ids, None).unwrap();
            assert_eq!(&generate(&report.params, &prompt, Sampling::Greedy).unwrap(), want);
        }
    }
}
