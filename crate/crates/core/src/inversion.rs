//! Two-stage inversion of a source token pyramid: first the learnable
//! prompt rows, then low-rank FFN adapters with a KL anchor to the frozen
//! base model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bsq::TokenPyramid;
use crate::error::{invalid, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::predictor::{evaluate, KlAnchor, LoraFactors, PredictorParams, PromptEmbedding, TeacherForcing};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub prompt_iterations: usize,
    pub lora_iterations: usize,
    pub optimizer: AdamWConfig,
    pub rank: usize,
    pub kl_weight: f64,
    pub learnable_rows: usize,
    /// Standard deviation of the initial learnable rows.
    pub prompt_init_std: f64,
}

impl InversionConfig {
    pub fn toy() -> Self {
        Self {
            prompt_iterations: 10,
            lora_iterations: 20,
            optimizer: AdamWConfig { lr: 1e-2, beta1: 0.9, beta2: 0.97, eps: 1e-8, weight_decay: 0.0 },
            rank: 4,
            kl_weight: 0.1,
            learnable_rows: 20,
            prompt_init_std: 0.02,
        }
    }

    pub fn paper() -> Self {
        let mut c = Self::toy();
        c.optimizer.lr = 4.6875e-5;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", o.lr));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return invalid(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return invalid("eps must be positive and weight decay non-negative");
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return invalid(format!("KL weight must be non-negative, got {}", self.kl_weight));
        }
        if self.rank == 0 || self.learnable_rows == 0 {
            return invalid("LoRA rank and learnable prompt rows must be positive");
        }
        if !(self.prompt_init_std >= 0.0 && self.prompt_init_std.is_finite()) {
            return invalid("prompt init std must be non-negative");
        }
        Ok(())
    }
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self::toy()
    }
}

/// Losses measured before an optimizer step (or after the last one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub ce: f64,
    pub kl: f64,
    pub bit_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct StageResult<T> {
    pub value: T,
    /// Entry `i` is measured before step `i + 1`.
    pub trace: Vec<TracePoint>,
    /// Measured after the last step.
    pub last: TracePoint,
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub learnable: Matrix,
    pub lora: LoraFactors,
    pub prompt_trace: Vec<TracePoint>,
    pub prompt_final: TracePoint,
    pub lora_trace: Vec<TracePoint>,
    pub lora_final: TracePoint,
    /// Greedy per-bit accuracy of the adapted model on the source pyramid.
    pub bit_accuracy: f64,
}

/// Teacher-forced mean per-bit cross-entropy of the source pyramid.
pub fn inversion_loss(params: &PredictorParams, prompt: &PromptEmbedding, source: &TokenPyramid) -> Result<f64> {
    Ok(evaluate(params, prompt, &TeacherForcing::new(source), None, false)?.ce)
}

fn point(ce: f64, kl: f64, bit_accuracy: f64) -> TracePoint {
    TracePoint { ce, kl, bit_accuracy }
}

/// Stage 1: adapts only the learnable prompt rows; `params` is read-only.
pub fn optimize_prompt(
    params: &PredictorParams,
    prompt: &PromptEmbedding,
    source: &TokenPyramid,
    config: &InversionConfig,
) -> Result<StageResult<PromptEmbedding>> {
    config.validate()?;
    if prompt.learnable_len() == 0 {
        return invalid("prompt has no learnable rows");
    }
    let tf = TeacherForcing::new(source);
    let mut prompt = prompt.clone();
    let fixed = prompt.fixed_len() * params.width();
    let mut opt = AdamW::new(config.optimizer, &[prompt.learnable_slice().len()]);
    let mut trace = Vec::with_capacity(config.prompt_iterations);
    for _ in 0..config.prompt_iterations {
        let eval = evaluate(params, &prompt, &tf, None, true)?;
        trace.push(point(eval.ce, 0.0, eval.bit_accuracy));
        let grads = eval.grads.expect("gradients requested");
        opt.step(&mut [prompt.learnable_slice_mut()], &[&grads.prompt.data()[fixed..]]);
    }
    let eval = evaluate(params, &prompt, &tf, None, false)?;
    Ok(StageResult { value: prompt, trace, last: point(eval.ce, 0.0, eval.bit_accuracy) })
}

/// Stage 2: fits adapters starting from `init` with the prompt frozen. The
/// objective is CE + `kl_weight`·KL(adapted ‖ base), where the base model is
/// `params` without adapters.
pub fn optimize_lora(
    params: &PredictorParams,
    prompt: &PromptEmbedding,
    source: &TokenPyramid,
    init: LoraFactors,
    config: &InversionConfig,
) -> Result<StageResult<LoraFactors>> {
    config.validate()?;
    let tf = TeacherForcing::new(source);
    let base = params.clone().with_lora(None)?;
    let reference = tf.logits(&base, prompt)?;
    let anchor = Some(KlAnchor { reference: &reference, weight: config.kl_weight });
    let mut adapted = base.with_lora(Some(init))?;
    let sizes: Vec<usize> = adapted.lora.as_ref().expect("installed").tensors().iter().map(|t| t.data().len()).collect();
    let mut opt = AdamW::new(config.optimizer, &sizes);
    let mut trace = Vec::with_capacity(config.lora_iterations);
    for _ in 0..config.lora_iterations {
        let eval = evaluate(&adapted, prompt, &tf, anchor, true)?;
        trace.push(point(eval.ce, eval.kl, eval.bit_accuracy));
        let grads = eval.grads.expect("gradients requested").params.lora.expect("adapters installed");
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(Matrix::data).collect();
        let lora = adapted.lora.as_mut().expect("installed");
        let mut p: Vec<&mut [f64]> = lora.tensors_mut().into_iter().map(Matrix::data_mut).collect();
        opt.step(&mut p, &g);
    }
    let eval = evaluate(&adapted, prompt, &tf, anchor, false)?;
    let last = point(eval.ce, eval.kl, eval.bit_accuracy);
    Ok(StageResult { value: adapted.lora.expect("installed"), trace, last })
}

/// Full inversion: random learnable rows appended to `prompt_ids`, stage 1,
/// then stage 2. All randomness comes from `seed`.
pub fn invert(
    params: &PredictorParams,
    prompt_ids: &[usize],
    source: &TokenPyramid,
    config: &InversionConfig,
    seed: u64,
) -> Result<InversionResult> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = params.clone().with_lora(None)?;
    let init_rows = Matrix::random_normal(config.learnable_rows, base.width(), config.prompt_init_std, &mut rng);
    let prompt = PromptEmbedding::compose(&base, prompt_ids, Some(&init_rows))?;
    let stage1 = optimize_prompt(&base, &prompt, source, config)?;
    let init = LoraFactors::init(base.width(), config.rank, &mut rng);
    let stage2 = optimize_lora(&base, &stage1.value, source, init, config)?;
    Ok(InversionResult {
        learnable: stage1.value.learnable(),
        lora: stage2.value,
        prompt_trace: stage1.trace,
        prompt_final: stage1.last,
        lora_trace: stage2.trace,
        lora_final: stage2.last,
        bit_accuracy: stage2.last.bit_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Relative error with a floor on the denominator so that entries where
/// both gradients vanish do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of the inversion loss for every learnable prompt
/// scalar and every adapter scalar (when adapters are installed).
pub fn check_gradients(
    params: &PredictorParams,
    prompt: &PromptEmbedding,
    source: &TokenPyramid,
    step: f64,
    tolerance: f64,
) -> Result<GradientReport> {
    if !(step > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let tf = TeacherForcing::new(source);
    let grads = evaluate(params, prompt, &tf, None, true)?.grads.expect("gradients requested");
    let loss = |p: &PredictorParams, pr: &PromptEmbedding| -> Result<f64> { Ok(evaluate(p, pr, &tf, None, false)?.ce) };
    let fixed = prompt.fixed_len() * params.width();
    let mut worst: f64 = 0.0;
    let mut checked = 0;

    for idx in 0..prompt.learnable_slice().len() {
        let mut plus = prompt.clone();
        plus.learnable_slice_mut()[idx] += step;
        let mut minus = prompt.clone();
        minus.learnable_slice_mut()[idx] -= step;
        let numeric = (loss(params, &plus)? - loss(params, &minus)?) / (2.0 * step);
        worst = worst.max(relative_error(grads.prompt.data()[fixed + idx], numeric));
        checked += 1;
    }
    if let (Some(lora), Some(glora)) = (&params.lora, &grads.params.lora) {
        for t in 0..4 {
            for idx in 0..lora.tensors()[t].data().len() {
                let bump = |delta: f64| -> Result<f64> {
                    let mut q = params.clone();
                    q.lora.as_mut().expect("installed").tensors_mut()[t].data_mut()[idx] += delta;
                    loss(&q, prompt)
                };
                let numeric = (bump(step)? - bump(-step)?) / (2.0 * step);
                worst = worst.max(relative_error(glora.tensors()[t].data()[idx], numeric));
                checked += 1;
            }
        }
    }
    Ok(GradientReport { checked, max_relative_error: worst, tolerance })
}
