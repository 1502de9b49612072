//! Kernel-guided token editing.
//!
//! At every scale the predictor proposes target tokens, which are blended
//! with the source tokens at full token resolution: weight 0 takes the
//! target, weight 1 keeps the source. In [`EditMode::Ar`] the blended map
//! feeds the next scale's context; in [`EditMode::Nar`] generation runs
//! unblended and blending happens afterwards.

use std::sync::Arc;

use crate::bsq::{tokenize, TokenMap, TokenPyramid};
use crate::codec::{Codec, Image};
use crate::error::{invalid, Result};
use crate::grid::{weighted_blend, FeatureMap};
use crate::inversion::InversionResult;
use crate::predictor::{
    context_for_scale, generate, predict_next_scale, sample_tokens, LoraFactors, PredictorParams, PromptEmbedding, Sampling,
};
use crate::smoothing::{manhattan_distance_field, mask_to_token_grid, EditMask, KernelSpec, SmoothingKernel};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    Ar,
    Nar,
}

impl std::str::FromStr for EditMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(EditMode::Ar),
            "nar" => Ok(EditMode::Nar),
            other => invalid(format!("unknown edit mode '{other}' (expected ar or nar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSession {
    params: Arc<PredictorParams>,
    prompt: PromptEmbedding,
    source: TokenPyramid,
    kernel: SmoothingKernel,
    mode: EditMode,
    sampling: Sampling,
    codec: Codec,
}

impl EditSession {
    pub fn new(
        params: Arc<PredictorParams>,
        prompt: PromptEmbedding,
        source: TokenPyramid,
        kernel: SmoothingKernel,
        mode: EditMode,
        sampling: Sampling,
        codec: Codec,
    ) -> Result<Self> {
        if source.schedule() != params.schedule() {
            return invalid("source pyramid schedule does not match the predictor");
        }
        if source.depth() != params.bits() || codec.depth() != params.bits() {
            return invalid(format!(
                "bit depth mismatch: source {}, codec {}, predictor {}",
                source.depth(),
                codec.depth(),
                params.bits()
            ));
        }
        if kernel.dims() != params.schedule().full() {
            return invalid(format!(
                "kernel dims {:?} do not match the token grid {:?}",
                kernel.dims(),
                params.schedule().full()
            ));
        }
        if prompt.rows().cols() != params.width() {
            return invalid("prompt width does not match the predictor");
        }
        Ok(Self { params, prompt, source, kernel, mode, sampling, codec })
    }

    pub fn params(&self) -> &PredictorParams {
        &self.params
    }

    pub fn prompt(&self) -> &PromptEmbedding {
        &self.prompt
    }

    pub fn source(&self) -> &TokenPyramid {
        &self.source
    }

    pub fn kernel(&self) -> &SmoothingKernel {
        &self.kernel
    }

    pub fn mode(&self) -> EditMode {
        self.mode
    }

    pub fn sampling(&self) -> Sampling {
        self.sampling
    }

    pub fn codec(&self) -> Codec {
        self.codec
    }

    pub fn with_kernel(self, kernel: SmoothingKernel) -> Result<Self> {
        Self::new(self.params, self.prompt, self.source, kernel, self.mode, self.sampling, self.codec)
    }

    pub fn with_mode(mut self, mode: EditMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Learnable prompt rows and adapters produced by inversion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adaptation {
    pub learnable: Option<Matrix>,
    pub lora: Option<LoraFactors>,
}

impl From<&InversionResult> for Adaptation {
    fn from(r: &InversionResult) -> Self {
        Self { learnable: Some(r.learnable.clone()), lora: Some(r.lora.clone()) }
    }
}

/// Tokenizes the source, maps the pixel mask onto the token grid, builds the
/// kernel and installs the adaptation.
#[allow(clippy::too_many_arguments)]
pub fn make_session(
    params: &PredictorParams,
    source: &Image,
    pixel_mask: &EditMask,
    prompt_ids: &[usize],
    kernel: KernelSpec,
    mode: EditMode,
    sampling: Sampling,
    codec: Codec,
    adaptation: &Adaptation,
) -> Result<EditSession> {
    let features = codec.encode(source)?;
    let (pyramid, _) = tokenize(&features, params.schedule())?;
    let token_mask = mask_to_token_grid(pixel_mask, features.dims(), codec.patch)?;
    let kernel = kernel.build(&manhattan_distance_field(&token_mask)?)?;
    let base = params.clone().with_lora(None)?;
    let prompt = PromptEmbedding::compose(&base, prompt_ids, adaptation.learnable.as_ref())?;
    let adapted = base.with_lora(adaptation.lora.clone())?;
    EditSession::new(Arc::new(adapted), prompt, pyramid, kernel, mode, sampling, codec)
}

/// Blended per-scale maps at full token resolution, with the target tokens
/// drawn at each scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EditedPyramid {
    pub blended: Vec<FeatureMap>,
    pub targets: TokenPyramid,
}

impl EditedPyramid {
    pub fn sum(&self) -> FeatureMap {
        let (h, w) = self.blended[0].dims();
        let mut acc = FeatureMap::zeros(h, w, self.blended[0].depth());
        for e in &self.blended {
            acc.add_assign(e).expect("blended maps share a shape");
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutput {
    pub pyramid: EditedPyramid,
    pub image: Image,
}

fn blend_scale(session: &EditSession, target: &TokenMap, source: &TokenMap) -> Result<FeatureMap> {
    let full = session.params.schedule().full();
    weighted_blend(&target.upsampled(full), &source.upsampled(full), &session.kernel)
}

fn finish(session: &EditSession, blended: Vec<FeatureMap>, targets: Vec<TokenMap>) -> Result<EditOutput> {
    let targets = TokenPyramid::new(session.params.schedule().clone(), targets)?;
    let pyramid = EditedPyramid { blended, targets };
    let image = session.codec.decode(&pyramid.sum())?;
    Ok(EditOutput { pyramid, image })
}

/// Autoregressive editing: each scale is conditioned on the blended maps of
/// all earlier scales.
pub fn edit(session: &EditSession) -> Result<EditOutput> {
    let params = &*session.params;
    let schedule = params.schedule();
    let full = schedule.full();
    let mut cumulative = FeatureMap::zeros(full.0, full.1, params.bits());
    let mut blended = Vec::with_capacity(schedule.len());
    let mut targets = Vec::with_capacity(schedule.len());
    for k in 0..schedule.len() {
        let context = context_for_scale(&cumulative, schedule, k);
        let logits = predict_next_scale(params, &session.prompt, &context, k)?;
        let target = sample_tokens(&logits, session.sampling.for_scale(k));
        let e = blend_scale(session, &target, &session.source.maps()[k])?;
        cumulative.add_assign(&e)?;
        blended.push(e);
        targets.push(target);
    }
    finish(session, blended, targets)
}

/// Blend-after-generation: target tokens follow the pure generation
/// trajectory and are blended with the source only at the end.
pub fn edit_nar(session: &EditSession) -> Result<EditOutput> {
    let generated = generate(&session.params, &session.prompt, session.sampling)?;
    let blended = generated
        .maps()
        .iter()
        .zip(session.source.maps())
        .map(|(t, s)| blend_scale(session, t, s))
        .collect::<Result<Vec<_>>>()?;
    finish(session, blended, generated.maps().to_vec())
}

/// Runs the session in its configured mode.
pub fn run(session: &EditSession) -> Result<EditOutput> {
    match session.mode {
        EditMode::Ar => edit(session),
        EditMode::Nar => edit_nar(session),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bsq::reconstruct;
    use crate::grid::ScaleSchedule;
    use crate::predictor::PredictorShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Predictor whose logits are exactly the negated context, so every bit
    /// is set iff its context component is ≤ 0.
    pub(crate) fn negating_predictor(bits: usize, schedule: ScaleSchedule) -> PredictorParams {
        let width = bits.max(2);
        let mut p = PredictorParams::zeros(PredictorShape { width, bits, vocab: 2, schedule }).unwrap();
        for b in 0..bits {
            p.input_proj.data_mut()[b * width + b] = 1.0;
            p.head.data_mut()[b * bits + b] = -1.0;
        }
        p
    }

    fn session(p: PredictorParams, source: TokenPyramid, kernel: SmoothingKernel, mode: EditMode, sampling: Sampling) -> EditSession {
        let prompt = PromptEmbedding::compose(&p, &[0, 1], None).unwrap();
        let patch = (p.bits() as f64).sqrt() as usize;
        EditSession::new(Arc::new(p), prompt, source, kernel, mode, sampling, Codec::new(patch, 1.0).unwrap()).unwrap()
    }

    fn trained_like(seed: u64) -> (PredictorParams, TokenPyramid) {
        let schedule = ScaleSchedule::new(vec![(1, 1), (2, 2), (4, 4)]).unwrap();
        let shape = PredictorShape { width: 8, bits: 4, vocab: 2, schedule: schedule.clone() };
        let mut p = PredictorParams::init(shape, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.head = Matrix::random_normal(8, 4, 1.0, &mut rng);
        let f = FeatureMap::new(4, 4, 4, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (p, tokenize(&f, &schedule).unwrap().0)
    }

    #[test]
    fn preservation_limit() {
        for sampling in [Sampling::Greedy, Sampling::Bernoulli { seed: 3, stream: 0 }] {
            let (p, src) = trained_like(1);
            let s = session(p, src.clone(), SmoothingKernel::constant(4, 4, 1.0), EditMode::Ar, sampling);
            let out = edit(&s).unwrap();
            let expected = s.codec().decode(&reconstruct(&src).unwrap()).unwrap();
            let bits = |i: &Image| i.pixels().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&out.image), bits(&expected));
            for (e, m) in out.pyramid.blended.iter().zip(src.maps()) {
                assert_eq!(e, &m.upsampled((4, 4)));
            }
            assert_eq!(edit_nar(&s).unwrap().image, out.image);
        }
    }

    #[test]
    fn replacement_limit() {
        for sampling in [Sampling::Greedy, Sampling::Bernoulli { seed: 9, stream: 0 }] {
            let (p, src) = trained_like(2);
            let s = session(p, src, SmoothingKernel::constant(4, 4, 0.0), EditMode::Ar, sampling);
            let generated = generate(s.params(), s.prompt(), sampling).unwrap();
            let ar = edit(&s).unwrap();
            let nar = edit_nar(&s).unwrap();
            assert_eq!(ar.pyramid.targets, generated);
            assert_eq!(ar, nar);
        }
    }

    /// One row of three tokens, d = 1, kernel [0, ½, 1], source R1 = [−], R2 = [+, +, −].
    fn three_cell_fixture(mode: EditMode) -> EditSession {
        let schedule = ScaleSchedule::new(vec![(1, 1), (1, 3)]).unwrap();
        let p = negating_predictor(1, schedule.clone());
        let src = TokenPyramid::new(
            schedule,
            vec![TokenMap::new(1, 1, 1, vec![0]).unwrap(), TokenMap::new(1, 3, 1, vec![1, 1, 0]).unwrap()],
        )
        .unwrap();
        session(p, src, SmoothingKernel::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap(), mode, Sampling::Greedy)
    }

    #[test]
    fn hand_traced_ar_edit() {
        // k=1: zero context → target +1; E1 = [1, 0, −1].
        // k=2: context [1, 0, −1] → logits [−1, 0, 1] → target [−1, +1, +1];
        //      E2 = [−1, ½·1 + ½·1, −1] = [−1, 1, −1].
        let out = edit(&three_cell_fixture(EditMode::Ar)).unwrap();
        assert_eq!(out.pyramid.blended[0].data(), &[1.0, 0.0, -1.0]);
        assert_eq!(out.pyramid.targets.maps()[1].codes(), &[0, 1, 1]);
        assert_eq!(out.pyramid.blended[1].data(), &[-1.0, 1.0, -1.0]);
        // sum [0, 1, −2] → pixels (f + 1)/2 clamped
        assert_eq!(out.image.pixels(), &[0.5, 1.0, 0.0]);
    }

    #[test]
    fn ar_and_nar_diverge_only_for_mixed_kernels() {
        // NAR: generation context at k=2 is [1, 1, 1] → target [−1, −1, −1];
        //      E2 = [−1, 0, −1].
        let ar = edit(&three_cell_fixture(EditMode::Ar)).unwrap();
        let nar = edit_nar(&three_cell_fixture(EditMode::Nar)).unwrap();
        assert_eq!(nar.pyramid.targets.maps()[1].codes(), &[0, 0, 0]);
        assert_eq!(nar.pyramid.blended[1].data(), &[-1.0, 0.0, -1.0]);
        assert_ne!(ar.pyramid.targets, nar.pyramid.targets);
        assert_ne!(ar.image, nar.image);

        assert_ne!(ar.pyramid.blended, nar.pyramid.blended);

        // Under a constant kernel the edited maps coincide; the discarded
        // target proposals only coincide when the kernel is 0.
        for value in [0.0, 1.0] {
            let s = three_cell_fixture(EditMode::Ar).with_kernel(SmoothingKernel::constant(1, 3, value)).unwrap();
            let (a, n) = (edit(&s).unwrap(), edit_nar(&s).unwrap());
            assert_eq!(a.pyramid.blended, n.pyramid.blended);
            assert_eq!(a.image, n.image);
            assert_eq!(a.pyramid.targets == n.pyramid.targets, value == 0.0);
        }
    }

    #[test]
    fn locality_on_source_cells() {
        let (p, src) = trained_like(4);
        let kernel = SmoothingKernel::new(4, 4, (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.3 }).collect()).unwrap();
        let out = edit(&session(p, src.clone(), kernel, EditMode::Ar, Sampling::Greedy)).unwrap();
        for (e, m) in out.pyramid.blended.iter().zip(src.maps()) {
            let up = m.upsampled((4, 4));
            for i in (0..16).filter(|i| i % 3 == 0) {
                assert_eq!(e.at(i / 4, i % 4), up.at(i / 4, i % 4));
            }
        }
    }

    #[test]
    fn make_session_pipeline() {
        let (p, _) = trained_like(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let image = Image::new(8, 8, (0..64).map(|_| rng.random::<f64>()).collect()).unwrap();
        let codec = Codec::new(2, 1.0).unwrap();
        let mask = EditMask::from_fn(8, 8, |y, x| y < 2 && x < 3);
        let build = || make_session(&p, &image, &mask, &[1, 0], KernelSpec::default(), EditMode::Ar, Sampling::Greedy, codec, &Adaptation::default());
        let a = build().unwrap();
        assert_eq!(a, build().unwrap());
        assert_eq!(a.kernel().get(0, 0), 0.0);
        assert_eq!(a.kernel().get(0, 1), 0.0);
        assert_eq!(a.kernel().get(3, 3), 1.0);

        let empty = EditMask::filled(8, 8, false);
        let err = make_session(&p, &image, &empty, &[1, 0], KernelSpec::default(), EditMode::Ar, Sampling::Greedy, codec, &Adaptation::default())
            .unwrap_err();
        assert!(err.to_string().contains("no edit region"));

        // full mask and a narrow band: every weight is 0, so editing is pure generation
        let full = EditMask::filled(8, 8, true);
        let s = make_session(
            &p,
            &image,
            &full,
            &[1, 0],
            KernelSpec::Linear { tau1: 0.0, tau2: 1e-9 },
            EditMode::Ar,
            Sampling::Greedy,
            codec,
            &Adaptation::default(),
        )
        .unwrap();
        assert!(s.kernel().values().iter().all(|&v| v == 0.0));
        assert_eq!(edit(&s).unwrap().pyramid.targets, generate(s.params(), s.prompt(), Sampling::Greedy).unwrap());
    }

    #[test]
    fn session_validation() {
        let (p, src) = trained_like(6);
        let prompt = PromptEmbedding::compose(&p, &[0], None).unwrap();
        let codec = Codec::new(2, 1.0).unwrap();
        let arc = Arc::new(p);
        let bad_kernel = SmoothingKernel::constant(3, 4, 1.0);
        assert!(EditSession::new(arc.clone(), prompt.clone(), src.clone(), bad_kernel, EditMode::Ar, Sampling::Greedy, codec).is_err());
        let bad_codec = Codec::new(4, 1.0).unwrap();
        let k = SmoothingKernel::constant(4, 4, 1.0);
        assert!(EditSession::new(arc, prompt, src, k, EditMode::Ar, Sampling::Greedy, bad_codec).is_err());
        assert!("xyz".parse::<EditMode>().is_err());
        assert_eq!("nar".parse::<EditMode>().unwrap(), EditMode::Nar);
    }
}
