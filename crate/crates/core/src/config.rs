//! Plain-text `key = value` run configuration.
//!
//! One pair per line; blank lines and lines starting with `#` are ignored.
//! Unknown and repeated keys are errors. `preset` is applied before any
//! explicit optimizer keys regardless of line order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::Codec;
use crate::editor::EditMode;
use crate::error::{invalid, Error, Result};
use crate::grid::ScaleSchedule;
use crate::inversion::InversionConfig;
use crate::predictor::{PredictorShape, TrainConfig};
use crate::smoothing::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingKind {
    Greedy,
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub codec: Codec,
    pub schedule: ScaleSchedule,
    pub width: usize,
    pub vocab: usize,
    pub instruction_id: usize,
    pub inversion: InversionConfig,
    pub train: TrainConfig,
    pub kernel: KernelSpec,
    pub mode: EditMode,
    pub sampling: SamplingKind,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            codec: Codec::default(),
            schedule: ScaleSchedule::default_16(),
            width: 32,
            vocab: 16,
            instruction_id: 0,
            inversion: InversionConfig::toy(),
            train: TrainConfig::default(),
            kernel: KernelSpec::default(),
            mode: EditMode::Ar,
            sampling: SamplingKind::Greedy,
        }
    }
}

pub const KEYS: &[&str] = &[
    "schedule",
    "patch",
    "gain",
    "d",
    "width",
    "vocab",
    "instruction_id",
    "preset",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "prompt_iterations",
    "lora_iterations",
    "rank",
    "kl_weight",
    "learnable_rows",
    "prompt_init_std",
    "train_iterations",
    "train_lr",
    "train_target_loss",
    "kernel",
    "tau1",
    "tau2",
    "alpha",
    "kernel_value",
    "mode",
    "sampling",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::InvalidArgument(format!("config key '{key}': cannot parse '{value}'")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return invalid(format!("config line {}: expected key=value, got '{line}'", n + 1));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return invalid(format!("config line {}: unknown key '{key}'", n + 1));
            }
            if pairs.insert(key.to_string(), value.to_string()).is_some() {
                return invalid(format!("config line {}: repeated key '{key}'", n + 1));
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);
        match get("preset") {
            None | Some("toy") => {}
            Some("paper") => c.inversion = InversionConfig::paper(),
            Some(other) => return invalid(format!("unknown preset '{other}' (expected toy or paper)")),
        }
        let (mut patch, mut gain) = (c.codec.patch, c.codec.gain);
        let (mut tau1, mut tau2, mut alpha, mut value) = (1.0, 4.0, 1.0, 1.0);
        let mut kernel_kind = "linear".to_string();
        let mut depth = None;
        for (key, v) in pairs {
            let inv = &mut c.inversion;
            match key.as_str() {
                "preset" => {}
                "schedule" => c.schedule = v.parse()?,
                "patch" => patch = parse_num(key, v)?,
                "gain" => gain = parse_num(key, v)?,
                "d" => depth = Some(parse_num::<usize>(key, v)?),
                "width" => c.width = parse_num(key, v)?,
                "vocab" => c.vocab = parse_num(key, v)?,
                "instruction_id" => c.instruction_id = parse_num(key, v)?,
                "lr" => inv.optimizer.lr = parse_num(key, v)?,
                "beta1" => inv.optimizer.beta1 = parse_num(key, v)?,
                "beta2" => inv.optimizer.beta2 = parse_num(key, v)?,
                "eps" => inv.optimizer.eps = parse_num(key, v)?,
                "weight_decay" => inv.optimizer.weight_decay = parse_num(key, v)?,
                "prompt_iterations" => inv.prompt_iterations = parse_num(key, v)?,
                "lora_iterations" => inv.lora_iterations = parse_num(key, v)?,
                "rank" => inv.rank = parse_num(key, v)?,
                "kl_weight" => inv.kl_weight = parse_num(key, v)?,
                "learnable_rows" => inv.learnable_rows = parse_num(key, v)?,
                "prompt_init_std" => inv.prompt_init_std = parse_num(key, v)?,
                "train_iterations" => c.train.iterations = parse_num(key, v)?,
                "train_lr" => c.train.optimizer.lr = parse_num(key, v)?,
                "train_target_loss" => c.train.target_loss = parse_num(key, v)?,
                "kernel" => kernel_kind = v.clone(),
                "tau1" => tau1 = parse_num(key, v)?,
                "tau2" => tau2 = parse_num(key, v)?,
                "alpha" => alpha = parse_num(key, v)?,
                "kernel_value" => value = parse_num(key, v)?,
                "mode" => c.mode = v.parse()?,
                "sampling" => c.sampling = parse_sampling(v)?,
                other => unreachable!("key '{other}' passed the allow-list"),
            }
        }
        c.codec = Codec::new(patch, gain)?;
        if let Some(d) = depth {
            if d != c.codec.depth() {
                return invalid(format!("d = {d} must equal patch² = {}", c.codec.depth()));
            }
        }
        c.kernel = kernel_spec(&kernel_kind, tau1, tau2, alpha, value)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.inversion.validate()?;
        if self.width == 0 || self.vocab == 0 {
            return invalid("width and vocab must be positive");
        }
        if self.instruction_id >= self.vocab {
            return invalid(format!("instruction_id {} outside vocabulary of {}", self.instruction_id, self.vocab));
        }
        if !(self.train.optimizer.lr > 0.0) {
            return invalid("train_lr must be positive");
        }
        if self.codec.depth() > crate::bsq::MAX_BITS {
            return invalid(format!("patch² = {} exceeds the {}-bit token limit", self.codec.depth(), crate::bsq::MAX_BITS));
        }
        Ok(())
    }

    pub fn predictor_shape(&self) -> PredictorShape {
        PredictorShape { width: self.width, bits: self.codec.depth(), vocab: self.vocab, schedule: self.schedule.clone() }
    }

    /// Image dims implied by the schedule and codec.
    pub fn image_dims(&self) -> (usize, usize) {
        let (h, w) = self.schedule.full();
        (h * self.codec.patch, w * self.codec.patch)
    }
}

pub fn parse_sampling(v: &str) -> Result<SamplingKind> {
    match v {
        "greedy" => Ok(SamplingKind::Greedy),
        "bernoulli" => Ok(SamplingKind::Bernoulli),
        other => invalid(format!("unknown sampling '{other}' (expected greedy or bernoulli)")),
    }
}

/// Builds a kernel spec and checks its parameters.
pub fn kernel_spec(kind: &str, tau1: f64, tau2: f64, alpha: f64, value: f64) -> Result<KernelSpec> {
    let spec = match kind {
        "linear" => {
            if !(tau1 >= 0.0 && tau1 < tau2) {
                return invalid(format!("linear kernel needs 0 ≤ tau1 < tau2, got {tau1}, {tau2}"));
            }
            KernelSpec::Linear { tau1, tau2 }
        }
        "gaussian" => {
            if !(alpha > 0.0) {
                return invalid(format!("gaussian kernel needs alpha > 0, got {alpha}"));
            }
            KernelSpec::Gaussian { alpha }
        }
        "constant" => {
            if !(0.0..=1.0).contains(&value) {
                return invalid(format!("constant kernel value {value} outside [0, 1]"));
            }
            KernelSpec::Constant { value }
        }
        other => return invalid(format!("unknown kernel '{other}' (expected linear, gaussian or constant)")),
    };
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.image_dims(), (64, 64));
        assert_eq!(c.predictor_shape().bits, 16);
        assert_eq!(c.inversion.optimizer.lr, 1e-2);
    }

    #[test]
    fn parses_keys() {
        let text = "# comment\n\nschedule = 1x1,2x2\npatch=2\nd = 4\nlr = 0.5\npreset = paper\nkernel = gaussian\nalpha = 2\nmode = nar\nsampling = bernoulli\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.schedule.scales(), &[(1, 1), (2, 2)]);
        assert_eq!(c.codec.patch, 2);
        assert_eq!(c.inversion.optimizer.lr, 0.5);
        assert_eq!(c.kernel, KernelSpec::Gaussian { alpha: 2.0 });
        assert_eq!(c.mode, EditMode::Nar);
        assert_eq!(c.sampling, SamplingKind::Bernoulli);
        assert_eq!(RunConfig::parse("preset=paper").unwrap().inversion.optimizer.lr, 4.6875e-5);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "lr = 1\nlr = 2",
            "lr",
            "lr = abc",
            "patch = 4\nd = 15",
            "kernel = linear\ntau1 = 4\ntau2 = 1",
            "kernel = box",
            "preset = fast",
            "beta1 = 1.0",
            "mode = sideways",
            "instruction_id = 99",
            "patch = 6",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
