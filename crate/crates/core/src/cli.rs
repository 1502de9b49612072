//! Command-line interface.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 I/O.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bsq::{reconstruct, tokenize, TokenPyramid};
use crate::codec::{Codec, Image};
use crate::config::{kernel_spec, parse_sampling, RunConfig, SamplingKind};
use crate::corpus::synthetic_corpus;
use crate::editor::{make_session, run as run_edit, Adaptation, EditMode};
use crate::error::{Error, Result};
use crate::formats::{self, ParamBundle};
use crate::grid::{FeatureMap, ScaleSchedule};
use crate::inversion::{check_gradients, invert, TracePoint};
use crate::metrics::{self, Region};
use crate::predictor::{train_predictor, LoraFactors, PredictorParams, PredictorShape, PromptEmbedding, Sampling, TrainSample};
use crate::smoothing::{manhattan_distance_field, mask_to_token_grid, KernelSpec};
use crate::tensor::Matrix;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "bitedit", version, about = "Bitwise multi-scale token editing at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
struct KernelArgs {
    /// linear, gaussian or constant.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long)]
    tau2: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    kernel_value: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tokenize a PGM image into a BQTK pyramid and report residual energies.
    Tokenize {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the encoded features as BQFM.
        #[arg(long)]
        features: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Decode a BQTK pyramid back to an image.
    Reconstruct {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Report pixel MSE against this image.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Build the smoothing kernel for a pixel mask and write it as BQFM.
    Kernel {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grayscale preview of the kernel at token resolution.
        #[arg(long)]
        preview: Option<PathBuf>,
        #[command(flatten)]
        kernel: KernelArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a toy predictor on images (PATH:PROMPT_ID) or a synthetic corpus.
    TrainToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long = "image", value_name = "PATH:PROMPT_ID")]
        images: Vec<String>,
        /// Number of synthetic images (prompt ids 1..=N) when no images are given.
        #[arg(long, default_value_t = 4)]
        synthetic: usize,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Invert a source image: optimize learnable prompt rows, then adapters.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        prompt_id: usize,
        #[arg(long)]
        seed: u64,
        /// Sidecar BQPM with learnable rows and adapters.
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV.
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Edit a source image under a target prompt, guided by a mask.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        prompt_id: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dump the blended per-scale maps as BQEP.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// ar or nar.
        #[arg(long)]
        mode: Option<String>,
        /// greedy or bernoulli.
        #[arg(long)]
        sampling: Option<String>,
        #[command(flatten)]
        kernel: KernelArgs,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// PSNR (dB), MSE and SSIM between two images as CSV. Values are unscaled:
    /// MSE and SSIM are plain fractions, not multiplied by 10⁴ or 10².
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Edit mask; adds a row for the background (unmasked) region.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "image")]
        id: String,
        /// CSV destination (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of inversion gradients on a random small instance.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::InvalidArgument(_) | Error::Format { .. } => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    arg.config.as_deref().map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{}: no such file", path.display()),
        )));
    }
    Ok(())
}

fn merged_kernel(base: KernelSpec, args: &KernelArgs) -> Result<KernelSpec> {
    let (mut kind, mut tau1, mut tau2, mut alpha, mut value) = ("linear", 1.0, 4.0, 1.0, 1.0);
    match base {
        KernelSpec::Linear { tau1: a, tau2: b } => (tau1, tau2) = (a, b),
        KernelSpec::Gaussian { alpha: a } => (kind, alpha) = ("gaussian", a),
        KernelSpec::Constant { value: v } => (kind, value) = ("constant", v),
    }
    kernel_spec(
        args.kernel.as_deref().unwrap_or(kind),
        args.tau1.unwrap_or(tau1),
        args.tau2.unwrap_or(tau2),
        args.alpha.unwrap_or(alpha),
        args.kernel_value.unwrap_or(value),
    )
}

fn read_source(path: &Path, cfg: &RunConfig) -> Result<Image> {
    let image = formats::read_image(path)?;
    let expected = cfg.image_dims();
    if image.dims() != expected {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} does not match the configured grid ({}x{} = schedule {} × patch {})",
            image.height(),
            image.width(),
            expected.0,
            expected.1,
            cfg.schedule.full().0,
            cfg.codec.patch
        )));
    }
    Ok(image)
}

/// Predictor weights from a BQPM file, checked against the configuration.
fn load_predictor(path: &Path, cfg: &RunConfig) -> Result<PredictorParams> {
    let bundle = formats::read_params(path)?;
    let params = bundle.params()?.clone();
    if params.bits() != cfg.codec.depth() || params.schedule() != &cfg.schedule {
        return Err(Error::InvalidArgument(format!(
            "predictor (d={}, schedule {}) does not match the configuration (d={}, schedule {})",
            params.bits(),
            params.schedule(),
            cfg.codec.depth(),
            cfg.schedule
        )));
    }
    Ok(params)
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Tokenize { image, out: path, features, config } => {
            let cfg = load_config(&config)?;
            require_file(&image)?;
            cmd_tokenize(&image, &path, features.as_deref(), &cfg, out)
        }
        Command::Reconstruct { tokens, out: path, reference, config } => {
            let cfg = load_config(&config)?;
            require_file(&tokens)?;
            if let Some(r) = &reference {
                require_file(r)?;
            }
            cmd_reconstruct(&tokens, &path, reference.as_deref(), &cfg, out)
        }
        Command::Kernel { mask, out: path, preview, kernel, config } => {
            let cfg = load_config(&config)?;
            let spec = merged_kernel(cfg.kernel, &kernel)?;
            require_file(&mask)?;
            cmd_kernel(&mask, &path, preview.as_deref(), spec, cfg.codec, out)
        }
        Command::TrainToy { out: path, seed, images, synthetic, config } => {
            let cfg = load_config(&config)?;
            cmd_train(&path, seed, &images, synthetic, &cfg, out)
        }
        Command::Invert { image, params, prompt_id, seed, out: path, trace, config } => {
            let cfg = load_config(&config)?;
            require_file(&image)?;
            require_file(&params)?;
            cmd_invert(&image, &params, prompt_id, seed, &path, &trace, &cfg, out)
        }
        Command::Edit { image, mask, params, sidecar, prompt_id, seed, out: path, dump, mode, sampling, kernel, config } => {
            let mut cfg = load_config(&config)?;
            cfg.kernel = merged_kernel(cfg.kernel, &kernel)?;
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
            }
            if let Some(s) = sampling {
                cfg.sampling = parse_sampling(&s)?;
            }
            for p in [Some(&image), Some(&mask), Some(&params), sidecar.as_ref()].into_iter().flatten() {
                require_file(p)?;
            }
            let inputs = EditInputs { image, mask, params, sidecar, prompt_id, seed, out: path, dump };
            cmd_edit(&inputs, &cfg, out)
        }
        Command::Eval { a, b, mask, id, out: path } => {
            for p in [Some(&a), Some(&b), mask.as_ref()].into_iter().flatten() {
                require_file(p)?;
            }
            cmd_eval(&a, &b, mask.as_deref(), &id, path.as_deref(), out)
        }
        Command::Gradcheck { seed, step, tolerance } => cmd_gradcheck(seed, step, tolerance, out),
    }
}

fn cmd_tokenize(image: &Path, path: &Path, features: Option<&Path>, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let img = read_source(image, cfg)?;
    let f = cfg.codec.encode(&img)?;
    let (pyramid, _) = tokenize(&f, &cfg.schedule)?;
    formats::write_tokens(path, &pyramid)?;
    if let Some(fp) = features {
        formats::write_feature_map(fp, &f)?;
    }
    writeln!(out, "scale\theight\twidth\tresidual_energy")?;
    for (k, fk) in pyramid.cumulative().iter().enumerate() {
        let (h, w) = cfg.schedule.scale(k);
        writeln!(out, "{}\t{h}\t{w}\t{:e}", k + 1, f.sub(fk)?.energy())?;
    }
    let decoded = cfg.codec.decode(&reconstruct(&pyramid)?)?;
    writeln!(out, "pixel_mse\t{:e}", metrics::mse(&decoded, &img, None)?)?;
    Ok(())
}

fn cmd_reconstruct(tokens: &Path, path: &Path, reference: Option<&Path>, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let pyramid = formats::read_tokens(tokens)?;
    if pyramid.depth() != cfg.codec.depth() {
        return Err(Error::InvalidArgument(format!(
            "token depth {} does not match patch² = {}",
            pyramid.depth(),
            cfg.codec.depth()
        )));
    }
    let decoded = cfg.codec.decode(&reconstruct(&pyramid)?)?;
    formats::write_image(path, &decoded)?;
    if let Some(r) = reference {
        let img = formats::read_image(r)?;
        writeln!(out, "pixel_mse\t{:e}", metrics::mse(&decoded, &img, None)?)?;
    }
    Ok(())
}

fn cmd_kernel(mask: &Path, path: &Path, preview: Option<&Path>, spec: KernelSpec, codec: Codec, out: &mut dyn Write) -> Result<()> {
    let pixel_mask = formats::read_mask(mask)?;
    let dims = codec.token_dims(pixel_mask.dims())?;
    let token_mask = mask_to_token_grid(&pixel_mask, dims, codec.patch)?;
    let kernel = spec.build(&manhattan_distance_field(&token_mask)?)?;
    formats::write_feature_map(path, &kernel.to_feature_map())?;
    if let Some(p) = preview {
        formats::write_image(p, &Image::new(dims.0, dims.1, kernel.values().to_vec())?)?;
    }
    let values = kernel.values();
    let count = |f: fn(f64) -> bool| values.iter().filter(|&&v| f(v)).count();
    writeln!(out, "token_grid\t{}x{}", dims.0, dims.1)?;
    writeln!(out, "edit_tokens\t{}", token_mask.count())?;
    writeln!(out, "target_cells\t{}", count(|v| v == 0.0))?;
    writeln!(out, "band_cells\t{}", count(|v| v > 0.0 && v < 1.0))?;
    writeln!(out, "source_cells\t{}", count(|v| v == 1.0))?;
    Ok(())
}

fn parse_image_spec(spec: &str) -> Result<(PathBuf, usize)> {
    let (path, id) = spec
        .rsplit_once(':')
        .ok_or_else(|| Error::InvalidArgument(format!("expected PATH:PROMPT_ID, got '{spec}'")))?;
    let id = id.parse().map_err(|_| Error::InvalidArgument(format!("bad prompt id in '{spec}'")))?;
    Ok((PathBuf::from(path), id))
}

fn check_prompt_id(id: usize, cfg: &RunConfig) -> Result<()> {
    if id >= cfg.vocab || id == cfg.instruction_id {
        return Err(Error::InvalidArgument(format!(
            "prompt id {id} must be below vocab {} and differ from instruction id {}",
            cfg.vocab, cfg.instruction_id
        )));
    }
    Ok(())
}

fn cmd_train(path: &Path, seed: u64, images: &[String], synthetic: usize, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut labelled = Vec::new();
    if images.is_empty() {
        if synthetic == 0 {
            return Err(Error::InvalidArgument("no training images and --synthetic 0".into()));
        }
        let (h, w) = cfg.image_dims();
        for (i, img) in synthetic_corpus(synthetic, h, w, seed)?.into_iter().enumerate() {
            labelled.push((img, i + 1));
        }
    } else {
        let specs = images.iter().map(|s| parse_image_spec(s)).collect::<Result<Vec<_>>>()?;
        for (p, _) in &specs {
            require_file(p)?;
        }
        for (p, id) in specs {
            labelled.push((read_source(&p, cfg)?, id));
        }
    }
    let mut dataset = Vec::with_capacity(labelled.len());
    for (img, id) in labelled {
        check_prompt_id(id, cfg)?;
        let (pyramid, _) = tokenize(&cfg.codec.encode(&img)?, &cfg.schedule)?;
        dataset.push(TrainSample { prompt_ids: vec![id, cfg.instruction_id], pyramid });
    }
    let train = crate::predictor::TrainConfig { seed, ..cfg.train.clone() };
    let report = train_predictor(cfg.predictor_shape(), &dataset, &train)?;
    formats::write_params(path, &ParamBundle::from_params(&report.params))?;
    writeln!(out, "samples\t{}", dataset.len())?;
    writeln!(out, "steps\t{}", report.loss_trace.len())?;
    if let Some(first) = report.loss_trace.first() {
        writeln!(out, "initial_loss\t{first}")?;
    }
    writeln!(out, "final_loss\t{}", report.final_loss)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_invert(
    image: &Path,
    params_path: &Path,
    prompt_id: usize,
    seed: u64,
    path: &Path,
    trace: &Path,
    cfg: &RunConfig,
    out: &mut dyn Write,
) -> Result<()> {
    let params = load_predictor(params_path, cfg)?;
    let cfg = RunConfig { vocab: params.shape().vocab, ..cfg.clone() };
    check_prompt_id(prompt_id, &cfg)?;
    let img = read_source(image, &cfg)?;
    let (source, _) = tokenize(&cfg.codec.encode(&img)?, &cfg.schedule)?;
    let result = invert(&params, &[prompt_id, cfg.instruction_id], &source, &cfg.inversion, seed)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["iteration", "stage", "ce_loss", "kl_loss", "bit_accuracy"]).map_err(csv_error)?;
    let mut rows = |stage: &str, trace: &[TracePoint], last: TracePoint| -> Result<()> {
        for (i, p) in trace.iter().chain(std::iter::once(&last)).enumerate() {
            csv.write_record([i.to_string(), stage.to_string(), p.ce.to_string(), p.kl.to_string(), p.bit_accuracy.to_string()])
                .map_err(csv_error)?;
        }
        Ok(())
    };
    rows("prompt", &result.prompt_trace, result.prompt_final)?;
    rows("lora", &result.lora_trace, result.lora_final)?;
    let bytes = csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    std::fs::write(trace, bytes)?;

    formats::write_params(path, &ParamBundle::sidecar(&params, result.learnable, result.lora))?;
    let initial = result.prompt_trace.first().map_or(result.prompt_final.ce, |p| p.ce);
    writeln!(out, "initial_ce\t{initial}")?;
    writeln!(out, "prompt_final_ce\t{}", result.prompt_final.ce)?;
    writeln!(out, "lora_final_ce\t{}", result.lora_final.ce)?;
    writeln!(out, "bit_accuracy\t{}", result.bit_accuracy)?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

struct EditInputs {
    image: PathBuf,
    mask: PathBuf,
    params: PathBuf,
    sidecar: Option<PathBuf>,
    prompt_id: usize,
    seed: u64,
    out: PathBuf,
    dump: Option<PathBuf>,
}

fn cmd_edit(inputs: &EditInputs, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let params = load_predictor(&inputs.params, cfg)?;
    let cfg = RunConfig { vocab: params.shape().vocab, ..cfg.clone() };
    check_prompt_id(inputs.prompt_id, &cfg)?;
    let adaptation = match &inputs.sidecar {
        None => Adaptation::default(),
        Some(p) => {
            let side = formats::read_params(p)?;
            side.check_compatible(&params)?;
            Adaptation { learnable: side.learnable, lora: side.lora }
        }
    };
    let img = read_source(&inputs.image, &cfg)?;
    let mask = formats::read_mask(&inputs.mask)?;
    let sampling = match cfg.sampling {
        SamplingKind::Greedy => Sampling::Greedy,
        SamplingKind::Bernoulli => Sampling::Bernoulli { seed: inputs.seed, stream: 0 },
    };
    let session = make_session(
        &params,
        &img,
        &mask,
        &[inputs.prompt_id, cfg.instruction_id],
        cfg.kernel,
        cfg.mode,
        sampling,
        cfg.codec,
        &adaptation,
    )?;
    let result = run_edit(&session)?;
    formats::write_image(&inputs.out, &result.image)?;
    if let Some(d) = &inputs.dump {
        formats::write_edited(d, &result.pyramid.blended)?;
    }
    writeln!(out, "mode\t{}", if cfg.mode == EditMode::Ar { "ar" } else { "nar" })?;
    writeln!(out, "scale\ttarget_bits_differing_from_source")?;
    for (k, (t, s)) in result.pyramid.targets.maps().iter().zip(session.source().maps()).enumerate() {
        writeln!(out, "{}\t{}", k + 1, t.bit_mismatches(s))?;
    }
    writeln!(out, "psnr_vs_source\t{}", metrics::psnr(&result.image, &img, None)?)?;
    Ok(())
}

fn cmd_eval(a: &Path, b: &Path, mask: Option<&Path>, id: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (ia, ib) = (formats::read_image(a)?, formats::read_image(b)?);
    let mut reports = vec![metrics::report(&ia, &ib, None, Region::Whole)?];
    if let Some(m) = mask {
        let background = formats::read_mask(m)?.complement();
        reports.push(metrics::report(&ia, &ib, Some(&background), Region::Background)?);
    }
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["image_id", "region", "psnr_db", "mse", "ssim"]).map_err(csv_error)?;
    for r in &reports {
        csv.write_record([id.to_string(), r.region.name().to_string(), r.psnr.to_string(), r.mse.to_string(), r.ssim.to_string()])
            .map_err(csv_error)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    match path {
        Some(p) => std::fs::write(p, bytes)?,
        None => out.write_all(&bytes)?,
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, step: f64, tolerance: f64, out: &mut dyn Write) -> Result<()> {
    let schedule = ScaleSchedule::new(vec![(1, 1), (2, 2)])?;
    let shape = PredictorShape { width: 8, bits: 4, vocab: 3, schedule: schedule.clone() };
    let mut params = PredictorParams::init(shape, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.head = Matrix::random_normal(8, 4, 0.5, &mut rng);
    let mut lora = LoraFactors::init(8, 2, &mut rng);
    lora.b1 = Matrix::random_normal(2, 32, 0.3, &mut rng);
    lora.b2 = Matrix::random_normal(2, 8, 0.3, &mut rng);
    let params = params.with_lora(Some(lora))?;
    let learnable = Matrix::random_normal(2, 8, 0.5, &mut rng);
    let prompt = PromptEmbedding::compose(&params, &[1, 0], Some(&learnable))?;
    let features = FeatureMap::new(2, 2, 4, (0..16).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())?;
    let (source, _): (TokenPyramid, _) = tokenize(&features, &schedule)?;
    let report = check_gradients(&params, &prompt, &source, step, tolerance)?;
    writeln!(out, "checked\t{}", report.checked)?;
    writeln!(out, "max_relative_error\t{:e}", report.max_relative_error)?;
    writeln!(out, "tolerance\t{:e}", report.tolerance)?;
    writeln!(out, "result\t{}", if report.passed() { "pass" } else { "fail" })?;
    if !report.passed() {
        return Err(Error::InvalidArgument(format!(
            "gradient check failed: {:e} > {:e}",
            report.max_relative_error, report.tolerance
        )));
    }
    Ok(())
}
