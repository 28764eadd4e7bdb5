//! `qwd`: simulate noisy data, train, denoise, evaluate and ablate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qwd_core::checkpoint::Checkpoint;
use qwd_core::config::TrainConfig;
use qwd_core::data::{load_image, save_image, BitDepth, ColorMode};
use qwd_core::eval::{self, AblationSettings, EvalConfig, ModelMethod, MODEL_LABEL};
use qwd_core::metrics::radial_spectrum;
use qwd_core::report;
use qwd_core::train::{log_csv, TrainedModel, Trainer};
use qwd_core::fsio::write_atomic;

#[derive(Parser)]
#[command(name = "qwd", version, about = "Wavelet-guided adversarial image denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write noisy PNGs (and optionally targets) for every manifest record.
    Simulate(SimulateArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Denoise a PNG file or every PNG in a directory.
    Denoise(DenoiseArgs),
    /// Score a checkpoint against baselines on a manifest split.
    Eval(EvalArgs),
    /// Radially averaged power spectra of images.
    Spectrum(SpectrumArgs),
    /// Train and score a set of ablation variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; flags below override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config value, e.g. `--set ablation.wcg_off=true`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Dataset manifest; without one, synthetic phantoms are used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Noise model for synthetic phantoms, e.g. `gaussian:0.1`, `poisson:30`.
    #[arg(long)]
    noise: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let mut pairs = Vec::new();
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` must look like section.key=value"))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("train.steps", self.steps.map(|v| v.to_string())),
            ("train.seed", self.seed.map(|v| v.to_string())),
            ("train.learning_rate", self.learning_rate.map(|v| format!("{v:?}"))),
            ("train.batch_size", self.batch_size.map(|v| v.to_string())),
            ("train.patch_size", self.patch_size.map(|v| v.to_string())),
            ("data.noise", self.noise.clone()),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        let refs: Vec<(&str, &str)> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        c.set_many(&refs)?;
        if let Some(m) = &self.manifest {
            c.data.manifest = Some(m.clone());
            c.validate()?;
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<Depth> for BitDepth {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Eight => BitDepth::Eight,
            Depth::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Only records of this split.
    #[arg(long)]
    split: Option<String>,
    /// Also write `<id>_target.png`.
    #[arg(long)]
    targets: bool,
    #[arg(long, value_enum, default_value = "16")]
    depth: Depth,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for `model.qwdg`, `train_log.csv` and `config.toml`.
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from a checkpoint; its stored config is used, except `--steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print progress every N steps (0 = never).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
    /// Also write the checkpoint every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG file or directory of PNGs.
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "16")]
    depth: Depth,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to evaluate; defaults to the data the checkpoint was trained with.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "eval")]
    split: String,
    /// Output directory for `metrics.csv`, `summary.csv` and `spectrum.csv`.
    #[arg(long, short)]
    out: PathBuf,
    /// HFRR cutoff in cycles/pixel.
    #[arg(long, default_value_t = qwd_core::metrics::DEFAULT_HFRR_CUTOFF)]
    hfrr_cutoff: f64,
    #[arg(long, default_value_t = eval::DEFAULT_BLUR_SIGMA)]
    blur_sigma: f64,
    /// Also plot the spectra to `spectrum.svg`.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct SpectrumArgs {
    /// PNG images.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// CSV output (label, rho, power).
    #[arg(long, short)]
    out: PathBuf,
    /// SVG plot output.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Number of annuli; defaults to one per integer frequency.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// `all`, `components`, `discriminator`, or comma-separated variant names.
    #[arg(long, default_value = "all")]
    variants: String,
    /// Comma-separated seeds; defaults to the config seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Wall-clock budget per variant, in seconds.
    #[arg(long, default_value_t = eval::DEFAULT_VARIANT_BUDGET.as_secs())]
    budget_secs: u64,
    /// Output directory for `ablation.csv`.
    #[arg(long, short)]
    out: PathBuf,
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let config = a.config.resolve()?;
    let manifest = config.dataset()?;
    let color = config.color()?;
    let mut written = 0;
    for r in &manifest.records {
        if a.split.as_deref().is_some_and(|s| s != r.split) {
            continue;
        }
        let s = r.materialize(&manifest.base_dir, color)?;
        save_image(&a.out.join(format!("{}.png", s.id)), &s.noisy, a.depth.into())?;
        if a.targets {
            save_image(&a.out.join(format!("{}_target.png", s.id)), &s.target, a.depth.into())?;
        }
        written += 1;
    }
    if written == 0 {
        bail!(qwd_core::Error::Manifest {
            line: 0,
            detail: "no records selected".into()
        });
    }
    eprintln!("wrote {written} noisy images to {}", a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let mut t = Trainer::resume(&Checkpoint::load(p)?)?;
            if let Some(s) = a.config.steps {
                t.models.config.train.steps = s;
            }
            t
        }
        None => Trainer::new(a.config.resolve()?)?,
    };
    let ckpt_path = a.out.join("model.qwdg");
    write_atomic(&a.out.join("config.toml"), trainer.models.config.to_toml().as_bytes())?;
    let total = trainer.models.config.train.steps;
    let start = Instant::now();
    let mut logs = Vec::new();
    while trainer.state.step < total {
        let log = trainer.step()?;
        if a.log_every > 0 && (log.step % a.log_every == 0 || log.step == total) {
            eprintln!(
                "step {:>6}/{total}  g_loss {:.5}  d_loss {:.5}  recon {:.5}  {:.1}s",
                log.step,
                log.g_loss,
                log.d_loss,
                log.terms.recon,
                start.elapsed().as_secs_f64()
            );
        }
        logs.push(log);
        if a.checkpoint_every.is_some_and(|n| n > 0 && trainer.state.step % n == 0) {
            trainer.checkpoint().save(&ckpt_path)?;
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    write_atomic(&a.out.join("train_log.csv"), log_csv(&logs).as_bytes())?;
    eprintln!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = std::fs::read_dir(input).map_err(|e| qwd_core::Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!(qwd_core::Error::ImageFormat {
            path: input.to_path_buf(),
            detail: "no PNG files found".into()
        });
    }
    Ok(files)
}

fn denoise(a: &DenoiseArgs) -> Result<()> {
    let model = TrainedModel::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let color = model.config.color()?;
    let files = png_inputs(&a.input)?;
    for f in &files {
        let x = load_image(f, color)?;
        let y = model.denoise(&x).with_context(|| format!("denoising {}", f.display()))?;
        let name = f.file_name().expect("listed files have names");
        save_image(&a.out.join(name), &y, a.depth.into())?;
    }
    eprintln!("denoised {} images into {}", files.len(), a.out.display());
    Ok(())
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let model = TrainedModel::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let mut data_config = model.config.clone();
    if let Some(m) = &a.manifest {
        data_config.data.manifest = Some(m.clone());
    }
    let samples = eval::eval_samples(&data_config.dataset()?, &a.split, data_config.color()?)?;
    let config = EvalConfig {
        hfrr_cutoff: a.hfrr_cutoff,
        blur_sigma: a.blur_sigma,
        ..EvalConfig::for_training(&model.config)
    };
    let method = ModelMethod::trained(MODEL_LABEL, &model);
    let out = eval::evaluate_model(&method, &samples, &config)?;
    report::write_metrics(&a.out.join("metrics.csv"), &out.report)?;
    report::write_summary(&a.out.join("summary.csv"), &out.report)?;
    report::write_spectrum_csv(&a.out.join("spectrum.csv"), &out.spectra)?;
    if a.svg {
        report::write_spectrum_svg(&a.out.join("spectrum.svg"), &out.spectra, "Mean radial power spectrum")?;
    }
    print!("{}", report::summary_csv(&out.report));
    Ok(())
}

fn spectrum(a: &SpectrumArgs) -> Result<()> {
    let mut series = Vec::new();
    for p in &a.images {
        let x = load_image(p, ColorMode::Luminance)?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        series.push((label, radial_spectrum(&x, a.bins)?));
    }
    report::write_spectrum_csv(&a.out, &series)?;
    if let Some(svg) = &a.svg {
        report::write_spectrum_svg(svg, &series, "Radial power spectrum")?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let variants = eval::variant_set(&a.variants)?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => s
            .split(',')
            .map(|v| v.trim().parse().with_context(|| format!("seed `{v}` is not an integer")))
            .collect::<Result<_>>()?,
        None => vec![base.train.seed],
    };
    let settings = AblationSettings {
        budget: Duration::from_secs(a.budget_secs),
        eval: EvalConfig::for_training(&base),
        ..Default::default()
    };
    let path = a.out.join("ablation.csv");
    let mut rows = Vec::new();
    for seed in seeds {
        let mut c = base.clone();
        c.train.seed = seed;
        for row in eval::ablate(&c, &variants, &settings, |r| {
            eprintln!(
                "seed {} {:<20} psnr {:.3} ssim {:.4} hfrr {:.3} wavelet_mae {:.5} ({} steps, {:.0}s{})",
                r.seed,
                r.variant,
                r.psnr_db,
                r.ssim,
                r.hfrr,
                r.wavelet_mae,
                r.steps,
                r.seconds,
                if r.completed { "" } else { ", budget exhausted" }
            );
        })? {
            rows.push(row);
            report::write_ablation(&path, &rows)?;
        }
    }
    print!("{}", report::ablation_csv(&rows));
    Ok(())
}

/// 2 for bad input data, 3 for numeric failure, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<qwd_core::Error>() {
            return if e.is_numeric_error() {
                3
            } else if e.is_data_error() {
                2
            } else {
                1
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Denoise(a) => denoise(a),
        Command::Eval(a) => evaluate(a),
        Command::Spectrum(a) => spectrum(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
