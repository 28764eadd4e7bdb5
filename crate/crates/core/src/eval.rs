//! Evaluation of denoisers on a manifest split, and ablation sweeps.

use std::time::{Duration, Instant};

use crate::config::TrainConfig;
use crate::data::{ColorMode, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::filters::gaussian_blur;
use crate::generator::{Generator, NormState};
use crate::metrics::{hfrr, psnr, radial_spectrum, ssim, wavelet_mae, MetricsReport, MetricsRow, RadialSpectrum};
use crate::params::ParamMap;
use crate::tensor::Tensor;
use crate::train::{Trainer, TrainedModel};
use crate::wavelet::{family, pad_reflect};

pub const NOISY_LABEL: &str = "noisy";
pub const BLUR_LABEL: &str = "gaussian_blur";
pub const MODEL_LABEL: &str = "model";
/// Label of the mean target spectrum in [`EvalOutput::spectra`].
pub const TARGET_LABEL: &str = "target";
pub const DEFAULT_BLUR_SIGMA: f64 = 1.0;
pub const DEFAULT_SPECTRUM_BINS: usize = 33;
/// Wall-clock allowance for one ablation variant.
pub const DEFAULT_VARIANT_BUDGET: Duration = Duration::from_secs(600);

/// Anything that maps a noisy image to an estimate of the same shape.
pub trait EvalMethod {
    fn label(&self) -> &str;
    fn run(&self, noisy: &Tensor) -> Result<Tensor>;
}

/// The input itself, as the floor every denoiser should beat.
pub struct NoisyInput;

impl EvalMethod for NoisyInput {
    fn label(&self) -> &str {
        NOISY_LABEL
    }

    fn run(&self, noisy: &Tensor) -> Result<Tensor> {
        Ok(noisy.clone())
    }
}

pub struct GaussianBlur {
    pub sigma: f64,
}

impl EvalMethod for GaussianBlur {
    fn label(&self) -> &str {
        BLUR_LABEL
    }

    fn run(&self, noisy: &Tensor) -> Result<Tensor> {
        gaussian_blur(noisy, self.sigma)
    }
}

/// A generator with fixed weights.
pub struct ModelMethod<'a> {
    pub label: String,
    pub generator: &'a Generator,
    pub params: &'a ParamMap,
    pub norms: &'a NormState,
}

impl<'a> ModelMethod<'a> {
    pub fn trained(label: &str, model: &'a TrainedModel) -> Self {
        ModelMethod {
            label: label.to_string(),
            generator: &model.generator,
            params: &model.params,
            norms: &model.norms,
        }
    }

    pub fn in_training(label: &str, trainer: &'a Trainer) -> Self {
        ModelMethod {
            label: label.to_string(),
            generator: &trainer.models.generator,
            params: &trainer.state.g_params,
            norms: &trainer.state.g_norms,
        }
    }
}

impl EvalMethod for ModelMethod<'_> {
    fn label(&self) -> &str {
        &self.label
    }

    fn run(&self, noisy: &Tensor) -> Result<Tensor> {
        self.generator.denoise(self.params, self.norms, noisy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub hfrr_cutoff: f64,
    pub wavelet: String,
    pub wavelet_levels: usize,
    pub blur_sigma: f64,
    /// Annuli per spectrum; fixed so images of any size share one grid.
    pub spectrum_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hfrr_cutoff: crate::metrics::DEFAULT_HFRR_CUTOFF,
            wavelet: "haar".into(),
            wavelet_levels: 2,
            blur_sigma: DEFAULT_BLUR_SIGMA,
            spectrum_bins: DEFAULT_SPECTRUM_BINS,
        }
    }
}

impl EvalConfig {
    /// Metric settings matching a training config.
    pub fn for_training(config: &TrainConfig) -> Self {
        EvalConfig {
            wavelet: config.generator.wavelet.clone(),
            wavelet_levels: config.loss.wavelet_levels,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub report: MetricsReport,
    /// Mean radial spectrum per method, then of the targets.
    pub spectra: Vec<(String, RadialSpectrum)>,
}

/// Materialize every record of `split`.
pub fn eval_samples(manifest: &DatasetManifest, split: &str, mode: ColorMode) -> Result<Vec<Sample>> {
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::Manifest {
            line: 0,
            detail: format!("no records in split `{split}`"),
        });
    }
    records.iter().map(|r| r.materialize(&manifest.base_dir, mode)).collect()
}

/// The context baselines followed by `model`.
pub fn with_baselines<'a>(config: &EvalConfig, model: Option<&'a dyn EvalMethod>) -> Vec<Box<dyn EvalMethod + 'a>> {
    let mut methods: Vec<Box<dyn EvalMethod + 'a>> = vec![
        Box::new(NoisyInput),
        Box::new(GaussianBlur {
            sigma: config.blur_sigma,
        }),
    ];
    if let Some(m) = model {
        methods.push(Box::new(Borrowed(m)));
    }
    methods
}

struct Borrowed<'a>(&'a dyn EvalMethod);

impl EvalMethod for Borrowed<'_> {
    fn label(&self) -> &str {
        self.0.label()
    }

    fn run(&self, noisy: &Tensor) -> Result<Tensor> {
        self.0.run(noisy)
    }
}

fn padded_wavelet_mae(estimate: &Tensor, target: &Tensor, config: &EvalConfig) -> Result<f64> {
    let multiple = 1usize << config.wavelet_levels;
    wavelet_mae(
        &pad_reflect(estimate, multiple)?,
        &pad_reflect(target, multiple)?,
        config.wavelet_levels,
        family(&config.wavelet)?,
    )
}

/// One row per (sample, method), samples outermost.
pub fn evaluate(methods: &[Box<dyn EvalMethod + '_>], samples: &[Sample], config: &EvalConfig) -> Result<EvalOutput> {
    if config.spectrum_bins < 2 {
        return Err(Error::invalid("evaluate", "spectrum_bins must be at least 2"));
    }
    let mut report = MetricsReport::new(config.hfrr_cutoff);
    let mut sums: Vec<Vec<f64>> = vec![vec![0.0; config.spectrum_bins]; methods.len() + 1];
    let mut last: Option<RadialSpectrum> = None;
    for s in samples {
        for (mi, m) in methods.iter().enumerate() {
            let est = m.run(&s.noisy)?;
            est.expect_same_shape(&s.target, "evaluate")?;
            report.rows.push(MetricsRow {
                image_id: s.id.clone(),
                method: m.label().to_string(),
                noise_level: s.noise_level.clone(),
                psnr_db: psnr(&est, &s.target, 1.0)?,
                ssim: ssim(&est, &s.target, 1.0)?,
                hfrr: hfrr(&est, &s.target, config.hfrr_cutoff)?,
                wavelet_mae: padded_wavelet_mae(&est, &s.target, config)?,
            });
            accumulate(&mut sums[mi], &radial_spectrum(&est, Some(config.spectrum_bins))?);
        }
        let t = radial_spectrum(&s.target, Some(config.spectrum_bins))?;
        accumulate(&mut sums[methods.len()], &t);
        last = Some(t);
    }
    let spectra = match last {
        Some(grid) => {
            let labels = methods.iter().map(|m| m.label().to_string()).chain([TARGET_LABEL.to_string()]);
            labels
                .zip(sums)
                .map(|(label, sum)| {
                    let power = sum.iter().map(|p| p / samples.len() as f64).collect();
                    (label, RadialSpectrum { power, ..grid.clone() })
                })
                .collect()
        }
        None => Vec::new(),
    };
    Ok(EvalOutput { report, spectra })
}

fn accumulate(sum: &mut [f64], s: &RadialSpectrum) {
    for (a, p) in sum.iter_mut().zip(&s.power) {
        *a += p;
    }
}

/// Evaluate a trained model with the noisy and blur baselines.
pub fn evaluate_model(model: &dyn EvalMethod, samples: &[Sample], config: &EvalConfig) -> Result<EvalOutput> {
    evaluate(&with_baselines(config, Some(model)), samples, config)
}

/// A named configuration change relative to the full model.
#[derive(Clone, Copy, Debug)]
pub struct Variant {
    pub name: &'static str,
    pub label: &'static str,
    pub table: &'static str,
    apply: fn(&mut TrainConfig),
}

impl Variant {
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        (self.apply)(&mut c);
        c.validate()?;
        Ok(c)
    }
}

fn no_iqa_loss(c: &mut TrainConfig, mode: &str) {
    c.ablation.fusion_mode = mode.into();
    c.ablation.iqa_loss_off = true;
}

const VARIANTS: &[Variant] = &[
    Variant {
        name: "full",
        label: "Full model",
        table: "components",
        apply: |_| {},
    },
    Variant {
        name: "fsff_off",
        label: "w/o FS-FF",
        table: "components",
        apply: |c| c.ablation.fsff_off = true,
    },
    Variant {
        name: "wavelet_branch_off",
        label: "w/o wavelet branch",
        table: "components",
        apply: |c| c.ablation.wavelet_branch_off = true,
    },
    Variant {
        name: "wcg_off",
        label: "w/o WCG block",
        table: "components",
        apply: |c| c.ablation.wcg_off = true,
    },
    Variant {
        name: "wavelet_loss_off",
        label: "w/o wavelet loss",
        table: "components",
        apply: |c| c.ablation.wavelet_loss_off = true,
    },
    Variant {
        name: "naive_fusion",
        label: "Naive fusion",
        table: "components",
        apply: |c| c.ablation.naive_fusion = true,
    },
    Variant {
        name: "patchgan",
        label: "Baseline (PatchGAN)",
        table: "discriminator",
        apply: |c| {
            c.ablation.iqa_off = true;
            c.ablation.patch_head = true;
            c.ablation.iqa_loss_off = true;
        },
    },
    Variant {
        name: "fusion_none",
        label: "A: no fusion",
        table: "discriminator",
        apply: |c| no_iqa_loss(c, "none"),
    },
    Variant {
        name: "fusion_channel",
        label: "B: channel fusion",
        table: "discriminator",
        apply: |c| no_iqa_loss(c, "channel"),
    },
    Variant {
        name: "fusion_spatial",
        label: "C: spatial fusion",
        table: "discriminator",
        apply: |c| no_iqa_loss(c, "spatial"),
    },
    Variant {
        name: "fusion_channel_iqa",
        label: "D: channel fusion + IQA loss",
        table: "discriminator",
        apply: |c| c.ablation.fusion_mode = "channel".into(),
    },
];

pub fn all_variants() -> &'static [Variant] {
    VARIANTS
}

pub fn variant(name: &str) -> Result<Variant> {
    VARIANTS.iter().find(|v| v.name == name).copied().ok_or_else(|| {
        let known: Vec<&str> = VARIANTS.iter().map(|v| v.name).collect();
        Error::invalid("ablate", format!("unknown variant `{name}` (known: {})", known.join(", ")))
    })
}

/// The full model and the component ablations.
pub fn component_variants() -> Vec<Variant> {
    VARIANTS.iter().filter(|v| v.table == "components").copied().collect()
}

/// Discriminator ablations; the full model itself is the last row of that
/// table and is not repeated here.
pub fn discriminator_variants() -> Vec<Variant> {
    VARIANTS.iter().filter(|v| v.table == "discriminator").copied().collect()
}

/// `components`, `discriminator`, `all`, or a comma-separated list of names.
pub fn variant_set(spec: &str) -> Result<Vec<Variant>> {
    match spec {
        "all" => Ok(VARIANTS.to_vec()),
        "components" => Ok(component_variants()),
        "discriminator" => Ok(discriminator_variants()),
        list => list.split(',').map(|n| variant(n.trim())).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub table: String,
    pub seed: u64,
    pub steps: u64,
    /// False when the budget ran out before the configured steps.
    pub completed: bool,
    pub seconds: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hfrr: f64,
    pub wavelet_mae: f64,
}

#[derive(Clone, Debug)]
pub struct AblationSettings {
    pub budget: Duration,
    pub eval: EvalConfig,
    pub split: String,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            budget: DEFAULT_VARIANT_BUDGET,
            eval: EvalConfig::default(),
            split: "eval".into(),
        }
    }
}

/// Train one variant from `base` and score it on the eval split.
pub fn run_variant(base: &TrainConfig, v: &Variant, settings: &AblationSettings) -> Result<AblationRow> {
    let config = v.apply(base)?;
    let samples = eval_samples(&config.dataset()?, &settings.split, config.color()?)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(config)?;
    let target = trainer.models.config.train.steps;
    while trainer.state.step < target && start.elapsed() < settings.budget {
        trainer.step()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    let model = ModelMethod::in_training(MODEL_LABEL, &trainer);
    let out = evaluate(&[Box::new(Borrowed(&model))], &samples, &settings.eval)?;
    let s = out
        .report
        .method(MODEL_LABEL)
        .ok_or_else(|| Error::invalid("ablate", "evaluation produced no rows"))?;
    Ok(AblationRow {
        variant: v.name.to_string(),
        label: v.label.to_string(),
        table: v.table.to_string(),
        seed: base.train.seed,
        steps: trainer.state.step,
        completed: trainer.state.step == target,
        seconds,
        psnr_db: s.psnr_db,
        ssim: s.ssim,
        hfrr: s.hfrr,
        wavelet_mae: s.wavelet_mae,
    })
}

/// Run every variant under the same seed and step count; the full model,
/// when present, comes first. `observe` sees each row as it finishes.
pub fn ablate(
    base: &TrainConfig,
    variants: &[Variant],
    settings: &AblationSettings,
    mut observe: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::invalid("ablate", "empty variant list"));
    }
    let mut order: Vec<&Variant> = variants.iter().filter(|v| v.name == "full").take(1).collect();
    order.extend(variants.iter().filter(|v| v.name != "full"));
    let mut rows = Vec::with_capacity(order.len());
    for v in order {
        let row = run_variant(base, v, settings)?;
        observe(&row);
        rows.push(row);
    }
    Ok(rows)
}
