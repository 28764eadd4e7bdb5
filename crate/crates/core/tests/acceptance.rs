//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line; pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test -p qwd-core --test acceptance -- 1 3 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qwd_core::autodiff::gradcheck::{grad_check, GradCheckReport};
use qwd_core::autodiff::{Bound, RunningStats, Tape, Var};
use qwd_core::checkpoint::Checkpoint;
use qwd_core::config::TrainConfig;
use qwd_core::data::{frame_average, phantom_set, NoiseKind};
use qwd_core::discriminator::{spatial_modulate, Discriminator, DiscriminatorConfig};
use qwd_core::eval::{
    ablate, eval_samples, evaluate_model, variant_set, AblationRow, AblationSettings, EvalConfig, ModelMethod,
    BLUR_LABEL, MODEL_LABEL, NOISY_LABEL,
};
use qwd_core::filters::gaussian_blur;
use qwd_core::generator::{Generator, GeneratorConfig, WaveletBranch};
use qwd_core::losses::{extractor, l_gan_d, l_gan_g, l_iqa, l_percep, l_recon, l_wavelet};
use qwd_core::metrics::{hfrr, psnr, radial_spectrum, ssim, DEFAULT_HFRR_CUTOFF};
use qwd_core::params::ParamMap;
use qwd_core::report::{write_ablation, ABLATION_HEADER};
use qwd_core::train::{TrainedModel, Trainer};
use qwd_core::wavelet::{dwt2, family, idwt2, wtc_apply, WaveletPyramid};
use qwd_core::{Error, Tensor};

type Outcome = std::result::Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, &mut rng(seed))
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> std::result::Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("{what} took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64()))
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

// 1

fn wavelet_round_trip() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst1: f64 = 0.0;
    let mut worst3: f64 = 0.0;
    for name in ["haar", "db2"] {
        let f = family(name).map_err(err)?;
        for _ in 0..100 {
            let x = Tensor::rand_uniform(vec![1, 1, 64, 64], -1.0, 1.0, &mut r);
            let back = idwt2(&dwt2(&x, &*f).map_err(err)?, &*f).map_err(err)?;
            worst1 = worst1.max(back.max_abs_diff(&x));
            let pyr = WaveletPyramid::decompose(&x, 3, Arc::clone(&f)).map_err(err)?;
            worst3 = worst3.max(pyr.reconstruct().map_err(err)?.max_abs_diff(&x));
        }
    }
    let elapsed = start.elapsed();
    ensure!(worst1 < 1e-10, "single level error {worst1:e}");
    ensure!(worst3 < 1e-9, "3-level error {worst3:e}");
    within(elapsed, Duration::from_secs(5), "round trips")?;
    Ok(format!(
        "max error {worst1:.1e} (1 level), {worst3:.1e} (3 levels), {:.2}s",
        elapsed.as_secs_f64()
    ))
}

// 2

const PROBES: usize = 6;

struct Probed {
    name: &'static str,
    limit: f64,
    report: GradCheckReport,
}

fn probe<F>(out: &mut Vec<Probed>, name: &'static str, limit: f64, inputs: &[Tensor], seed: u64, f: F) -> std::result::Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> qwd_core::Result<Var>,
{
    let report = grad_check(f, inputs, PROBES, seed).map_err(|e| format!("{name}: {e}"))?;
    out.push(Probed { name, limit, report });
    Ok(())
}

/// `sum(y * proj)` for a fixed random projection, so every output element
/// gets a distinct upstream gradient.
fn project(t: &mut Tape, y: Var, seed: u64) -> qwd_core::Result<Var> {
    let shape = t.shape(y).to_vec();
    let p = t.constant(Tensor::randn(shape, 1.0, &mut rng(seed)))?;
    let m = t.mul(y, p)?;
    t.sum(m)
}

fn bound_from(names: &[String], vars: &[Var]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut probes = Vec::new();
    let tight = 1e-6;
    let loose = 1e-5;

    let x = uniform(&[2, 4, 9, 9], -1.0, 1.0, 10);
    let w = Tensor::randn(vec![6, 2, 3, 3], 0.5, &mut rng(11));
    let b = Tensor::randn(vec![6], 0.5, &mut rng(12));
    probe(&mut probes, "conv2d", tight, &[x.clone(), w.clone(), b.clone()], 1, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 2)?;
        project(t, y, 13)
    })?;
    let w5 = Tensor::randn(vec![3, 4, 5, 5], 0.5, &mut rng(14));
    probe(&mut probes, "conv2d stride 2", tight, &[x, w5], 2, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 2, 1)?;
        project(t, y, 15)
    })?;

    let inputs = [
        uniform(&[3, 7], -1.0, 1.0, 16),
        Tensor::randn(vec![5, 7], 0.5, &mut rng(17)),
        Tensor::randn(vec![5], 0.5, &mut rng(18)),
    ];
    probe(&mut probes, "dense", tight, &inputs, 3, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        project(t, y, 19)
    })?;

    let a = uniform(&[2, 3, 5, 5], -2.0, 2.0, 20);
    probe(&mut probes, "relu", tight, &[a.clone()], 4, |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 21)
    })?;
    probe(&mut probes, "leaky_relu", tight, &[a.clone()], 5, |t, v| {
        let y = t.leaky_relu(v[0], 0.2)?;
        project(t, y, 22)
    })?;
    probe(&mut probes, "sigmoid", tight, &[a.clone()], 6, |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, 23)
    })?;
    probe(&mut probes, "tanh", tight, &[a], 7, |t, v| {
        let y = t.tanh(v[0])?;
        project(t, y, 24)
    })?;

    for (name, fam, seed) in [("wtc_apply haar", "haar", 30), ("wtc_apply db2", "db2", 40)] {
        let f = family(fam).map_err(err)?;
        let mut inputs = vec![uniform(&[2, 4, 8, 8], -1.0, 1.0, seed)];
        for k in 0..4 {
            inputs.push(Tensor::randn(vec![4, 2, 3, 3], 0.5, &mut rng(seed + 1 + k)));
        }
        probe(&mut probes, name, tight, &inputs, seed, |t, v| {
            let y = wtc_apply(t, v[0], [v[1], v[2], v[3], v[4]], 2, &f)?;
            project(t, y, seed + 9)
        })?;
    }

    let yhat = uniform(&[2, 1, 16, 16], 0.0, 1.0, 50);
    let y = uniform(&[2, 1, 16, 16], 0.0, 1.0, 51);
    let pair = [yhat, y];
    probe(&mut probes, "l_recon", tight, &pair, 8, |t, v| l_recon(t, v[0], v[1]))?;
    let ex = extractor("random-conv").map_err(err)?;
    probe(&mut probes, "l_percep", tight, &pair, 9, |t, v| l_percep(t, v[0], v[1], &*ex))?;
    let haar = family("haar").map_err(err)?;
    probe(&mut probes, "l_wavelet", tight, &pair, 10, |t, v| l_wavelet(t, v[0], v[1], 3, &haar))?;
    probe(&mut probes, "l_iqa", tight, &pair, 11, |t, v| l_iqa(t, v[0], v[1]))?;
    let scores = [uniform(&[8, 1], 0.05, 0.95, 52), uniform(&[8, 1], 0.05, 0.95, 53)];
    probe(&mut probes, "l_gan_g", tight, &scores[..1], 12, |t, v| l_gan_g(t, v[0]))?;
    probe(&mut probes, "l_gan_d", tight, &scores, 13, |t, v| l_gan_d(t, v[0], v[1]))?;

    let bn = [
        uniform(&[3, 4, 5, 5], -1.0, 1.0, 60),
        uniform(&[4], 0.5, 1.5, 61),
        Tensor::randn(vec![4], 0.3, &mut rng(62)),
    ];
    probe(&mut probes, "batch_norm", loose, &bn, 14, |t, v| {
        let mut running = RunningStats::new(4);
        let y = t.batch_norm(v[0], v[1], v[2], &mut running, true)?;
        project(t, y, 63)
    })?;

    for (branch, fusion, seed) in [
        (WaveletBranch::Wcg, "fsff", 70),
        (WaveletBranch::Plain, "concat", 80),
        (WaveletBranch::Wcg, "sum", 90),
    ] {
        let g = Generator::new(GeneratorConfig {
            base_channels: 4,
            scales: 2,
            wcg_groups: 2,
            wavelet_branch: branch,
            fusion: fusion.into(),
            ..Default::default()
        })
        .map_err(err)?;
        let (mut p, norms) = g.init(&mut rng(seed));
        // a live output head, otherwise everything upstream has zero gradient
        p.insert("g.out.w".into(), Tensor::randn(vec![1, 4, 3, 3], 0.3, &mut rng(seed + 1)));
        let names: Vec<String> = p.keys().cloned().collect();
        let mut inputs: Vec<Tensor> = p.values().cloned().collect();
        inputs.push(uniform(&[2, 1, 8, 8], 0.0, 1.0, seed + 2));
        let target = uniform(&[2, 1, 8, 8], 0.0, 1.0, seed + 3);
        probe(&mut probes, "generator", loose, &inputs, seed, |t, v| {
            let bound = bound_from(&names, &v[..names.len()]);
            let mut norms = norms.clone();
            let out = g.forward(t, &bound, &mut norms, v[names.len()], true)?;
            let yv = t.constant(target.clone())?;
            l_recon(t, out, yv)
        })?;
    }

    for (fusion, patch, seed) in [("spatial", false, 100), ("channel", false, 110), ("none", false, 120), ("spatial", true, 130)] {
        let d = Discriminator::new(DiscriminatorConfig {
            channels: [2, 3, 4, 4],
            fusion: fusion.into(),
            patch_head: patch,
            ..Default::default()
        })
        .map_err(err)?;
        let p: ParamMap = d.init(&mut rng(seed));
        let names: Vec<String> = p.keys().cloned().collect();
        let mut inputs: Vec<Tensor> = p.values().cloned().collect();
        inputs.push(uniform(&[2, 1, 16, 16], 0.0, 1.0, seed + 1));
        probe(&mut probes, "discriminator", loose, &inputs, seed, |t, v| {
            let bound = bound_from(&names, &v[..names.len()]);
            let s = d.forward(t, &bound, v[names.len()])?;
            l_gan_g(t, s)
        })?;
    }

    let elapsed = start.elapsed();
    for p in &probes {
        ensure!(p.report.probes.len() >= 5, "{}: only {} probes", p.name, p.report.probes.len());
        let e = p.report.max_rel_error();
        ensure!(e < p.limit, "{}: relative error {e:e} >= {:e} at {:?}", p.name, p.limit, p.report.worst());
    }
    within(elapsed, Duration::from_secs(120), "gradient checks")?;
    let worst_tight = probes.iter().filter(|p| p.limit == tight).map(|p| p.report.max_rel_error()).fold(0.0, f64::max);
    let worst_loose = probes.iter().filter(|p| p.limit == loose).map(|p| p.report.max_rel_error()).fold(0.0, f64::max);
    let total: usize = probes.iter().map(|p| p.report.probes.len()).sum();
    Ok(format!(
        "{} checks, {total} probes, worst {worst_tight:.1e} (ops, losses) and {worst_loose:.1e} (norm, networks), {:.1}s",
        probes.len(),
        elapsed.as_secs_f64()
    ))
}

// 3

const SPECTRUM_BINS: usize = 9;

fn metric_oracles() -> Outcome {
    // 8-bit images on the 0..255 scale, offset by 16 everywhere
    let a = Tensor::from_vec(vec![1, 1, 32, 32], (0..1024).map(|i| (i % 200) as f64).collect()).map_err(err)?;
    let b = a.map(|v| v + 16.0);
    let p = psnr(&b, &a, 255.0).map_err(err)?;
    let oracle = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
    ensure!((p - 24.0487).abs() <= 1e-3 && (p - oracle).abs() < 1e-9, "psnr {p} vs {oracle}");

    let x = uniform(&[1, 1, 64, 64], 0.0, 1.0, 200);
    let s = ssim(&x, &x, 1.0).map_err(err)?;
    ensure!(s == 1.0, "ssim(x, x) = {s}");
    let h = hfrr(&x, &x, DEFAULT_HFRR_CUTOFF).map_err(err)?;
    ensure!((h - 1.0).abs() <= 1e-12, "hfrr(x, x) = {h}");

    let phantoms = phantom_set(20, 64, 7).map_err(err)?;
    let mut r = rng(201);
    let (mut max_blur, mut min_noisy) = (0.0f64, f64::INFINITY);
    for (id, img) in &phantoms {
        let blurred = gaussian_blur(img, 1.0).map_err(err)?;
        let noisy = img.zip_map(&Tensor::randn(img.shape().to_vec(), 0.1, &mut r), |a, b| a + b).map_err(err)?;
        let hb = hfrr(&blurred, img, DEFAULT_HFRR_CUTOFF).map_err(err)?;
        let hn = hfrr(&noisy, img, DEFAULT_HFRR_CUTOFF).map_err(err)?;
        ensure!(hb < 1.0, "{id}: hfrr(blur) = {hb}");
        ensure!(hn > 1.0, "{id}: hfrr(noisy) = {hn}");
        max_blur = max_blur.max(hb);
        min_noisy = min_noisy.min(hn);
    }

    // unit-variance white noise has expected power 1 at every frequency;
    // annuli four index units wide, the innermost unit annuli hold too few
    // frequencies for 20 realizations to average below 10%
    let mut acc: Option<Vec<f64>> = None;
    for _ in 0..20 {
        let n = Tensor::randn(vec![1, 1, 64, 64], 1.0, &mut r);
        let s = radial_spectrum(&n, Some(SPECTRUM_BINS)).map_err(err)?;
        let a = acc.get_or_insert_with(|| vec![0.0; s.power.len()]);
        for (a, p) in a.iter_mut().zip(&s.power) {
            *a += p / 20.0;
        }
    }
    let acc = acc.unwrap_or_default();
    // the rho = 0 bin is a single frequency per realization
    let dev = acc[1..].iter().map(|p| (p - 1.0).abs()).fold(0.0, f64::max);
    ensure!(dev < 0.1, "white-noise spectrum deviates by {:.1}%", 100.0 * dev);
    Ok(format!(
        "psnr {p:.4} dB, max hfrr(blur) {max_blur:.3}, min hfrr(noise) {min_noisy:.3}, spectrum within {:.1}%",
        100.0 * dev
    ))
}

// 4

fn noise_protocol() -> Outcome {
    let sigma = 0.1;
    let clean = Tensor::full(vec![1, 1, 100, 100], 0.5);
    let mut worst: f64 = 0.0;
    for (i, n) in [1usize, 4, 16].into_iter().enumerate() {
        let avg = frame_average(&clean, &NoiseKind::Gaussian { sigma }, n, &mut rng(300 + i as u64)).map_err(err)?;
        let resid: Vec<f64> = avg.data().iter().zip(clean.data()).map(|(a, c)| a - c).collect();
        let m = resid.iter().sum::<f64>() / resid.len() as f64;
        let std = (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (resid.len() - 1) as f64).sqrt();
        let expect = sigma / (n as f64).sqrt();
        let rel = (std / expect - 1.0).abs();
        ensure!(rel < 0.05, "N={n}: std {std:.5} vs {expect:.5}");
        worst = worst.max(rel);
    }
    Ok(format!("worst relative deviation {:.2}%", 100.0 * worst))
}

// 5

fn quality_gate_invariants() -> Outcome {
    let f = Tensor::randn(vec![2, 5, 4, 4], 1.0, &mut rng(400));
    let modulate = |phi: &Tensor| -> qwd_core::Result<Tensor> {
        let mut t = Tape::new();
        let fv = t.constant(f.clone())?;
        let o = spatial_modulate(&mut t, fv, phi)?;
        Ok(t.value(o).clone())
    };
    for c in [0.0, 0.3, 2.7, 4.0] {
        let out = modulate(&Tensor::full(vec![2, 1, 16, 16], c)).map_err(err)?;
        ensure!(out == f, "constant map {c} changed the features");
    }
    let phi = uniform(&[2, 1, 16, 16], 0.0, 4.0, 401);
    let base = modulate(&phi).map_err(err)?;
    let mut worst: f64 = 0.0;
    for s in [1e-6, 0.01, 0.5, 3.0, 1e3, 1e6] {
        worst = worst.max(modulate(&phi.scale(s)).map_err(err)?.max_abs_diff(&base));
    }
    ensure!(worst <= 1e-12, "rescaled map moved features by {worst:e}");

    let x = uniform(&[3, 1, 32, 32], 0.0, 1.0, 402);
    for (fusion, patch) in [("spatial", false), ("channel", false), ("none", false), ("spatial", true)] {
        let d = Discriminator::new(DiscriminatorConfig {
            fusion: fusion.into(),
            patch_head: patch,
            ..Default::default()
        })
        .map_err(err)?;
        let mut p = d.init(&mut rng(403));
        for k in ["d.head.w", "d.head.b"] {
            p.get_mut(k).ok_or(format!("missing {k}"))?.data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let bound = t.bind(p.iter(), false).map_err(err)?;
        let xv = t.constant(x.clone()).map_err(err)?;
        let s = d.forward(&mut t, &bound, xv).map_err(err)?;
        ensure!(t.value(s).data().iter().all(|&v| v == 0.5), "{fusion} head: D != 0.5");
    }
    Ok(format!("rescaling drift {worst:.1e}, zero head gives 0.5 for 4 heads"))
}

// 6

fn identity_at_init() -> Outcome {
    let g = Generator::new(GeneratorConfig::default()).map_err(err)?;
    let (p, mut norms) = g.init(&mut rng(500));
    let x = uniform(&[2, 1, 32, 32], 0.0, 1.0, 501);
    let mut t = Tape::new();
    let bound = t.bind(p.iter(), true).map_err(err)?;
    let xv = t.constant(x.clone()).map_err(err)?;
    let y = g.forward(&mut t, &bound, &mut norms, xv, true).map_err(err)?;
    ensure!(t.value(y) == &x, "generator output differs from its input");

    let mut config = TrainConfig::default();
    config.train.patch_size = 32;
    let mut trainer = Trainer::new(config).map_err(err)?;
    let batch = trainer.models.batch_for(&trainer.data, 0).map_err(err)?;
    let expect = batch
        .noisy
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / batch.noisy.numel() as f64;
    let log = trainer.step().map_err(err)?;
    let recon = log.terms.recon / trainer.models.config.loss.mu1_l1;
    let rel = (recon - expect).abs() / expect;
    ensure!(rel < 1e-12, "first-step l_recon {recon} vs mean |noisy - target| {expect}");
    Ok(format!("output == input, first-step l_recon {recon:.6} (relative gap {rel:.1e})"))
}

// 7

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let config = TrainConfig::default();
    ensure!(
        config.train.steps == 2000 && config.train.batch_size == 4 && config.train.seed == 0,
        "unexpected defaults"
    );
    ensure!(config.data.phantoms == 32 && config.data.eval_phantoms == 8 && config.data.phantom_size == 64, "unexpected data defaults");
    ensure!(config.noise().map_err(err)? == NoiseKind::Gaussian { sigma: 0.1 }, "unexpected noise");
    let ecfg = EvalConfig::for_training(&config);
    let samples = eval_samples(&config.dataset().map_err(err)?, "eval", config.color().map_err(err)?).map_err(err)?;
    let mut trainer = Trainer::new(config).map_err(err)?;
    trainer.run(|_| {}).map_err(err)?;
    let trained = TrainedModel::from_checkpoint(&trainer.checkpoint()).map_err(err)?;
    let elapsed = start.elapsed();
    let model = ModelMethod::trained(MODEL_LABEL, &trained);
    let out = evaluate_model(&model, &samples, &ecfg).map_err(err)?;
    let get = |m: &str| out.report.method(m).ok_or(format!("no {m} rows"));
    let (noisy, blur, g) = (get(NOISY_LABEL)?, get(BLUR_LABEL)?, get(MODEL_LABEL)?);
    ensure!(noisy.images == 8, "{} held-out images", noisy.images);
    let summary = format!(
        "psnr {:.2} -> {:.2} dB, ssim {:.4} -> {:.4}, |hfrr-1| model {:.3} vs blur {:.3}, {:.0}s",
        noisy.psnr_db,
        g.psnr_db,
        noisy.ssim,
        g.ssim,
        (g.hfrr - 1.0).abs(),
        (blur.hfrr - 1.0).abs(),
        elapsed.as_secs_f64()
    );
    ensure!(g.psnr_db - noisy.psnr_db >= 3.0, "psnr gain too small: {summary}");
    ensure!(g.ssim > noisy.ssim, "ssim did not improve: {summary}");
    ensure!((g.hfrr - 1.0).abs() < (blur.hfrr - 1.0).abs(), "hfrr not closer to 1 than blur: {summary}");
    within(elapsed, Duration::from_secs(30 * 60), "training")?;
    Ok(summary)
}

// 8

/// Shorter, smaller-patch training than the benchmark run keeps eleven
/// variants plus the extra seeds to a reasonable test time.
const ABLATION_STEPS: u64 = 1000;
const ABLATION_PATCH: usize = 32;
const ABLATION_SEEDS: u64 = 5;

fn ablation_base(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.train.steps = ABLATION_STEPS;
    c.train.patch_size = ABLATION_PATCH;
    c.train.seed = seed;
    c
}

fn ablation_harness() -> Outcome {
    let settings = AblationSettings::default();
    let variants = variant_set("all").map_err(err)?;
    let components = variants.iter().filter(|v| v.table == "components").count();
    let disc = variants.iter().filter(|v| v.table == "discriminator").count();
    ensure!(components == 6 && disc == 5, "{components} component and {disc} discriminator variants");
    let rows = ablate(&ablation_base(0), &variants, &settings, |_| {}).map_err(err)?;
    ensure!(rows.len() == 11, "{} rows", rows.len());
    for r in &rows {
        ensure!(r.completed, "{} stopped at step {} of {ABLATION_STEPS}", r.variant, r.steps);
        ensure!(r.seconds < settings.budget.as_secs_f64(), "{} took {:.0}s", r.variant, r.seconds);
        ensure!(r.wavelet_mae.is_finite() && r.psnr_db.is_finite(), "{} produced non-finite metrics", r.variant);
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ablation.csv");
    write_ablation(&path, &rows).map_err(err)?;
    let csv = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    ensure!(csv.starts_with(ABLATION_HEADER) && csv.lines().count() == 12, "malformed ablation csv");

    let pick = |rows: &[AblationRow], name: &str| rows.iter().find(|r| r.variant == name).map(|r| r.wavelet_mae);
    let mut pairs = vec![(
        pick(&rows, "full").ok_or("no full row")?,
        pick(&rows, "wavelet_loss_off").ok_or("no wavelet_loss_off row")?,
    )];
    let pair = variant_set("full,wavelet_loss_off").map_err(err)?;
    for seed in 1..ABLATION_SEEDS {
        let rows = ablate(&ablation_base(seed), &pair, &settings, |_| {}).map_err(err)?;
        pairs.push((pick(&rows, "full").ok_or("no full row")?, pick(&rows, "wavelet_loss_off").ok_or("no row")?));
    }
    let wins = pairs.iter().filter(|(full, off)| full < off).count();
    let detail: Vec<String> = pairs.iter().map(|(a, b)| format!("{a:.5}/{b:.5}")).collect();
    let slowest = rows.iter().map(|r| r.seconds).fold(0.0, f64::max);
    ensure!(wins >= 4, "full beat wavelet_loss_off on wavelet MAE in {wins} of 5 seeds ({})", detail.join(" "));
    Ok(format!(
        "11 variants in budget (slowest {slowest:.0}s), full wins {wins}/5 on wavelet MAE ({})",
        detail.join(" ")
    ))
}

// 9

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.train.steps = 3;
    c.train.patch_size = 16;
    c.data.phantoms = 2;
    c.data.eval_phantoms = 1;
    c.data.phantom_size = 32;
    c
}

fn trained_bytes() -> std::result::Result<Vec<u8>, String> {
    let mut t = Trainer::new(tiny_config()).map_err(err)?;
    t.run(|_| {}).map_err(err)?;
    Ok(t.checkpoint().to_bytes())
}

fn rejected(path: &Path, bytes: &[u8]) -> bool {
    std::fs::write(path, bytes).is_ok() && Checkpoint::load(path).is_err()
}

fn determinism_and_persistence() -> Outcome {
    let a = trained_bytes()?;
    let b = trained_bytes()?;
    ensure!(a == b, "same config and seed gave different checkpoints");

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = dir.path().join("a.qwdg");
    let second = dir.path().join("b.qwdg");
    Checkpoint::from_bytes(&a).map_err(err)?.save(&first).map_err(err)?;
    let loaded = Checkpoint::load(&first).map_err(err)?;
    loaded.save(&second).map_err(err)?;
    let (fa, fb) = (std::fs::read(&first).map_err(|e| e.to_string())?, std::fs::read(&second).map_err(|e| e.to_string())?);
    ensure!(fa == a && fb == a, "save -> load -> save changed bytes");
    let resumed = Trainer::resume(&loaded).map_err(err)?;
    ensure!(resumed.checkpoint().to_bytes() == a, "resumed trainer does not reproduce the checkpoint");

    let bad = dir.path().join("bad.qwdg");
    let mut corrupt = 0;
    for i in [0, 5, 17, a.len() / 3, a.len() / 2, a.len() - 1] {
        let mut c = a.clone();
        c[i] ^= 0x5a;
        ensure!(rejected(&bad, &c), "flipped byte {i} was accepted");
        corrupt += 1;
    }
    for cut in [0, 3, 12, a.len() / 2, a.len() - 4] {
        ensure!(rejected(&bad, &a[..cut]), "file truncated to {cut} bytes was accepted");
        corrupt += 1;
    }
    let mut longer = a.clone();
    longer.push(0);
    ensure!(rejected(&bad, &longer), "trailing byte was accepted");
    ensure!(Checkpoint::load(&dir.path().join("missing.qwdg")).is_err(), "missing file was accepted");
    Ok(format!("{} byte checkpoint reproduced and round-tripped, {} corruptions rejected", a.len(), corrupt + 1))
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: &[Criterion] = &[
    (1, "wavelet round trip", wavelet_round_trip),
    (2, "gradient fidelity", gradient_fidelity),
    (3, "metric oracles", metric_oracles),
    (4, "noise protocol", noise_protocol),
    (5, "quality gate invariants", quality_gate_invariants),
    (6, "identity at init", identity_at_init),
    (7, "end-to-end benchmark", end_to_end),
    (8, "ablation harness", ablation_harness),
    (9, "determinism and persistence", determinism_and_persistence),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
