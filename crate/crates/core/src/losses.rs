//! Training objectives for both networks.

use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::he_conv;
use crate::quality::{iqa_features_var, IQA_WINDOWS};
use crate::registry::Registry;
use crate::tensor::Tensor;
use crate::wavelet::{pyramid_vars, WaveletFamily};

/// Added inside every logarithm of the adversarial losses.
pub const LOG_EPS: f64 = 1e-12;

/// Mean absolute error.
pub fn l_recon(tape: &mut Tape, yhat: Var, y: Var) -> Result<Var> {
    tape.value(yhat).expect_same_shape(tape.value(y), "l_recon")?;
    let d = tape.sub(yhat, y)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Fixed feature stack standing in for a pretrained perceptual network.
pub trait PerceptualExtractor: Send + Sync {
    fn name(&self) -> &'static str;

    /// Stage outputs for a `[N, 1, H, W]` batch.
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>>;
}

/// Three conv-relu stages with He-normal weights drawn from a fixed seed;
/// stages two and three work at half and quarter resolution.
pub struct RandomConvExtractor {
    weights: Vec<Tensor>,
}

impl RandomConvExtractor {
    pub const WIDTHS: [usize; 3] = [8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 1;
        let weights = Self::WIDTHS
            .iter()
            .map(|&c| {
                let w = he_conv(c, cin, 3, &mut rng);
                cin = c;
                w
            })
            .collect();
        RandomConvExtractor { weights }
    }
}

impl PerceptualExtractor for RandomConvExtractor {
    fn name(&self) -> &'static str {
        "random-conv"
    }

    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for (i, w) in self.weights.iter().enumerate() {
            if i > 0 {
                h = tape.down2(h)?;
            }
            let wv = tape.constant(w.clone())?;
            let c = tape.conv2d(h, wv, None, 1, 1, 1)?;
            h = tape.relu(c)?;
            out.push(h);
        }
        Ok(out)
    }
}

pub const PERCEPTUAL_SEED: u64 = 0x5EED_F00D;

pub fn extractor_registry() -> &'static Registry<dyn PerceptualExtractor> {
    static REG: OnceLock<Registry<dyn PerceptualExtractor>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn PerceptualExtractor> = Registry::new("perceptual extractor");
        r.register("random-conv", Arc::new(RandomConvExtractor::new(PERCEPTUAL_SEED)));
        r
    })
}

pub fn extractor(name: &str) -> Result<Arc<dyn PerceptualExtractor>> {
    extractor_registry().get(name)
}

/// Root-mean-square difference, i.e. an L2 norm of the difference with a
/// mean in place of the sum.
fn rms_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean(sq)?;
    tape.sqrt(m)
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = *vars
        .first()
        .ok_or_else(|| Error::invalid("loss", "nothing to sum"))?;
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Sum over extractor stages of the RMS feature difference.
pub fn l_percep(tape: &mut Tape, yhat: Var, y: Var, extractor: &dyn PerceptualExtractor) -> Result<Var> {
    tape.value(yhat).expect_same_shape(tape.value(y), "l_percep")?;
    let fa = extractor.features(tape, yhat)?;
    let fb = extractor.features(tape, y)?;
    let terms = fa
        .into_iter()
        .zip(fb)
        .map(|(a, b)| rms_diff(tape, a, b))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(tape, &terms)
}

/// Per-band mean absolute coefficient differences of a `levels`-deep
/// pyramid, in pyramid band order (details of levels 1..J, then LL_J).
pub fn wavelet_band_terms(
    tape: &mut Tape,
    yhat: Var,
    y: Var,
    levels: usize,
    family: &Arc<dyn WaveletFamily>,
) -> Result<Vec<Var>> {
    tape.value(yhat).expect_same_shape(tape.value(y), "l_wavelet")?;
    // the transform is linear, so one pyramid of the difference suffices
    let d = tape.sub(yhat, y)?;
    pyramid_vars(tape, d, levels, family)?
        .into_iter()
        .map(|(_, _, band)| {
            let a = tape.abs(band)?;
            tape.mean(a)
        })
        .collect()
}

pub fn l_wavelet(tape: &mut Tape, yhat: Var, y: Var, levels: usize, family: &Arc<dyn WaveletFamily>) -> Result<Var> {
    let terms = wavelet_band_terms(tape, yhat, y, levels, family)?;
    sum_vars(tape, &terms)
}

/// Sum over quality-feature levels of the mean squared map difference.
pub fn l_iqa(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    tape.value(real).expect_same_shape(tape.value(fake), "l_iqa")?;
    let fr = iqa_features_var(tape, real)?;
    let ff = iqa_features_var(tape, fake)?;
    // every level has the same size, so the sum of means is a scaled mean
    let d = tape.sub(fr, ff)?;
    let sq = tape.mul(d, d)?;
    let m = tape.mean(sq)?;
    tape.scale(m, IQA_WINDOWS.len() as f64)
}

/// `mean(-ln(scores + eps))`.
fn neg_log_mean(tape: &mut Tape, scores: Var) -> Result<Var> {
    let s = tape.add_scalar(scores, LOG_EPS)?;
    let l = tape.ln(s)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// Non-saturating generator term `-log D(fake)`, averaged over scores.
pub fn l_gan_g(tape: &mut Tape, d_fake: Var) -> Result<Var> {
    neg_log_mean(tape, d_fake)
}

/// `-log D(real) - log(1 - D(fake))`, each averaged over scores.
pub fn l_gan_d(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = neg_log_mean(tape, d_real)?;
    let flipped = tape.scale(d_fake, -1.0)?;
    let one_minus = tape.add_scalar(flipped, 1.0)?;
    let fake = neg_log_mean(tape, one_minus)?;
    tape.add(real, fake)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositeLossWeights {
    pub lambda1_recon: f64,
    pub lambda2_percep: f64,
    pub lambda3_wavelet: f64,
    pub mu1_l1: f64,
    pub mu2_iqa: f64,
}

impl Default for CompositeLossWeights {
    fn default() -> Self {
        CompositeLossWeights {
            lambda1_recon: 1.0,
            lambda2_percep: 0.1,
            lambda3_wavelet: 0.5,
            mu1_l1: 100.0,
            mu2_iqa: 15.0,
        }
    }
}

impl CompositeLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1_recon", self.lambda1_recon),
            ("lambda2_percep", self.lambda2_percep),
            ("lambda3_wavelet", self.lambda3_wavelet),
            ("mu1_l1", self.mu1_l1),
            ("mu2_iqa", self.mu2_iqa),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `lambda1 * recon + lambda2 * percep + lambda3 * wavelet`.
pub fn l_total_composite(
    tape: &mut Tape,
    yhat: Var,
    y: Var,
    weights: &CompositeLossWeights,
    extractor: &dyn PerceptualExtractor,
    levels: usize,
    family: &Arc<dyn WaveletFamily>,
) -> Result<Var> {
    let r = l_recon(tape, yhat, y)?;
    let p = l_percep(tape, yhat, y, extractor)?;
    let w = l_wavelet(tape, yhat, y, levels, family)?;
    let r = tape.scale(r, weights.lambda1_recon)?;
    let p = tape.scale(p, weights.lambda2_percep)?;
    let w = tape.scale(w, weights.lambda3_wavelet)?;
    sum_vars(tape, &[r, p, w])
}

/// Which generator-loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermToggles {
    pub gan: bool,
    pub recon: bool,
    pub iqa: bool,
    pub percep: bool,
    pub wavelet: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        TermToggles {
            gan: true,
            recon: true,
            iqa: true,
            percep: true,
            wavelet: true,
        }
    }
}

impl TermToggles {
    pub fn l1_only() -> Self {
        TermToggles {
            gan: false,
            recon: true,
            iqa: false,
            percep: false,
            wavelet: false,
        }
    }
}

/// Weighted generator-loss terms; disabled terms are exactly 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub gan: f64,
    pub recon: f64,
    pub iqa: f64,
    pub percep: f64,
    pub wavelet: f64,
}

impl LossBreakdown {
    /// Sum in the same order the loss graph adds the terms.
    pub fn total(&self) -> f64 {
        self.gan + self.recon + self.iqa + self.percep + self.wavelet
    }
}

pub struct GeneratorObjective<'a> {
    pub weights: CompositeLossWeights,
    pub toggles: TermToggles,
    pub extractor: &'a dyn PerceptualExtractor,
    pub levels: usize,
    pub family: Arc<dyn WaveletFamily>,
}

impl GeneratorObjective<'_> {
    /// `gan + mu1 * recon + mu2 * iqa + lambda2 * percep + lambda3 * wavelet`
    /// over the active terms. `d_fake` may be `None` only when the
    /// adversarial term is off.
    pub fn build(&self, tape: &mut Tape, yhat: Var, y: Var, d_fake: Option<Var>) -> Result<(Var, LossBreakdown)> {
        let mut terms = Vec::new();
        let mut bd = LossBreakdown::default();
        let mut push = |tape: &mut Tape, v: Var, slot: &mut f64| {
            *slot = tape.value(v).item();
            terms.push(v);
        };
        if self.toggles.gan {
            let d = d_fake.ok_or_else(|| Error::invalid("generator loss", "adversarial term needs D(fake)"))?;
            let v = l_gan_g(tape, d)?;
            push(tape, v, &mut bd.gan);
        }
        if self.toggles.recon {
            let v = l_recon(tape, yhat, y)?;
            let v = tape.scale(v, self.weights.mu1_l1)?;
            push(tape, v, &mut bd.recon);
        }
        if self.toggles.iqa {
            let v = l_iqa(tape, y, yhat)?;
            let v = tape.scale(v, self.weights.mu2_iqa)?;
            push(tape, v, &mut bd.iqa);
        }
        if self.toggles.percep {
            let v = l_percep(tape, yhat, y, self.extractor)?;
            let v = tape.scale(v, self.weights.lambda2_percep)?;
            push(tape, v, &mut bd.percep);
        }
        if self.toggles.wavelet {
            let v = l_wavelet(tape, yhat, y, self.levels, &self.family)?;
            let v = tape.scale(v, self.weights.lambda3_wavelet)?;
            push(tape, v, &mut bd.wavelet);
        }
        if terms.is_empty() {
            return Err(Error::Config("every generator loss term is disabled".into()));
        }
        let total = sum_vars(tape, &terms)?;
        Ok((total, bd))
    }
}
