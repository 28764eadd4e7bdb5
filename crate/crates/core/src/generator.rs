//! Multi-scale denoising generator with parallel wavelet and spatial
//! branches fused at every scale.
//!
//! Layout for `S` scales and `C` base channels: a 3x3 head lifts the image
//! to `C` channels; at scale `s` (extent `H / 2^s`, reached by a stride-2
//! conv) the features pass through a wavelet branch (WCG blocks) and a
//! spatial branch (residual blocks) whose outputs are fused. The decoder
//! upsamples, concatenates the fused features of the matching scale and
//! mixes back to `C` channels. A zero-initialized 3x3 conv predicts a
//! correction added to the input.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::{Rng, RngCore};

use crate::autodiff::{Bound, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_conv, insert, ParamMap};
use crate::registry::Registry;
use crate::tensor::Tensor;
use crate::wavelet::{family, pad_reflect, wcg_block, wtc_apply, WaveletFamily, WcgWeights};

/// Batch-norm running statistics keyed by layer name.
pub type NormState = BTreeMap<String, RunningStats>;

/// What the wavelet branch of each scale contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WaveletBranch {
    /// Grouped, batch-normed, residual wavelet convolutions.
    Wcg,
    /// One ungrouped wavelet convolution without norm or skip.
    Plain,
    /// No wavelet branch; the spatial branch output is used directly.
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub scales: usize,
    pub wcg_groups: usize,
    pub blocks_per_scale: usize,
    pub wavelet: String,
    pub wavelet_branch: WaveletBranch,
    /// Branch fusion strategy name, see [`fusion_registry`].
    pub fusion: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            scales: 3,
            wcg_groups: 4,
            blocks_per_scale: 1,
            wavelet: "haar".into(),
            wavelet_branch: WaveletBranch::Wcg,
            fusion: "fsff".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.scales == 0 || self.blocks_per_scale == 0 {
            return Err(Error::Config(
                "generator base_channels, scales and blocks_per_scale must be positive".into(),
            ));
        }
        if self.wcg_groups == 0 || self.base_channels % self.wcg_groups != 0 {
            return Err(Error::Config(format!(
                "generator base_channels {} is not divisible by wcg_groups {}",
                self.base_channels, self.wcg_groups
            )));
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.scales
    }
}

/// Merges the wavelet-branch and spatial-branch features of one scale.
pub trait BranchFusion: Send + Sync {
    fn name(&self) -> &'static str;

    fn init(&self, prefix: &str, channels: usize, rng: &mut dyn RngCore) -> ParamMap;

    fn fuse(&self, tape: &mut Tape, params: &Bound, prefix: &str, fw: Var, fs: Var) -> Result<Var>;
}

/// Shared 1x1 projection, attention from the absolute projected difference,
/// then `A * pw + (1 - A) * ps`.
pub struct Fsff;

impl BranchFusion for Fsff {
    fn name(&self) -> &'static str {
        "fsff"
    }

    fn init(&self, prefix: &str, c: usize, rng: &mut dyn RngCore) -> ParamMap {
        let mut p = ParamMap::new();
        insert(&mut p, format!("{prefix}.proj.w"), he_conv(c, c, 1, rng));
        insert(&mut p, format!("{prefix}.proj.b"), Tensor::zeros(vec![c]));
        insert(&mut p, format!("{prefix}.attn.w"), he_conv(c, c, 3, rng));
        insert(&mut p, format!("{prefix}.attn.b"), Tensor::zeros(vec![c]));
        p
    }

    fn fuse(&self, tape: &mut Tape, params: &Bound, prefix: &str, fw: Var, fs: Var) -> Result<Var> {
        fsff_fuse(
            tape,
            fw,
            fs,
            FsffWeights {
                proj_w: params.get(&format!("{prefix}.proj.w"))?,
                proj_b: params.get(&format!("{prefix}.proj.b"))?,
                attn_w: params.get(&format!("{prefix}.attn.w"))?,
                attn_b: params.get(&format!("{prefix}.attn.b"))?,
            },
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FsffWeights {
    pub proj_w: Var,
    pub proj_b: Var,
    pub attn_w: Var,
    pub attn_b: Var,
}

pub fn fsff_fuse(tape: &mut Tape, fw: Var, fs: Var, w: FsffWeights) -> Result<Var> {
    if tape.shape(fw) != tape.shape(fs) {
        return Err(Error::shape(
            "fsff_fuse",
            format!("branch features differ: {:?} vs {:?}", tape.shape(fw), tape.shape(fs)),
        ));
    }
    let pw = tape.conv2d(fw, w.proj_w, Some(w.proj_b), 1, 0, 1)?;
    let ps = tape.conv2d(fs, w.proj_w, Some(w.proj_b), 1, 0, 1)?;
    let diff = tape.sub(pw, ps)?;
    let mag = tape.abs(diff)?;
    let k = tape.shape(w.attn_w)[2];
    let logits = tape.conv2d(mag, w.attn_w, Some(w.attn_b), 1, k / 2, 1)?;
    let a = tape.sigmoid(logits)?;
    // ps + A (pw - ps) == A pw + (1 - A) ps
    let gated = tape.mul(a, diff)?;
    tape.add(ps, gated)
}

/// Plain addition of the two branches, no parameters.
pub struct SumFusion;

impl BranchFusion for SumFusion {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn init(&self, _: &str, _: usize, _: &mut dyn RngCore) -> ParamMap {
        ParamMap::new()
    }

    fn fuse(&self, tape: &mut Tape, _: &Bound, _: &str, fw: Var, fs: Var) -> Result<Var> {
        tape.add(fw, fs)
    }
}

/// Concatenate and mix with a 1x1 conv, no attention.
pub struct ConcatFusion;

impl BranchFusion for ConcatFusion {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn init(&self, prefix: &str, c: usize, rng: &mut dyn RngCore) -> ParamMap {
        let mut p = ParamMap::new();
        insert(&mut p, format!("{prefix}.mix.w"), he_conv(c, 2 * c, 1, rng));
        insert(&mut p, format!("{prefix}.mix.b"), Tensor::zeros(vec![c]));
        p
    }

    fn fuse(&self, tape: &mut Tape, params: &Bound, prefix: &str, fw: Var, fs: Var) -> Result<Var> {
        let cat = tape.concat(&[fw, fs], 1)?;
        tape.conv2d(
            cat,
            params.get(&format!("{prefix}.mix.w"))?,
            Some(params.get(&format!("{prefix}.mix.b"))?),
            1,
            0,
            1,
        )
    }
}

pub fn fusion_registry() -> &'static Registry<dyn BranchFusion> {
    static REG: OnceLock<Registry<dyn BranchFusion>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn BranchFusion> = Registry::new("branch fusion");
        r.register("fsff", Arc::new(Fsff));
        r.register("sum", Arc::new(SumFusion));
        r.register("concat", Arc::new(ConcatFusion));
        r
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualWeights {
    /// No bias: batch norm follows immediately.
    pub conv1_w: Var,
    pub gamma: Var,
    pub beta: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

/// `x + conv(relu(bn(conv(x))))`, 3x3 same padding.
pub fn residual_block(
    tape: &mut Tape,
    x: Var,
    w: &ResidualWeights,
    running: &mut RunningStats,
    training: bool,
) -> Result<Var> {
    let pad = tape.shape(w.conv1_w)[2] / 2;
    let h = tape.conv2d(x, w.conv1_w, None, 1, pad, 1)?;
    let h = tape.batch_norm(h, w.gamma, w.beta, running, training)?;
    let h = tape.relu(h)?;
    let pad = tape.shape(w.conv2_w)[2] / 2;
    let h = tape.conv2d(h, w.conv2_w, Some(w.conv2_b), 1, pad, 1)?;
    tape.add(x, h)
}

pub struct Generator {
    pub config: GeneratorConfig,
    family: Arc<dyn WaveletFamily>,
    fusion: Arc<dyn BranchFusion>,
}

/// Output of a forward pass with the fused features of every scale.
pub struct Traced {
    pub output: Var,
    pub scale_features: Vec<Var>,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let family = family(&config.wavelet)?;
        let fusion = fusion_registry().get(&config.fusion)?;
        Ok(Generator {
            config,
            family,
            fusion,
        })
    }

    fn c(&self) -> usize {
        self.config.base_channels
    }

    /// Parameters and fresh batch-norm statistics.
    pub fn init(&self, rng: &mut impl Rng) -> (ParamMap, NormState) {
        let c = self.c();
        let g = self.config.wcg_groups;
        let mut p = ParamMap::new();
        let mut norms = NormState::new();
        let conv = |p: &mut ParamMap, name: String, cout: usize, cin: usize, k: usize, rng: &mut dyn RngCore| {
            insert(p, format!("{name}.w"), he_conv(cout, cin, k, rng));
            insert(p, format!("{name}.b"), Tensor::zeros(vec![cout]));
        };
        conv(&mut p, "g.head".into(), c, 1, 3, rng);
        for s in 0..self.config.scales {
            if s > 0 {
                conv(&mut p, format!("g.s{s}.down"), c, c, 3, rng);
            }
            for b in 0..self.config.blocks_per_scale {
                match self.config.wavelet_branch {
                    WaveletBranch::Wcg => {
                        let name = format!("g.s{s}.wcg{b}");
                        for band in ["ll", "lh", "hl", "hh"] {
                            insert(&mut p, format!("{name}.{band}"), he_conv(c, c / g, 3, rng).scale(0.5));
                        }
                        insert(&mut p, format!("{name}.bn.gamma"), Tensor::ones(vec![c]));
                        insert(&mut p, format!("{name}.bn.beta"), Tensor::zeros(vec![c]));
                        norms.insert(format!("{name}.bn"), RunningStats::new(c));
                    }
                    WaveletBranch::Plain => {
                        let name = format!("g.s{s}.wconv{b}");
                        for band in ["ll", "lh", "hl", "hh"] {
                            insert(&mut p, format!("{name}.{band}"), he_conv(c, c, 3, rng).scale(0.5));
                        }
                    }
                    WaveletBranch::Off => {}
                }
                let name = format!("g.s{s}.res{b}");
                insert(&mut p, format!("{name}.conv1.w"), he_conv(c, c, 3, rng));
                conv(&mut p, format!("{name}.conv2"), c, c, 3, rng);
                insert(&mut p, format!("{name}.bn.gamma"), Tensor::ones(vec![c]));
                insert(&mut p, format!("{name}.bn.beta"), Tensor::zeros(vec![c]));
                norms.insert(format!("{name}.bn"), RunningStats::new(c));
            }
            if self.config.wavelet_branch != WaveletBranch::Off {
                p.extend(self.fusion.init(&format!("g.s{s}.fuse"), c, rng));
            }
        }
        for s in 0..self.config.scales - 1 {
            conv(&mut p, format!("g.dec{s}"), c, 2 * c, 3, rng);
        }
        insert(&mut p, "g.out.w", Tensor::zeros(vec![1, c, 3, 3]));
        insert(&mut p, "g.out.b", Tensor::zeros(vec![1]));
        (p, norms)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let d = self.config.divisor();
        if shape.len() != 4 || shape[1] != 1 || shape[2] % d != 0 || shape[3] % d != 0 {
            return Err(Error::shape(
                "generator",
                format!(
                    "input must be [N, 1, H, W] with H and W divisible by 2^{} = {d}, got {shape:?}",
                    self.config.scales
                ),
            ));
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape, params: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = params.get(&format!("{name}.w"))?;
        let b = params.get(&format!("{name}.b"))?;
        let pad = tape.shape(w)[2] / 2;
        tape.conv2d(x, w, Some(b), stride, pad, 1)
    }

    fn norm<'a>(norms: &'a mut NormState, name: &str) -> Result<&'a mut RunningStats> {
        norms
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn bands(params: &Bound, name: &str) -> Result<[Var; 4]> {
        Ok([
            params.get(&format!("{name}.ll"))?,
            params.get(&format!("{name}.lh"))?,
            params.get(&format!("{name}.hl"))?,
            params.get(&format!("{name}.hh"))?,
        ])
    }

    fn scale_block(
        &self,
        tape: &mut Tape,
        params: &Bound,
        norms: &mut NormState,
        s: usize,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let mut fw = x;
        let mut fs = x;
        for b in 0..self.config.blocks_per_scale {
            match self.config.wavelet_branch {
                WaveletBranch::Wcg => {
                    let name = format!("g.s{s}.wcg{b}");
                    let weights = WcgWeights {
                        bands: Self::bands(params, &name)?,
                        gamma: params.get(&format!("{name}.bn.gamma"))?,
                        beta: params.get(&format!("{name}.bn.beta"))?,
                    };
                    let running = Self::norm(norms, &format!("{name}.bn"))?;
                    fw = wcg_block(tape, fw, self.config.wcg_groups, &weights, running, training, &self.family)?;
                }
                WaveletBranch::Plain => {
                    let bands = Self::bands(params, &format!("g.s{s}.wconv{b}"))?;
                    fw = wtc_apply(tape, fw, bands, 1, &self.family)?;
                }
                WaveletBranch::Off => {}
            }
            let name = format!("g.s{s}.res{b}");
            let weights = ResidualWeights {
                conv1_w: params.get(&format!("{name}.conv1.w"))?,
                gamma: params.get(&format!("{name}.bn.gamma"))?,
                beta: params.get(&format!("{name}.bn.beta"))?,
                conv2_w: params.get(&format!("{name}.conv2.w"))?,
                conv2_b: params.get(&format!("{name}.conv2.b"))?,
            };
            let running = Self::norm(norms, &format!("{name}.bn"))?;
            fs = residual_block(tape, fs, &weights, running, training)?;
        }
        match self.config.wavelet_branch {
            WaveletBranch::Off => Ok(fs),
            _ => self.fusion.fuse(tape, params, &format!("g.s{s}.fuse"), fw, fs),
        }
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        params: &Bound,
        norms: &mut NormState,
        x: Var,
        training: bool,
    ) -> Result<Traced> {
        self.check_input(tape.shape(x))?;
        let head = self.conv(tape, params, "g.head", x, 1)?;
        let mut h = tape.relu(head)?;
        let mut skips = Vec::with_capacity(self.config.scales);
        for s in 0..self.config.scales {
            if s > 0 {
                let d = self.conv(tape, params, &format!("g.s{s}.down"), h, 2)?;
                h = tape.relu(d)?;
            }
            h = self.scale_block(tape, params, norms, s, h, training)?;
            skips.push(h);
        }
        for s in (0..self.config.scales - 1).rev() {
            let up = tape.up2(h)?;
            let cat = tape.concat(&[up, skips[s]], 1)?;
            let mixed = self.conv(tape, params, &format!("g.dec{s}"), cat, 1)?;
            h = tape.relu(mixed)?;
        }
        let correction = self.conv(tape, params, "g.out", h, 1)?;
        let output = tape.add(x, correction)?;
        Ok(Traced {
            output,
            scale_features: skips,
        })
    }

    /// Unclamped output; batch statistics when `training`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, norms: &mut NormState, x: Var, training: bool) -> Result<Var> {
        Ok(self.forward_traced(tape, params, norms, x, training)?.output)
    }

    /// Inference on any `[N, C, H, W]` batch: channels are denoised
    /// independently, extents are reflection-padded to the required
    /// multiple and cropped back, and the output is clamped to `[0, 1]`.
    pub fn denoise(&self, params: &ParamMap, norms: &NormState, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.dims4("denoise")?;
        let planes = x.reshape(vec![n * c, 1, h, w])?;
        let padded = pad_reflect(&planes, self.config.divisor())?;
        let mut tape = Tape::new();
        let bound = tape.bind(params.iter(), false)?;
        let xv = tape.constant(padded)?;
        // running statistics are only read in inference mode
        let mut norms = norms.clone();
        let out = self.forward(&mut tape, &bound, &mut norms, xv, false)?;
        let y = tape.value(out).crop(0, 0, h, w)?.reshape(vec![n, c, h, w])?;
        if !y.is_finite() {
            return Err(Error::NonFinite("generator output".into()));
        }
        Ok(y.clamp(0.0, 1.0))
    }
}
