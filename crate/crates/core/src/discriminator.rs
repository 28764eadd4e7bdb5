//! Quality-aware discriminator: a strided convolutional branch whose
//! features are gated by a local-entropy quality map, pooled and scored.

use std::sync::{Arc, OnceLock};

use rand::Rng;

use crate::autodiff::{Bound, CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_conv, insert, ParamMap};
use crate::quality::{self, avg_pool, QualityBranch};
use crate::registry::Registry;
use crate::tensor::Tensor;

pub const LEAK: f64 = 0.2;

/// Gate `[N, 1, H, W]` = `phi / max(phi)` per image; an all-zero map gives ones.
pub fn quality_gate(phi: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = phi.dims4("quality_gate")?;
    if c != 1 {
        return Err(Error::shape("quality_gate", format!("quality map must have 1 channel, got {c}")));
    }
    let mut out = Vec::with_capacity(phi.numel());
    for plane in phi.data().chunks(h * w) {
        let m = plane.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            out.extend(plane.iter().map(|v| v / m));
        } else {
            out.extend(std::iter::repeat_n(1.0, plane.len()));
        }
    }
    Tensor::from_vec(vec![n, 1, h, w], out)
}

struct GateRule(Tensor);

impl CustomBackward for GateRule {
    fn name(&self) -> &'static str {
        "spatial_modulate"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(broadcast_mul(grad, &self.0))]
    }
}

fn broadcast_mul(f: &Tensor, gate: &Tensor) -> Tensor {
    let s = f.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    let mut out = f.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let n = i / (c * hw);
        *v *= gate.data()[n * hw + i % hw];
    }
    out
}

/// `F' = F * phi / max(phi)`, the same gate for every channel. `phi` is
/// resampled to the extents of `f` by average pooling and carries no gradient.
pub fn spatial_modulate(tape: &mut Tape, f: Var, phi: &Tensor) -> Result<Var> {
    let [n, _, hf, wf] = tape.value(f).dims4("spatial_modulate")?;
    let [np, _, hp, wp] = phi.dims4("spatial_modulate")?;
    if np != n || hp % hf != 0 || wp % wf != 0 || hp / hf != wp / wf {
        return Err(Error::shape(
            "spatial_modulate",
            format!("quality map {:?} cannot be pooled onto features {:?}", phi.shape(), tape.shape(f)),
        ));
    }
    let pooled = if hp == hf { phi.clone() } else { avg_pool(phi, hp / hf)? };
    let gate = quality_gate(&pooled)?;
    let value = broadcast_mul(tape.value(f), &gate);
    tape.custom(&[f], value, Box::new(GateRule(gate)))
}

/// How the quality map enters the discriminator features.
pub trait FusionStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Parameters owned by the fusion step for `channels` feature channels.
    fn init(&self, channels: usize, rng: &mut dyn rand::RngCore) -> ParamMap;

    /// Width of the pooled vector `z` handed to the dense head.
    fn pooled_width(&self, channels: usize) -> usize;

    /// Fused, pooled features `[N, pooled_width]`. `phi` is the full
    /// resolution quality map and `ceiling` its upper bound.
    fn fuse(&self, tape: &mut Tape, params: &Bound, f: Var, phi: &Tensor, ceiling: f64) -> Result<Var>;
}

/// Eq. 7 gating followed by global average pooling.
pub struct SpatialFusion;

impl FusionStrategy for SpatialFusion {
    fn name(&self) -> &'static str {
        "spatial"
    }

    fn init(&self, _: usize, _: &mut dyn rand::RngCore) -> ParamMap {
        ParamMap::new()
    }

    fn pooled_width(&self, channels: usize) -> usize {
        channels
    }

    fn fuse(&self, tape: &mut Tape, _: &Bound, f: Var, phi: &Tensor, _: f64) -> Result<Var> {
        let gated = spatial_modulate(tape, f, phi)?;
        tape.global_avg_pool(gated)
    }
}

/// The normalized map is appended as a feature channel and mixed back
/// down with a 1x1 convolution.
pub struct ChannelFusion;

impl FusionStrategy for ChannelFusion {
    fn name(&self) -> &'static str {
        "channel"
    }

    fn init(&self, channels: usize, rng: &mut dyn rand::RngCore) -> ParamMap {
        let mut p = ParamMap::new();
        insert(&mut p, "d.fuse.w", he_conv(channels, channels + 1, 1, rng));
        insert(&mut p, "d.fuse.b", Tensor::zeros(vec![channels]));
        p
    }

    fn pooled_width(&self, channels: usize) -> usize {
        channels
    }

    fn fuse(&self, tape: &mut Tape, params: &Bound, f: Var, phi: &Tensor, _: f64) -> Result<Var> {
        let [_, _, hf, _] = tape.value(f).dims4("channel fusion")?;
        let [_, _, hp, _] = phi.dims4("channel fusion")?;
        let pooled = if hp == hf { phi.clone() } else { avg_pool(phi, hp / hf)? };
        let gate = tape.constant(quality_gate(&pooled)?)?;
        let cat = tape.concat(&[f, gate], 1)?;
        let mixed = tape.conv2d(cat, params.get("d.fuse.w")?, Some(params.get("d.fuse.b")?), 1, 0, 1)?;
        let act = tape.leaky_relu(mixed, LEAK)?;
        tape.global_avg_pool(act)
    }
}

/// No fusion: the mean quality, scaled to `[0, 1]`, is appended to the
/// pooled features as one extra scalar.
pub struct NoFusion;

impl FusionStrategy for NoFusion {
    fn name(&self) -> &'static str {
        "none"
    }

    fn init(&self, _: usize, _: &mut dyn rand::RngCore) -> ParamMap {
        ParamMap::new()
    }

    fn pooled_width(&self, channels: usize) -> usize {
        channels + 1
    }

    fn fuse(&self, tape: &mut Tape, _: &Bound, f: Var, phi: &Tensor, ceiling: f64) -> Result<Var> {
        let [n, _, h, w] = phi.dims4("no fusion")?;
        let means = phi
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64 / ceiling)
            .collect();
        let q = tape.constant(Tensor::from_vec(vec![n, 1], means)?)?;
        let z = tape.global_avg_pool(f)?;
        tape.concat(&[z, q], 1)
    }
}

pub fn fusion_registry() -> &'static Registry<dyn FusionStrategy> {
    static REG: OnceLock<Registry<dyn FusionStrategy>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn FusionStrategy> = Registry::new("fusion mode");
        r.register("spatial", Arc::new(SpatialFusion));
        r.register("channel", Arc::new(ChannelFusion));
        r.register("none", Arc::new(NoFusion));
        r
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Output channels of the four stride-2 blocks.
    pub channels: [usize; 4],
    /// Quality branch name, `None` removes the branch entirely.
    pub quality: Option<String>,
    pub fusion: String,
    /// Per-position scores from a 1x1 head instead of one pooled score.
    pub patch_head: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: [8, 16, 32, 32],
            quality: Some("entropy".into()),
            fusion: "spatial".into(),
            patch_head: false,
        }
    }
}

/// Extent divisor imposed by the four stride-2 blocks.
pub const DOWNSAMPLING: usize = 16;

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    quality: Option<Arc<dyn QualityBranch>>,
    fusion: Arc<dyn FusionStrategy>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        let quality = config.quality.as_deref().map(quality::branch).transpose()?;
        let fusion = fusion_registry().get(&config.fusion)?;
        Ok(Discriminator {
            config,
            quality,
            fusion,
        })
    }

    fn feature_channels(&self) -> usize {
        self.config.channels[3]
    }

    fn head_width(&self) -> usize {
        match &self.quality {
            Some(_) => self.fusion.pooled_width(self.feature_channels()),
            None => self.feature_channels(),
        }
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamMap {
        let mut p = ParamMap::new();
        let mut cin = 1;
        for (i, &c) in self.config.channels.iter().enumerate() {
            insert(&mut p, format!("d.conv{i}.w"), he_conv(c, cin, 3, rng));
            insert(&mut p, format!("d.conv{i}.b"), Tensor::zeros(vec![c]));
            cin = c;
        }
        for j in 1..=2 {
            insert(&mut p, format!("d.res.conv{j}.w"), he_conv(cin, cin, 3, rng));
            insert(&mut p, format!("d.res.conv{j}.b"), Tensor::zeros(vec![cin]));
        }
        if self.quality.is_some() {
            p.extend(self.fusion.init(cin, rng));
        }
        let d = self.head_width();
        let head = if self.config.patch_head {
            Tensor::randn(vec![1, d, 1, 1], (1.0 / d as f64).sqrt(), rng)
        } else {
            Tensor::randn(vec![1, d], (1.0 / d as f64).sqrt(), rng)
        };
        insert(&mut p, "d.head.w", head);
        insert(&mut p, "d.head.b", Tensor::zeros(vec![1]));
        p
    }

    /// Spatial-branch feature map `F`, `[N, C, H/16, W/16]`.
    pub fn features(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(x).dims4("discriminator")?;
        if c != 1 || h % DOWNSAMPLING != 0 || w % DOWNSAMPLING != 0 {
            return Err(Error::shape(
                "discriminator",
                format!("input must be [N, 1, H, W] with H, W divisible by {DOWNSAMPLING}, got {:?}", tape.shape(x)),
            ));
        }
        let mut h = x;
        for i in 0..4 {
            let wt = params.get(&format!("d.conv{i}.w"))?;
            let b = params.get(&format!("d.conv{i}.b"))?;
            let y = tape.conv2d(h, wt, Some(b), 2, 1, 1)?;
            h = tape.leaky_relu(y, LEAK)?;
        }
        let r1 = tape.conv2d(h, params.get("d.res.conv1.w")?, Some(params.get("d.res.conv1.b")?), 1, 1, 1)?;
        let r1 = tape.leaky_relu(r1, LEAK)?;
        let r2 = tape.conv2d(r1, params.get("d.res.conv2.w")?, Some(params.get("d.res.conv2.b")?), 1, 1, 1)?;
        tape.add(h, r2)
    }

    /// Scores in `(0, 1)`: `[N, 1]` for the pooled head, `[N, 1, H/16, W/16]`
    /// for the patch head.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let phi = self.quality_map(tape.value(x))?;
        self.forward_with(tape, params, x, phi.as_ref())
    }

    /// Quality map of `x`, `None` without a quality branch.
    pub fn quality_map(&self, x: &Tensor) -> Result<Option<Tensor>> {
        self.quality.as_ref().map(|q| Ok(q.quality_map(x)?.map)).transpose()
    }

    /// [`Self::forward`] with the map of `x` already computed.
    pub fn forward_with(&self, tape: &mut Tape, params: &Bound, x: Var, phi: Option<&Tensor>) -> Result<Var> {
        let logits = self.logits_with(tape, params, x, phi)?;
        tape.sigmoid(logits)
    }

    pub fn logits(&self, tape: &mut Tape, params: &Bound, x: Var) -> Result<Var> {
        let phi = self.quality_map(tape.value(x))?;
        self.logits_with(tape, params, x, phi.as_ref())
    }

    fn logits_with(&self, tape: &mut Tape, params: &Bound, x: Var, phi: Option<&Tensor>) -> Result<Var> {
        let f = self.features(tape, params, x)?;
        let hw = params.get("d.head.w")?;
        let hb = params.get("d.head.b")?;
        let gated = match (&self.quality, phi) {
            (Some(q), Some(phi)) => Some((q, phi)),
            (None, _) => None,
            (Some(_), None) => return Err(Error::invalid("discriminator", "quality map required")),
        };
        if self.config.patch_head {
            let fused = match gated {
                Some((_, phi)) => spatial_modulate(tape, f, phi)?,
                None => f,
            };
            return tape.conv2d(fused, hw, Some(hb), 1, 0, 1);
        }
        let z = match gated {
            Some((q, phi)) => self.fusion.fuse(tape, params, f, phi, q.ceiling())?,
            None => tape.global_avg_pool(f)?,
        };
        tape.dense(z, hw, hb)
    }
}
