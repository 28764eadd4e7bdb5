//! Training configuration, read from TOML with per-key overrides.
//!
//! ```toml
//! [generator]
//! base_channels = 16
//! [ablation]
//! fusion_mode = "channel"
//! wavelet_loss_off = true
//! [train]
//! steps = 500
//! ```
//!
//! Architectural switches that the ablation tables vary live only in
//! `[ablation]`; the other sections hold the fixed hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, ColorMode, DatasetManifest, ManifestRecord, NoiseKind, PhantomKind, Source, TargetMode};
use crate::discriminator::{fusion_registry, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{fusion_registry as branch_fusions, GeneratorConfig, WaveletBranch};
use crate::losses::{CompositeLossWeights, TermToggles};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub base_channels: usize,
    pub scales: usize,
    pub wcg_groups: usize,
    pub blocks_per_scale: usize,
    pub wavelet: String,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        GeneratorSection {
            base_channels: g.base_channels,
            scales: g.scales,
            wcg_groups: g.wcg_groups,
            blocks_per_scale: g.blocks_per_scale,
            wavelet: g.wavelet,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorSection {
    pub channels: [usize; 4],
    /// Quality branch used unless `ablation.iqa_off`.
    pub quality: String,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        DiscriminatorSection {
            channels: DiscriminatorConfig::default().channels,
            quality: "entropy".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda1_recon: f64,
    pub lambda2_percep: f64,
    pub lambda3_wavelet: f64,
    pub mu1_l1: f64,
    pub mu2_iqa: f64,
    pub gan: bool,
    pub recon: bool,
    pub iqa: bool,
    pub percep: bool,
    pub wavelet: bool,
    pub wavelet_levels: usize,
    pub perceptual: String,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = CompositeLossWeights::default();
        LossSection {
            lambda1_recon: w.lambda1_recon,
            lambda2_percep: w.lambda2_percep,
            lambda3_wavelet: w.lambda3_wavelet,
            mu1_l1: w.mu1_l1,
            mu2_iqa: w.mu2_iqa,
            gan: true,
            recon: true,
            iqa: true,
            percep: true,
            wavelet: true,
            wavelet_levels: 2,
            perceptual: "random-conv".into(),
        }
    }
}

/// One flag per ablation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Branches are added instead of fused.
    pub fsff_off: bool,
    pub wavelet_branch_off: bool,
    /// Plain ungrouped wavelet convolution in place of WCG blocks.
    pub wcg_off: bool,
    pub wavelet_loss_off: bool,
    /// Concatenation and a 1x1 conv in place of the attention fusion.
    pub naive_fusion: bool,
    /// Remove the discriminator's quality branch.
    pub iqa_off: bool,
    pub fusion_mode: String,
    pub iqa_loss_off: bool,
    /// Per-patch discriminator scores.
    pub patch_head: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            fsff_off: false,
            wavelet_branch_off: false,
            wcg_off: false,
            wavelet_loss_off: false,
            naive_fusion: false,
            iqa_off: false,
            fusion_mode: "spatial".into(),
            iqa_loss_off: false,
            patch_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub patch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 1e-4,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            patch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest with `train` and `eval` splits; synthetic phantoms when absent.
    pub manifest: Option<PathBuf>,
    pub phantoms: usize,
    pub eval_phantoms: usize,
    pub phantom_size: usize,
    pub noise: String,
    pub frames: usize,
    /// `luminance` or `per_channel`.
    pub color: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            phantoms: 32,
            eval_phantoms: 8,
            phantom_size: 64,
            noise: "gaussian:0.1".into(),
            frames: 1,
            color: "luminance".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorSection,
    pub loss: LossSection,
    pub ablation: AblationFlags,
    pub train: TrainSection,
    pub data: DataSection,
}

const SALT_TRAIN_PHANTOMS: u64 = 0x7261_696e;
const SALT_EVAL_PHANTOMS: u64 = 0x6576_616c;

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::from_toml(&text)?;
        // a relative manifest path is relative to the config file
        if let (Some(m), Some(dir)) = (&c.data.manifest, path.parent()) {
            if m.is_relative() {
                c.data.manifest = Some(dir.join(m));
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Set `section.key` from its textual value, e.g. `train.steps = "300"`.
    /// Values that are not valid TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_many(&[(key, value)])
    }

    /// Apply several overrides, validating only the final result.
    pub fn set_many(&mut self, pairs: &[(&str, &str)]) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        for &(key, value) in pairs {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override `{key}` must look like section.key")))?;
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            let table = root
                .get_mut(section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section `{section}`")))?;
            table.insert(field.to_string(), parsed);
        }
        let updated: TrainConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.ablation;
        if a.fsff_off && a.naive_fusion {
            return Err(Error::Config("fsff_off and naive_fusion are mutually exclusive".into()));
        }
        if a.wavelet_branch_off && a.wcg_off {
            return Err(Error::Config("wavelet_branch_off and wcg_off are mutually exclusive".into()));
        }
        fusion_registry().get(&a.fusion_mode).map_err(|e| Error::Config(e.to_string()))?;
        self.generator_config().validate()?;
        self.weights().validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", t.learning_rate)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let need = self.patch_divisor();
        if t.patch_size == 0 || t.patch_size % need != 0 {
            return Err(Error::Config(format!(
                "patch_size {} must be a positive multiple of {need}",
                t.patch_size
            )));
        }
        if self.loss.wavelet_levels == 0 || t.patch_size % (1 << self.loss.wavelet_levels) != 0 {
            return Err(Error::Config(format!(
                "patch_size {} is not divisible by 2^wavelet_levels",
                t.patch_size
            )));
        }
        let d = &self.data;
        if d.manifest.is_none() && (d.phantoms == 0 || d.phantom_size < t.patch_size) {
            return Err(Error::Config(format!(
                "need at least one phantom of size >= patch_size {}, got {} of size {}",
                t.patch_size, d.phantoms, d.phantom_size
            )));
        }
        if d.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        self.noise()?;
        self.color()?;
        Ok(())
    }

    /// Patch extents must be multiples of this for both networks.
    pub fn patch_divisor(&self) -> usize {
        let g = 1usize << self.generator.scales;
        g.max(crate::discriminator::DOWNSAMPLING)
    }

    pub fn noise(&self) -> Result<NoiseKind> {
        self.data.noise.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    pub fn color(&self) -> Result<ColorMode> {
        match self.data.color.as_str() {
            "luminance" => Ok(ColorMode::Luminance),
            "per_channel" => Ok(ColorMode::PerChannel),
            other => Err(Error::Config(format!(
                "unknown color mode `{other}` (known: luminance, per_channel)"
            ))),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let a = &self.ablation;
        let g = &self.generator;
        let fusion = if a.fsff_off {
            "sum"
        } else if a.naive_fusion {
            "concat"
        } else {
            "fsff"
        };
        debug_assert!(branch_fusions().get(fusion).is_ok());
        GeneratorConfig {
            base_channels: g.base_channels,
            scales: g.scales,
            wcg_groups: g.wcg_groups,
            blocks_per_scale: g.blocks_per_scale,
            wavelet: g.wavelet.clone(),
            wavelet_branch: if a.wavelet_branch_off {
                WaveletBranch::Off
            } else if a.wcg_off {
                WaveletBranch::Plain
            } else {
                WaveletBranch::Wcg
            },
            fusion: fusion.into(),
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channels: self.discriminator.channels,
            quality: (!self.ablation.iqa_off).then(|| self.discriminator.quality.clone()),
            fusion: self.ablation.fusion_mode.clone(),
            patch_head: self.ablation.patch_head,
        }
    }

    pub fn weights(&self) -> CompositeLossWeights {
        let l = &self.loss;
        CompositeLossWeights {
            lambda1_recon: l.lambda1_recon,
            lambda2_percep: l.lambda2_percep,
            lambda3_wavelet: l.lambda3_wavelet,
            mu1_l1: l.mu1_l1,
            mu2_iqa: l.mu2_iqa,
        }
    }

    pub fn toggles(&self) -> TermToggles {
        let l = &self.loss;
        let a = &self.ablation;
        TermToggles {
            gan: l.gan,
            recon: l.recon,
            iqa: l.iqa && !a.iqa_loss_off,
            percep: l.percep,
            wavelet: l.wavelet && !a.wavelet_loss_off,
        }
    }

    fn phantom_records(&self, count: usize, salt: u64, split: &str) -> Result<Vec<ManifestRecord>> {
        let noise = self.noise()?;
        let base = derive_seed(self.train.seed, salt);
        Ok((0..count)
            .map(|i| {
                let kind = PhantomKind::ALL[i % PhantomKind::ALL.len()];
                ManifestRecord {
                    id: format!("{split}_{}_{i:03}", kind.name()),
                    source: Source::Phantom {
                        kind,
                        size: self.data.phantom_size,
                        seed: derive_seed(base, 2 * i as u64),
                    },
                    noise,
                    frames: self.data.frames,
                    split: split.into(),
                    target: TargetMode::Clean,
                    seed: derive_seed(base, 2 * i as u64 + 1),
                }
            })
            .collect())
    }

    /// The configured manifest, or a synthetic one with `train` and `eval`
    /// phantom splits drawn from disjoint seeds.
    pub fn dataset(&self) -> Result<DatasetManifest> {
        match &self.data.manifest {
            Some(path) => DatasetManifest::load(path),
            None => {
                let mut records = self.phantom_records(self.data.phantoms, SALT_TRAIN_PHANTOMS, "train")?;
                records.extend(self.phantom_records(self.data.eval_phantoms, SALT_EVAL_PHANTOMS, "eval")?);
                Ok(DatasetManifest {
                    records,
                    base_dir: PathBuf::from("."),
                })
            }
        }
    }
}
