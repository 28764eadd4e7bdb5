//! Alternating adversarial training.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{RunningStats, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{derive_seed, frame_average, rng_for, ColorMode, DatasetManifest, NoiseKind, TargetMode};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::{Generator, NormState};
use crate::losses::{extractor, l_gan_d, GeneratorObjective, LossBreakdown, PerceptualExtractor};
use crate::optim::AdamState;
use crate::params::{ensure_finite, ParamMap};
use crate::tensor::Tensor;
use crate::wavelet::{family, WaveletFamily};

const SALT_BATCH: u64 = 0xba7c;

/// One training image plane.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub target: Tensor,
    /// Fixed noisy observation, used when noise cannot be redrawn.
    pub noisy: Tensor,
    pub noise: NoiseKind,
    pub frames: usize,
    /// Clean targets get a fresh noise draw every time they are sampled.
    pub resample: bool,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub items: Vec<TrainItem>,
}

/// `[B, 1, P, P]` noisy inputs and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor,
    pub target: Tensor,
}

impl TrainingSet {
    /// Materialize one split; colour planes become separate items.
    pub fn from_manifest(manifest: &DatasetManifest, split: &str, mode: ColorMode) -> Result<Self> {
        let mut items = Vec::new();
        for rec in manifest.split(split) {
            let s = rec.materialize(&manifest.base_dir, mode)?;
            let [_, c, h, w] = s.target.dims4("training image")?;
            for ch in 0..c {
                let plane = |t: &Tensor| Tensor::from_vec(vec![1, 1, h, w], t.data()[ch * h * w..(ch + 1) * h * w].to_vec());
                items.push(TrainItem {
                    id: if c == 1 { s.id.clone() } else { format!("{}_c{ch}", s.id) },
                    target: plane(&s.target)?,
                    noisy: plane(&s.noisy)?,
                    noise: rec.noise,
                    frames: rec.frames,
                    resample: rec.target == TargetMode::Clean,
                });
            }
        }
        if items.is_empty() {
            return Err(Error::invalid("training set", format!("split `{split}` has no records")));
        }
        Ok(TrainingSet { items })
    }

    pub fn batch(&self, size: usize, patch: usize, rng: &mut impl Rng) -> Result<Batch> {
        let mut noisy = Vec::with_capacity(size);
        let mut target = Vec::with_capacity(size);
        for _ in 0..size {
            let item = &self.items[rng.random_range(0..self.items.len())];
            let [_, _, h, w] = item.target.dims4("training image")?;
            if h < patch || w < patch {
                return Err(Error::shape(
                    "batch",
                    format!("image {} is {h}x{w}, smaller than patch {patch}", item.id),
                ));
            }
            let top = rng.random_range(0..=h - patch);
            let left = rng.random_range(0..=w - patch);
            // random flip / rotation, so a patch covering a whole image is
            // still not shown the same way every time
            let k: u8 = rng.random_range(0..8);
            let t = item.target.crop(top, left, patch, patch)?.dihedral(k)?;
            let n = if item.resample {
                frame_average(&t, &item.noise, item.frames, rng)?
            } else {
                item.noisy.crop(top, left, patch, patch)?.dihedral(k)?
            };
            noisy.push(n);
            target.push(t);
        }
        Ok(Batch {
            noisy: Tensor::stack(&noisy)?.reshape(vec![size, 1, patch, patch])?,
            target: Tensor::stack(&target)?.reshape(vec![size, 1, patch, patch])?,
        })
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub g_params: ParamMap,
    pub g_norms: NormState,
    pub d_params: ParamMap,
    pub g_opt: AdamState,
    pub d_opt: AdamState,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub g_loss: f64,
    pub d_loss: f64,
    pub terms: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,g_loss,d_loss,gan,recon,iqa,percep,wavelet";

pub fn log_csv(logs: &[StepLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for l in logs {
        let t = &l.terms;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.step, l.g_loss, l.d_loss, t.gan, t.recon, t.iqa, t.percep, t.wavelet
        ));
    }
    s
}

/// Networks and fixed loss machinery built from a config.
pub struct Models {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: Arc<dyn PerceptualExtractor>,
    pub family: Arc<dyn WaveletFamily>,
}

impl Models {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Models {
            generator: Generator::new(config.generator_config())?,
            discriminator: Discriminator::new(config.discriminator_config())?,
            extractor: extractor(&config.loss.perceptual)?,
            family: family(&config.generator.wavelet)?,
            config,
        })
    }

    pub fn init_state(&self) -> TrainState {
        let mut rng = rng_for(self.config.train.seed);
        let (g_params, g_norms) = self.generator.init(&mut rng);
        let d_params = self.discriminator.init(&mut rng);
        let lr = self.config.train.learning_rate;
        TrainState {
            g_params,
            g_norms,
            d_params,
            g_opt: AdamState::new(lr),
            d_opt: AdamState::new(lr),
            step: 0,
        }
    }

    fn objective(&self) -> GeneratorObjective<'_> {
        GeneratorObjective {
            weights: self.config.weights(),
            toggles: self.config.toggles(),
            extractor: &*self.extractor,
            levels: self.config.loss.wavelet_levels,
            family: self.family.clone(),
        }
    }

    /// One discriminator update on the current fakes, then one generator
    /// update against the updated discriminator.
    pub fn train_step(&self, state: &mut TrainState, batch: &Batch) -> Result<StepLog> {
        let toggles = self.config.toggles();
        check_tensor("noisy input batch", &batch.noisy)?;
        check_tensor("target batch", &batch.target)?;
        let mut gt = Tape::new();
        let g_bound = gt.bind(state.g_params.iter(), true)?;
        let x = gt.constant(batch.noisy.clone())?;
        let y = gt.constant(batch.target.clone())?;
        let fake = self.generator.forward(&mut gt, &g_bound, &mut state.g_norms, x, true)?;
        check_tensor("generator output", gt.value(fake))?;

        let mut d_loss = 0.0;
        let fake_map = if toggles.gan {
            self.discriminator.quality_map(gt.value(fake))?
        } else {
            None
        };
        if toggles.gan {
            let mut dt = Tape::new();
            let d_bound = dt.bind(state.d_params.iter(), true)?;
            let real = dt.constant(batch.target.clone())?;
            let fake_const = dt.constant(gt.value(fake).clone())?;
            let dr = self.discriminator.forward(&mut dt, &d_bound, real)?;
            let df = self.discriminator.forward_with(&mut dt, &d_bound, fake_const, fake_map.as_ref())?;
            let loss = l_gan_d(&mut dt, dr, df)?;
            d_loss = dt.value(loss).item();
            check_scalar("discriminator loss", d_loss)?;
            dt.backward(loss)?;
            let grads = dt.grads_of(&d_bound);
            check_grads("discriminator", &grads)?;
            state.d_opt.step(&mut state.d_params, &grads)?;
            ensure_finite(&state.d_params, "discriminator")?;
        }

        let d_fake = if toggles.gan {
            let d_bound = gt.bind(state.d_params.iter(), false)?;
            Some(self.discriminator.forward_with(&mut gt, &d_bound, fake, fake_map.as_ref())?)
        } else {
            None
        };
        let (loss, terms) = self.objective().build(&mut gt, fake, y, d_fake)?;
        check_terms(&terms)?;
        let g_loss = gt.value(loss).item();
        check_scalar("generator loss", g_loss)?;
        gt.backward(loss)?;
        let grads = gt.grads_of(&g_bound);
        check_grads("generator", &grads)?;
        state.g_opt.step(&mut state.g_params, &grads)?;
        ensure_finite(&state.g_params, "generator")?;
        state.step += 1;
        Ok(StepLog {
            step: state.step,
            g_loss,
            d_loss,
            terms,
        })
    }

    /// Seeded batch for step `step`; resuming from a checkpoint replays the
    /// same batches.
    pub fn batch_for(&self, data: &TrainingSet, step: u64) -> Result<Batch> {
        let mut rng = rng_for(derive_seed(derive_seed(self.config.train.seed, SALT_BATCH), step));
        data.batch(self.config.train.batch_size, self.config.train.patch_size, &mut rng)
    }

    pub fn checkpoint(&self, state: &TrainState) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut put = |prefix: &str, m: &ParamMap| {
            for (k, v) in m {
                tensors.insert(format!("{prefix}{k}"), v.clone());
            }
        };
        put("g/", &state.g_params);
        put("d/", &state.d_params);
        put("adam/g/m/", &state.g_opt.first_moment);
        put("adam/g/v/", &state.g_opt.second_moment);
        put("adam/d/m/", &state.d_opt.first_moment);
        put("adam/d/v/", &state.d_opt.second_moment);
        for (k, s) in &state.g_norms {
            tensors.insert(format!("norm/{k}/mean"), s.mean.clone());
            tensors.insert(format!("norm/{k}/var"), s.var.clone());
        }
        let mut counters = BTreeMap::new();
        counters.insert("adam.g.step".to_string(), state.g_opt.step);
        counters.insert("adam.d.step".to_string(), state.d_opt.step);
        Checkpoint {
            step: state.step,
            seed: self.config.train.seed,
            config: self.config.to_toml(),
            counters,
            tensors,
        }
    }

    /// Rebuild the state, insisting that every tensor matches the
    /// architecture the stored config describes.
    pub fn restore(&self, ckpt: &Checkpoint) -> Result<TrainState> {
        let fresh = self.init_state();
        let take = |prefix: &str, like: &ParamMap| -> Result<ParamMap> {
            let got = ckpt.group(prefix);
            matching(prefix, like, got)
        };
        let g_params = take("g/", &fresh.g_params)?;
        let d_params = take("d/", &fresh.d_params)?;
        let mut g_norms = NormState::new();
        for (k, s) in &fresh.g_norms {
            let get = |part: &str| -> Result<Tensor> {
                let name = format!("norm/{k}/{part}");
                let t = ckpt
                    .tensors
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if t.shape() != s.mean.shape() {
                    return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}", t.shape())));
                }
                Ok(t.clone())
            };
            g_norms.insert(
                k.clone(),
                RunningStats {
                    mean: get("mean")?,
                    var: get("var")?,
                },
            );
        }
        let moments = |side: &str, like: &ParamMap, opt: &mut AdamState| -> Result<()> {
            let subset = |m: BTreeMap<String, Tensor>| -> Result<ParamMap> {
                for (k, v) in &m {
                    match like.get(k) {
                        Some(p) if p.shape() == v.shape() => {}
                        _ => return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{side}/{k}`"))),
                    }
                }
                Ok(m)
            };
            opt.first_moment = subset(ckpt.group(&format!("adam/{side}/m/")))?;
            opt.second_moment = subset(ckpt.group(&format!("adam/{side}/v/")))?;
            opt.step = ckpt.counter(&format!("adam.{side}.step"))?;
            Ok(())
        };
        let mut g_opt = fresh.g_opt;
        let mut d_opt = fresh.d_opt;
        moments("g", &g_params, &mut g_opt)?;
        moments("d", &d_params, &mut d_opt)?;
        let known = g_params.len()
            + d_params.len()
            + 2 * g_norms.len()
            + g_opt.first_moment.len()
            + g_opt.second_moment.len()
            + d_opt.first_moment.len()
            + d_opt.second_moment.len();
        if known != ckpt.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors do not belong to this architecture",
                ckpt.tensors.len() - known
            )));
        }
        Ok(TrainState {
            g_params,
            g_norms,
            d_params,
            g_opt,
            d_opt,
            step: ckpt.step,
        })
    }
}

fn matching(prefix: &str, like: &ParamMap, got: BTreeMap<String, Tensor>) -> Result<ParamMap> {
    for (k, v) in like {
        match got.get(k) {
            None => return Err(Error::Checkpoint(format!("missing tensor `{prefix}{k}`"))),
            Some(t) if t.shape() != v.shape() => {
                return Err(Error::Checkpoint(format!(
                    "tensor `{prefix}{k}` has shape {:?}, expected {:?}",
                    t.shape(),
                    v.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = got.keys().find(|k| !like.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{prefix}{extra}`")));
    }
    Ok(got)
}

fn check_scalar(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} ({v})")))
    }
}

fn check_tensor(what: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_terms(t: &LossBreakdown) -> Result<()> {
    for (name, v) in [
        ("adversarial", t.gan),
        ("reconstruction", t.recon),
        ("quality", t.iqa),
        ("perceptual", t.percep),
        ("wavelet", t.wavelet),
    ] {
        check_scalar(&format!("{name} loss term"), v)?;
    }
    Ok(())
}

fn check_grads(net: &str, grads: &BTreeMap<String, Tensor>) -> Result<()> {
    match grads.iter().find(|(_, g)| !g.is_finite()) {
        Some((k, _)) => Err(Error::NonFinite(format!("{net} gradient of {k}"))),
        None => Ok(()),
    }
}

/// Models, state and training data together.
pub struct Trainer {
    pub models: Models,
    pub state: TrainState,
    pub data: TrainingSet,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let models = Models::new(config)?;
        let data = TrainingSet::from_manifest(&models.config.dataset()?, "train", models.config.color()?)?;
        let state = models.init_state();
        Ok(Trainer { models, state, data })
    }

    /// Continue from a checkpoint; its stored config is authoritative.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_toml(&ckpt.config)?;
        let models = Models::new(config)?;
        let state = models.restore(ckpt)?;
        let data = TrainingSet::from_manifest(&models.config.dataset()?, "train", models.config.color()?)?;
        Ok(Trainer { models, state, data })
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.models.batch_for(&self.data, self.state.step)?;
        self.models.train_step(&mut self.state, &batch)
    }

    /// Train until `config.train.steps`, calling `observe` after each step.
    pub fn run(&mut self, mut observe: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while self.state.step < self.models.config.train.steps {
            let log = self.step()?;
            observe(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.models.checkpoint(&self.state)
    }

    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        self.models.generator.denoise(&self.state.g_params, &self.state.g_norms, x)
    }
}

/// Generator weights from a checkpoint, for inference only.
pub struct TrainedModel {
    pub config: TrainConfig,
    pub generator: Generator,
    pub params: ParamMap,
    pub norms: NormState,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let models = Models::new(TrainConfig::from_toml(&ckpt.config)?)?;
        let state = models.restore(ckpt)?;
        Ok(TrainedModel {
            config: models.config,
            generator: models.generator,
            params: state.g_params,
            norms: state.g_norms,
        })
    }

    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        self.generator.denoise(&self.params, &self.norms, x)
    }
}
