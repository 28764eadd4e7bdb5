//! Phantoms, noise simulation, frame averaging, patch sampling, PNG I/O and
//! dataset manifests.

use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

/// Noisy samples are clamped to this ceiling so averaging stays unbiased.
pub const NOISE_CEILING: f64 = 1.5;
/// Poisson draws switch from inversion to a rounded normal above this mean.
pub const POISSON_NORMAL_THRESHOLD: f64 = 50.0;
/// Frame count used for pseudo ground truth.
pub const PSEUDO_GT_FRAMES: usize = 50;

/// SplitMix64 step, used to derive independent per-item seeds.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    None,
    Gaussian { sigma: f64 },
    Poisson { peak: f64 },
    Mixed { sigma: f64, peak: f64 },
}

impl NoiseKind {
    pub fn validate(&self) -> Result<()> {
        let (sigma, peak) = match *self {
            NoiseKind::None => (0.0, 1.0),
            NoiseKind::Gaussian { sigma } => (sigma, 1.0),
            NoiseKind::Poisson { peak } => (0.0, peak),
            NoiseKind::Mixed { sigma, peak } => (sigma, peak),
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("noise", format!("sigma must be >= 0, got {sigma}")));
        }
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::invalid("noise", format!("peak must be > 0, got {peak}")));
        }
        Ok(())
    }

    /// Short label safe for file names and CSV cells.
    pub fn label(&self) -> String {
        match *self {
            NoiseKind::None => "none".into(),
            NoiseKind::Gaussian { sigma } => format!("gaussian_s{sigma}"),
            NoiseKind::Poisson { peak } => format!("poisson_p{peak}"),
            NoiseKind::Mixed { sigma, peak } => format!("mixed_s{sigma}_p{peak}"),
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseKind::None => write!(f, "none"),
            NoiseKind::Gaussian { sigma } => write!(f, "gaussian:{sigma}"),
            NoiseKind::Poisson { peak } => write!(f, "poisson:{peak}"),
            NoiseKind::Mixed { sigma, peak } => write!(f, "mixed:{sigma}:{peak}"),
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    /// `none`, `gaussian:<sigma>`, `poisson:<peak>` or `mixed:<sigma>:<peak>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::invalid("noise", format!("`{s}` is missing a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid("noise", format!("`{s}`: {e}")))
        };
        let kind = match (parts[0].to_ascii_lowercase().as_str(), parts.len()) {
            ("none", 1) => NoiseKind::None,
            ("gaussian", 2) => NoiseKind::Gaussian { sigma: num(1)? },
            ("poisson", 2) => NoiseKind::Poisson { peak: num(1)? },
            ("mixed", 3) => NoiseKind::Mixed {
                sigma: num(1)?,
                peak: num(2)?,
            },
            _ => {
                return Err(Error::invalid(
                    "noise",
                    format!("`{s}` (expected none, gaussian:S, poisson:P or mixed:S:P)"),
                ))
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// A noise description plus the seed that makes its draws reproducible.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseModel { kind, seed }
    }

    pub fn apply(&self, clean: &Tensor) -> Result<Tensor> {
        add_noise(clean, &self.kind, &mut rng_for(self.seed))
    }

    pub fn frame_average(&self, clean: &Tensor, frames: usize) -> Result<Tensor> {
        frame_average(clean, &self.kind, frames, &mut rng_for(self.seed))
    }
}

pub fn sample_poisson(mean: f64, rng: &mut impl Rng) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    if mean > POISSON_NORMAL_THRESHOLD {
        let z: f64 = rng.sample(StandardNormal);
        return (mean + mean.sqrt() * z).round().max(0.0);
    }
    let u: f64 = rng.random();
    let mut k = 0.0;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && p > 0.0 {
        k += 1.0;
        p *= mean / k;
        cdf += p;
    }
    k
}

/// One noisy realization of `clean`, clamped to `[0, NOISE_CEILING]`.
pub fn add_noise(clean: &Tensor, kind: &NoiseKind, rng: &mut impl Rng) -> Result<Tensor> {
    kind.validate()?;
    let gauss = |sigma: f64, v: f64, rng: &mut dyn rand::RngCore| -> f64 {
        if sigma == 0.0 {
            v
        } else {
            v + Normal::new(0.0, sigma).expect("sigma validated").sample(rng)
        }
    };
    let out = clean
        .data()
        .iter()
        .map(|&v| {
            let noisy = match *kind {
                NoiseKind::None => v,
                NoiseKind::Gaussian { sigma } => gauss(sigma, v, rng),
                NoiseKind::Poisson { peak } => sample_poisson(peak * v.max(0.0), rng) / peak,
                NoiseKind::Mixed { sigma, peak } => {
                    gauss(sigma, sample_poisson(peak * v.max(0.0), rng) / peak, rng)
                }
            };
            noisy.clamp(0.0, NOISE_CEILING)
        })
        .collect();
    Tensor::from_vec(clean.shape().to_vec(), out)
}

/// Mean of `frames` independent noisy acquisitions.
pub fn frame_average(clean: &Tensor, kind: &NoiseKind, frames: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if frames == 0 {
        return Err(Error::invalid("frame_average", "frame count must be at least 1"));
    }
    let mut acc = Tensor::zeros(clean.shape().to_vec());
    for _ in 0..frames {
        acc.add_assign(&add_noise(clean, kind, rng)?);
    }
    Ok(acc.scale(1.0 / frames as f64))
}

/// Uniformly random in-bounds top-left corners for `count` square patches.
pub fn patch_corners(h: usize, w: usize, patch: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid(
            "sample_patches",
            format!("patch size {patch} does not fit a {h}x{w} image"),
        ));
    }
    let mut rng = rng_for(seed);
    Ok((0..count)
        .map(|_| (rng.random_range(0..=h - patch), rng.random_range(0..=w - patch)))
        .collect())
}

pub fn sample_patches(image: &Tensor, patch: usize, count: usize, seed: u64) -> Result<Vec<Tensor>> {
    let [_, _, h, w] = image.dims4("sample_patches")?;
    patch_corners(h, w, patch, count, seed)?
        .into_iter()
        .map(|(t, l)| image.crop(t, l, patch, patch))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomKind {
    Filaments,
    Blobs,
    Edges,
    Mixed,
}

impl PhantomKind {
    pub const ALL: [PhantomKind; 4] = [
        PhantomKind::Filaments,
        PhantomKind::Blobs,
        PhantomKind::Edges,
        PhantomKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PhantomKind::Filaments => "filaments",
            PhantomKind::Blobs => "blobs",
            PhantomKind::Edges => "edges",
            PhantomKind::Mixed => "mixed",
        }
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PhantomKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(
                    "phantom",
                    format!("unknown kind `{s}` (known: filaments, blobs, edges, mixed)"),
                )
            })
    }
}

struct Canvas {
    n: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        // dim, slowly varying background
        let base = rng.random_range(0.04..0.1);
        let gx = rng.random_range(-0.04..0.04);
        let gy = rng.random_range(-0.04..0.04);
        let mut px = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (u, v) = (x as f64 / n as f64 - 0.5, y as f64 / n as f64 - 0.5);
                px.push(base + gx * u + gy * v);
            }
        }
        Canvas { n, px }
    }

    fn add_layer(&mut self, layer: &[f64]) {
        self.px.iter_mut().zip(layer).for_each(|(p, l)| *p += l);
    }

    fn finish(self) -> Result<Tensor> {
        let n = self.n;
        Tensor::from_vec(vec![1, 1, n, n], self.px.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    fn filaments(&mut self, count: usize, rng: &mut impl Rng) {
        let n = self.n as f64;
        for _ in 0..count {
            let mut layer = vec![0.0; self.n * self.n];
            let width: f64 = rng.random_range(0.4..0.65);
            let amp = rng.random_range(0.45..0.8);
            let (mut x, mut y) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
            let mut bend = 0.0;
            let steps = (rng.random_range(0.6..1.4) * n / 0.5) as usize;
            let reach = (3.0 * width).ceil() as isize;
            for _ in 0..steps {
                bend = 0.9 * bend + rng.random_range(-0.02..0.02);
                heading += bend;
                x += 0.5 * heading.cos();
                y += 0.5 * heading.sin();
                let (cx, cy) = (x.round() as isize, y.round() as isize);
                for py in cy - reach..=cy + reach {
                    for qx in cx - reach..=cx + reach {
                        if py < 0 || qx < 0 || py >= self.n as isize || qx >= self.n as isize {
                            continue;
                        }
                        let d2 = (qx as f64 - x).powi(2) + (py as f64 - y).powi(2);
                        let v = amp * (-d2 / (2.0 * width * width)).exp();
                        let cell = &mut layer[py as usize * self.n + qx as usize];
                        *cell = f64::max(*cell, v);
                    }
                }
            }
            self.add_layer(&layer);
        }
    }

    /// Cell-like ellipses: soft interior, bright thin membrane and a few puncta.
    fn blobs(&mut self, count: usize, rng: &mut impl Rng) {
        let n = self.n as f64;
        for _ in 0..count {
            let (cx, cy) = (rng.random_range(0.1 * n..0.9 * n), rng.random_range(0.1 * n..0.9 * n));
            let (ra, rb) = (rng.random_range(0.08 * n..0.2 * n), rng.random_range(0.08 * n..0.2 * n));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let fill = rng.random_range(0.12..0.25);
            let rim = rng.random_range(0.3..0.45);
            let (c, s) = (theta.cos(), theta.sin());
            let rmean = 0.5 * (ra + rb);
            let mut layer = vec![0.0; self.n * self.n];
            for y in 0..self.n {
                for x in 0..self.n {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                    let r = ((u / ra).powi(2) + (v / rb).powi(2)).sqrt();
                    let d = (r - 1.0) * rmean;
                    let inside = 1.0 / (1.0 + (d / 0.35).exp());
                    layer[y * self.n + x] =
                        inside * fill * (1.0 - 0.3 * r.min(1.0).powi(2)) + rim * (-d * d / (2.0 * 0.25)).exp();
                }
            }
            for _ in 0..rng.random_range(12..24) {
                let rr = rng.random_range(0.0..0.7);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let (px, py) = (
                    cx + rr * (ra * phi.cos() * c - rb * phi.sin() * s),
                    cy + rr * (ra * phi.cos() * s + rb * phi.sin() * c),
                );
                let amp = rng.random_range(0.2..0.4);
                for y in 0..self.n {
                    for x in 0..self.n {
                        let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                        if d2 < 16.0 {
                            layer[y * self.n + x] += amp * (-d2 / (2.0 * 0.25)).exp();
                        }
                    }
                }
            }
            self.add_layer(&layer);
        }
    }

    /// Free diffraction-limited spots.
    fn puncta(&mut self, count: usize, rng: &mut impl Rng) {
        let n = self.n as f64;
        let mut layer = vec![0.0; self.n * self.n];
        for _ in 0..count {
            let (px, py) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let amp = rng.random_range(0.25..0.55);
            for y in 0..self.n {
                for x in 0..self.n {
                    let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                    if d2 < 9.0 {
                        layer[y * self.n + x] += amp * (-d2 / (2.0 * 0.25)).exp();
                    }
                }
            }
        }
        self.add_layer(&layer);
    }

    /// Rotated rectangles with hard boundaries.
    fn edges(&mut self, count: usize, rng: &mut impl Rng) {
        let n = self.n as f64;
        for i in 0..count {
            let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let (hw, hh) = (rng.random_range(0.1 * n..0.35 * n), rng.random_range(0.1 * n..0.35 * n));
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let level = rng.random_range(0.15..0.45);
            // the first and about half the other rectangles carry a fine stripe texture
            let period = rng.random_range(2.2..2.6);
            let striped = i == 0 || rng.random_bool(0.5);
            let (c, s) = (theta.cos(), theta.sin());
            let mut layer = vec![0.0; self.n * self.n];
            for y in 0..self.n {
                for x in 0..self.n {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                    if u.abs() <= hw && v.abs() <= hh {
                        let stripe = if striped && (u / period).rem_euclid(1.0) < 0.5 { 0.25 } else { 1.0 };
                        layer[y * self.n + x] = level * stripe;
                    }
                }
            }
            self.add_layer(&layer);
        }
    }
}

/// Deterministic synthetic microscopy-like image `[1, 1, size, size]` in `[0, 1]`.
pub fn phantom(kind: PhantomKind, size: usize, seed: u64) -> Result<Tensor> {
    if size < 8 {
        return Err(Error::invalid("phantom", format!("size must be at least 8, got {size}")));
    }
    let mut rng = rng_for(derive_seed(seed, kind as u64 + 1));
    let mut canvas = Canvas::new(size, &mut rng);
    let scale = (size / 32).max(1);
    match kind {
        PhantomKind::Filaments => canvas.filaments(4 + 3 * scale, &mut rng),
        PhantomKind::Blobs => {
            canvas.blobs(2 + scale, &mut rng);
            canvas.puncta(16 * scale, &mut rng);
        }
        PhantomKind::Edges => canvas.edges(3 + scale, &mut rng),
        PhantomKind::Mixed => {
            canvas.edges(1, &mut rng);
            canvas.blobs(1 + scale / 2, &mut rng);
            canvas.filaments(2 + scale, &mut rng);
        }
    }
    canvas.finish()
}

/// Phantom `i` of a round-robin set cycling through every kind.
pub fn phantom_set(count: usize, size: usize, seed: u64) -> Result<Vec<(String, Tensor)>> {
    (0..count)
        .map(|i| {
            let kind = PhantomKind::ALL[i % PhantomKind::ALL.len()];
            let s = derive_seed(seed, i as u64);
            Ok((format!("{}_{i:03}", kind.name()), phantom(kind, size, s)?))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColorMode {
    /// Rec. 601 luma, one channel.
    #[default]
    Luminance,
    PerChannel,
}

/// Load an 8- or 16-bit grey or RGB PNG as `[1, C, H, W]` in `[0, 1]`.
pub fn load_image(path: &Path, mode: ColorMode) -> Result<Tensor> {
    let bytes = fsio::read(path)?;
    let format = image::guess_format(&bytes).map_err(|e| Error::ImageFormat {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if format != ImageFormat::Png {
        return Err(Error::ImageFormat {
            path: path.to_path_buf(),
            detail: format!("{format:?} (only PNG is supported)"),
        });
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match &img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().iter().map(|&v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect()),
        other => {
            return Err(Error::ImageFormat {
                path: path.to_path_buf(),
                detail: format!("pixel layout {:?} (expected grey or RGB, 8 or 16 bit)", other.color()),
            })
        }
    };
    if channels == 1 {
        return Tensor::from_vec(vec![1, 1, h, w], data);
    }
    match mode {
        ColorMode::Luminance => Tensor::from_vec(
            vec![1, 1, h, w],
            data.chunks(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        ),
        ColorMode::PerChannel => {
            let mut planar = vec![0.0; 3 * h * w];
            for (i, p) in data.chunks(3).enumerate() {
                for c in 0..3 {
                    planar[c * h * w + i] = p[c];
                }
            }
            Tensor::from_vec(vec![1, 3, h, w], planar)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    #[default]
    Sixteen,
}

/// Encode a `[1, C, H, W]` tensor (C = 1 or 3) as PNG; values are clamped to `[0, 1]`.
pub fn encode_png(image: &Tensor, depth: BitDepth) -> Result<Vec<u8>> {
    let [n, c, h, w] = image.dims4("encode_png")?;
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::shape("encode_png", format!("expected [1, 1|3, H, W], got {:?}", image.shape())));
    }
    let plane = h * w;
    let px = |i: usize, ch: usize| image.data()[ch * plane + i].clamp(0.0, 1.0);
    let interleaved = |max: f64| -> Vec<f64> {
        (0..plane)
            .flat_map(|i| (0..c).map(move |ch| (i, ch)))
            .map(|(i, ch)| (px(i, ch) * max).round())
            .collect()
    };
    let (wu, hu) = (w as u32, h as u32);
    let dynimg = match (depth, c) {
        (BitDepth::Eight, 1) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(wu, hu, interleaved(255.0).into_iter().map(|v| v as u8).collect())
                .expect("buffer sized from shape"),
        ),
        (BitDepth::Eight, _) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(wu, hu, interleaved(255.0).into_iter().map(|v| v as u8).collect())
                .expect("buffer sized from shape"),
        ),
        (BitDepth::Sixteen, 1) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(wu, hu, interleaved(65535.0).into_iter().map(|v| v as u16).collect())
                .expect("buffer sized from shape"),
        ),
        (BitDepth::Sixteen, _) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(wu, hu, interleaved(65535.0).into_iter().map(|v| v as u16).collect())
                .expect("buffer sized from shape"),
        ),
    };
    let mut out = Cursor::new(Vec::new());
    dynimg.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn save_image(path: &Path, image: &Tensor, depth: BitDepth) -> Result<()> {
    fsio::write_atomic(path, &encode_png(image, depth)?)
}

/// Where a manifest record's clean image comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    File(PathBuf),
    Phantom { kind: PhantomKind, size: usize, seed: u64 },
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(p) => write!(f, "{}", p.display()),
            Source::Phantom { kind, size, seed } => write!(f, "phantom:{}:{size}:{seed}", kind.name()),
        }
    }
}

/// What the noisy input is paired with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetMode {
    /// The clean source itself.
    #[default]
    Clean,
    /// Mean of 50 independent noisy frames (pseudo ground truth).
    Average50,
    /// A second, independent noisy acquisition with the same frame count.
    Pair,
}

impl TargetMode {
    pub fn name(self) -> &'static str {
        match self {
            TargetMode::Clean => "clean",
            TargetMode::Average50 => "average50",
            TargetMode::Pair => "pair",
        }
    }
}

impl FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clean" => Ok(TargetMode::Clean),
            "average50" => Ok(TargetMode::Average50),
            "pair" => Ok(TargetMode::Pair),
            _ => Err(Error::invalid("target", format!("unknown target `{s}` (known: clean, average50, pair)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub source: Source,
    pub noise: NoiseKind,
    pub frames: usize,
    pub split: String,
    pub target: TargetMode,
    pub seed: u64,
}

/// A materialized (noisy, target) pair.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub noisy: Tensor,
    pub target: Tensor,
    pub noise_level: String,
    pub split: String,
}

impl ManifestRecord {
    pub fn noise_level(&self) -> String {
        format!("{}_n{}", self.noise.label(), self.frames)
    }

    pub fn clean(&self, base_dir: &Path, mode: ColorMode) -> Result<Tensor> {
        match &self.source {
            Source::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                load_image(&path, mode)
            }
            Source::Phantom { kind, size, seed } => phantom(*kind, *size, *seed),
        }
    }

    pub fn materialize(&self, base_dir: &Path, mode: ColorMode) -> Result<Sample> {
        let clean = self.clean(base_dir, mode)?;
        let noisy = frame_average(&clean, &self.noise, self.frames, &mut rng_for(self.seed))?;
        let target = match self.target {
            TargetMode::Clean => clean,
            TargetMode::Average50 => frame_average(
                &clean,
                &self.noise,
                PSEUDO_GT_FRAMES,
                &mut rng_for(derive_seed(self.seed, 50)),
            )?,
            TargetMode::Pair => frame_average(&clean, &self.noise, self.frames, &mut rng_for(derive_seed(self.seed, 2)))?,
        };
        Ok(Sample {
            id: self.id.clone(),
            noisy,
            target,
            noise_level: self.noise_level(),
            split: self.split.clone(),
        })
    }
}

impl fmt::Display for ManifestRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} frames={} split={} target={} seed={} id={}",
            self.source,
            self.noise,
            self.frames,
            self.split,
            self.target.name(),
            self.seed,
            self.id
        )
    }
}

/// One record per line:
///
/// ```text
/// # source                 noise          options
/// phantom:filaments:64:3   gaussian:0.1   frames=4 split=train
/// cells/a.png              mixed:0.02:50  split=eval target=average50 seed=9
/// ```
///
/// Options are `frames` (default 1), `split` (default `train`), `target`
/// (`clean`, `average50`, `pair`), `seed` (default derived from the line
/// number) and `id` (default derived from the source).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |detail: String| Error::Manifest { line: line_no, detail };
            let mut tokens = line.split_whitespace();
            let source_tok = tokens.next().expect("line is non-empty");
            let noise_tok = tokens
                .next()
                .ok_or_else(|| bad("missing noise model after the source".into()))?;
            let source = parse_source(source_tok).map_err(|e| bad(e.to_string()))?;
            let noise: NoiseKind = noise_tok.parse().map_err(|e: Error| bad(e.to_string()))?;
            let mut rec = ManifestRecord {
                id: default_id(&source, line_no),
                source,
                noise,
                frames: 1,
                split: "train".into(),
                target: TargetMode::Clean,
                seed: derive_seed(0x5EED, line_no as u64),
            };
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
                match k {
                    "frames" => {
                        rec.frames = v.parse().map_err(|_| bad(format!("frames `{v}` is not an integer")))?;
                        if rec.frames == 0 {
                            return Err(bad("frames must be at least 1".into()));
                        }
                    }
                    "split" => rec.split = v.to_string(),
                    "target" => rec.target = v.parse().map_err(|e: Error| bad(e.to_string()))?,
                    "seed" => rec.seed = v.parse().map_err(|_| bad(format!("seed `{v}` is not an integer")))?,
                    "id" => rec.id = v.to_string(),
                    _ => return Err(bad(format!("unknown option `{k}`"))),
                }
            }
            records.push(rec);
        }
        Ok(DatasetManifest {
            records,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(fsio::read(path)?)
            .map_err(|_| Error::Manifest { line: 0, detail: "file is not UTF-8".into() })?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let m = Self::parse(&text, dir)?;
        for (i, r) in m.records.iter().enumerate() {
            if let Source::File(p) = &r.source {
                let full = if p.is_absolute() { p.clone() } else { dir.join(p) };
                if !full.exists() {
                    return Err(Error::Manifest {
                        line: i + 1,
                        detail: format!("{} does not exist", full.display()),
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn split(&self, tag: &str) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == tag).collect()
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

fn parse_source(tok: &str) -> Result<Source> {
    let Some(spec) = tok.strip_prefix("phantom:") else {
        return Ok(Source::File(PathBuf::from(tok)));
    };
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::invalid("manifest", format!("phantom spec `{tok}` must be phantom:KIND:SIZE:SEED")));
    }
    let size = parts[1]
        .parse()
        .map_err(|_| Error::invalid("manifest", format!("phantom size `{}` is not an integer", parts[1])))?;
    let seed = parts[2]
        .parse()
        .map_err(|_| Error::invalid("manifest", format!("phantom seed `{}` is not an integer", parts[2])))?;
    Ok(Source::Phantom {
        kind: parts[0].parse()?,
        size,
        seed,
    })
}

fn default_id(source: &Source, line: usize) -> String {
    match source {
        Source::File(p) => p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("item{line}")),
        Source::Phantom { kind, seed, .. } => format!("{}_{seed}", kind.name()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::radial_spectrum;

    fn std_dev(t: &Tensor) -> f64 {
        let m = t.mean();
        (t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t.numel() - 1) as f64).sqrt()
    }

    fn hf_share(x: &Tensor) -> f64 {
        let s = radial_spectrum(x, None).unwrap();
        let hf: f64 = s
            .rho
            .iter()
            .zip(s.power.iter().zip(&s.counts))
            .filter(|(r, _)| **r > 0.375)
            .map(|(_, (p, c))| p * *c as f64)
            .sum();
        hf / s.total_power
    }

    #[test]
    fn gaussian_zero_sigma_is_identity() {
        let x = phantom(PhantomKind::Mixed, 32, 1).unwrap();
        let y = add_noise(&x, &NoiseKind::Gaussian { sigma: 0.0 }, &mut rng_for(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn gaussian_std_and_poisson_variance() {
        let flat = Tensor::full(vec![1, 1, 100, 100], 0.5);
        let g = add_noise(&flat, &NoiseKind::Gaussian { sigma: 0.1 }, &mut rng_for(1)).unwrap();
        let s = std_dev(&g);
        assert!((0.095..=0.105).contains(&s), "{s}");

        let p = add_noise(&flat, &NoiseKind::Poisson { peak: 100.0 }, &mut rng_for(2)).unwrap();
        let var = std_dev(&p).powi(2);
        assert!((var / 0.005 - 1.0).abs() < 0.1, "{var}");
        let se = (0.005f64 / 1e4).sqrt();
        assert!((p.mean() - 0.5).abs() < 3.0 * se);
    }

    #[test]
    fn poisson_sampler_mean_and_variance_on_both_sides_of_threshold() {
        let mut r = rng_for(3);
        for mean in [0.3, 4.0, 30.0, 80.0, 400.0] {
            let xs: Vec<f64> = (0..20000).map(|_| sample_poisson(mean, &mut r)).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            assert!((m - mean).abs() < 4.0 * (mean / 2e4).sqrt(), "{mean}: {m}");
            assert!((v / mean - 1.0).abs() < 0.06, "{mean}: {v}");
        }
    }

    #[test]
    fn frame_average_law() {
        let flat = Tensor::full(vec![1, 1, 100, 100], 0.5);
        let kind = NoiseKind::Gaussian { sigma: 0.1 };
        let avg = frame_average(&flat, &kind, 16, &mut rng_for(4)).unwrap();
        let s = std_dev(&avg);
        assert!((0.0238..=0.0263).contains(&s), "{s}");
        assert!(frame_average(&flat, &kind, 0, &mut rng_for(4)).is_err());
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let x = phantom(PhantomKind::Blobs, 32, 5).unwrap();
        let m = NoiseModel::new(NoiseKind::Mixed { sigma: 0.05, peak: 30.0 }, 77);
        assert_eq!(m.apply(&x).unwrap(), m.apply(&x).unwrap());
        assert_ne!(m.apply(&x).unwrap(), NoiseModel::new(m.kind, 78).apply(&x).unwrap());
        let y = m.frame_average(&x, 4).unwrap();
        assert!(y.min() >= 0.0 && y.max() <= NOISE_CEILING);
    }

    #[test]
    fn noise_kind_parsing() {
        assert_eq!("gaussian:0.1".parse::<NoiseKind>().unwrap(), NoiseKind::Gaussian { sigma: 0.1 });
        assert_eq!(
            "mixed:0.02:50".parse::<NoiseKind>().unwrap(),
            NoiseKind::Mixed { sigma: 0.02, peak: 50.0 }
        );
        assert!("poisson:0".parse::<NoiseKind>().is_err());
        assert!("gaussian:-1".parse::<NoiseKind>().is_err());
        assert!("speckle:1".parse::<NoiseKind>().is_err());
        let k: NoiseKind = "mixed:0.5:20".parse().unwrap();
        assert_eq!(k.to_string().parse::<NoiseKind>().unwrap(), k);
    }

    #[test]
    fn phantoms_are_deterministic_bounded_and_detailed() {
        for kind in PhantomKind::ALL {
            for seed in 0..5 {
                let a = phantom(kind, 64, seed).unwrap();
                assert_eq!(a, phantom(kind, 64, seed).unwrap());
                assert!(a.min() >= 0.0 && a.max() <= 1.0);
                let share = hf_share(&a);
                assert!(share > 0.01, "{} seed {seed}: {share}", kind.name());
            }
        }
        assert_ne!(phantom(PhantomKind::Edges, 64, 0).unwrap(), phantom(PhantomKind::Edges, 64, 1).unwrap());
    }

    #[test]
    fn filaments_carry_more_high_frequency_energy_than_blobs() {
        for seed in 0..5 {
            let f = hf_share(&phantom(PhantomKind::Filaments, 64, seed).unwrap());
            let b = hf_share(&phantom(PhantomKind::Blobs, 64, seed).unwrap());
            assert!(f > b, "seed {seed}: {f} vs {b}");
        }
    }

    #[test]
    fn patches() {
        let img = phantom(PhantomKind::Mixed, 32, 0).unwrap();
        let whole = sample_patches(&img, 32, 1, 9).unwrap();
        assert_eq!(whole[0], img);
        let corners = patch_corners(40, 30, 7, 1000, 3).unwrap();
        assert!(corners.iter().all(|&(t, l)| t + 7 <= 40 && l + 7 <= 30));
        assert_eq!(corners, patch_corners(40, 30, 7, 1000, 3).unwrap());
        assert!(sample_patches(&img, 33, 1, 0).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng_for(6);
        let q8 = Tensor::rand_uniform(vec![1, 1, 9, 13], 0.0, 1.0, &mut r).map(|v| (v * 255.0).round() / 255.0);
        let p = dir.path().join("a.png");
        save_image(&p, &q8, BitDepth::Eight).unwrap();
        assert_eq!(load_image(&p, ColorMode::Luminance).unwrap(), q8);

        let q16 = Tensor::rand_uniform(vec![1, 3, 5, 4], 0.0, 1.0, &mut r).map(|v| (v * 65535.0).round() / 65535.0);
        save_image(&p, &q16, BitDepth::Sixteen).unwrap();
        assert_eq!(load_image(&p, ColorMode::PerChannel).unwrap(), q16);
        let luma = load_image(&p, ColorMode::Luminance).unwrap();
        assert_eq!(luma.shape(), &[1, 1, 5, 4]);

        save_image(&p, &Tensor::ones(vec![1, 1, 2, 2]), BitDepth::Eight).unwrap();
        assert!(load_image(&p, ColorMode::Luminance).unwrap().data().iter().all(|&v| v == 1.0));
        save_image(&p, &Tensor::ones(vec![1, 1, 2, 2]), BitDepth::Sixteen).unwrap();
        assert!(load_image(&p, ColorMode::Luminance).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unsupported_images_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"GIF89a....").unwrap();
        match load_image(&p, ColorMode::Luminance) {
            Err(Error::ImageFormat { detail, .. }) => assert!(detail.contains("Gif"), "{detail}"),
            other => panic!("{other:?}"),
        }
        let rgba = DynamicImage::new_rgba8(2, 2);
        rgba.save_with_format(&p, ImageFormat::Png).unwrap();
        match load_image(&p, ColorMode::Luminance) {
            Err(Error::ImageFormat { detail, .. }) => assert!(detail.contains("Rgba8"), "{detail}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_parsing() {
        let text = "\
# comment line
phantom:filaments:32:3  gaussian:0.1  frames=4 split=eval
img/cell.png  mixed:0.02:50  target=average50 seed=9   # trailing
";
        let m = DatasetManifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].frames, 4);
        assert_eq!(m.records[0].split, "eval");
        assert_eq!(m.records[0].id, "filaments_3");
        assert_eq!(m.records[1].target, TargetMode::Average50);
        assert_eq!(m.records[1].seed, 9);
        assert_eq!(m.records[1].id, "cell");
        assert_eq!(m.split("train").len(), 1);

        let again = DatasetManifest::parse(&m.to_text(), Path::new("/data")).unwrap();
        assert_eq!(again.records, m.records);

        for (bad, line) in [
            ("phantom:stars:32:1 none", 1),
            ("\n\nx.png gaussian:0.1 frames=0", 3),
            ("x.png", 1),
            ("x.png none colour=red", 1),
        ] {
            match DatasetManifest::parse(bad, Path::new(".")) {
                Err(Error::Manifest { line: l, .. }) => assert_eq!(l, line, "{bad}"),
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn manifest_materializes_pairs() {
        let m = DatasetManifest::parse("phantom:edges:32:1 gaussian:0.1 frames=2 target=pair", Path::new(".")).unwrap();
        let s = m.records[0].materialize(Path::new("."), ColorMode::Luminance).unwrap();
        assert_ne!(s.noisy, s.target);
        assert_eq!(s.noise_level, "gaussian_s0.1_n2");
        let again = m.records[0].materialize(Path::new("."), ColorMode::Luminance).unwrap();
        assert_eq!(again.noisy, s.noisy);
        let missing = tempfile::tempdir().unwrap();
        let path = missing.path().join("m.txt");
        std::fs::write(&path, "nothere.png none\n").unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Manifest { line: 1, .. })));
    }
}
