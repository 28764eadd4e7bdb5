//! Local-entropy quality maps.
//!
//! The histogram of each `window x window` neighbourhood (reflection padded)
//! is taken over `bins` equal-width bins of `[0, 1]`; the map holds its
//! Shannon entropy in bits. [`BinKernel::Hard`] is the ordinary histogram.
//! [`BinKernel::Gaussian`] spreads each value over every bin with normalized
//! Gaussian weights around the bin centres, which makes the map smooth in
//! the pixel values.

use std::sync::{Arc, OnceLock};

use crate::autodiff::{CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::filters::reflect_index;
use crate::registry::Registry;
use crate::tensor::Tensor;

pub const ENTROPY_BINS: usize = 16;
/// Window of the map that gates discriminator features.
pub const QUALITY_WINDOW: usize = 7;
/// Windows of the multi-scale features compared by the quality loss.
pub const IQA_WINDOWS: [usize; 3] = [3, 7, 11];
/// Kernel bandwidth, in bins, wherever the map must carry gradient.
pub const IQA_BANDWIDTH: f64 = 1.0;

/// How a pixel value is assigned to histogram bins.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinKernel {
    Hard,
    /// Standard deviation in bin widths.
    Gaussian { bandwidth: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EntropySpec {
    pub window: usize,
    pub bins: usize,
    pub kernel: BinKernel,
    /// Divide by `log2(bins)` so the map lies in `[0, 1]`.
    pub normalize: bool,
}

impl EntropySpec {
    pub fn hard(window: usize, bins: usize) -> Self {
        EntropySpec {
            window,
            bins,
            kernel: BinKernel::Hard,
            normalize: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid(
                "entropy_map",
                format!("window must be odd and >= 3, got {}", self.window),
            ));
        }
        if self.bins < 2 {
            return Err(Error::invalid("entropy_map", format!("need at least 2 bins, got {}", self.bins)));
        }
        if let BinKernel::Gaussian { bandwidth } = self.kernel {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::invalid(
                    "entropy_map",
                    format!("kernel bandwidth must be positive, got {bandwidth}"),
                ));
            }
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        if self.normalize {
            1.0 / (self.bins as f64).log2()
        } else {
            1.0
        }
    }

    /// Bin weights of `v` and their derivatives, one entry per bin.
    fn membership(&self, v: f64, weight: &mut [f64], slope: &mut [f64]) {
        let b = self.bins as f64;
        match self.kernel {
            BinKernel::Hard => {
                weight.iter_mut().for_each(|x| *x = 0.0);
                slope.iter_mut().for_each(|x| *x = 0.0);
                let bin = ((v.clamp(0.0, 1.0) * b).floor() as usize).min(self.bins - 1);
                weight[bin] = 1.0;
            }
            BinKernel::Gaussian { bandwidth } => {
                let sigma = bandwidth / b;
                let inv = 1.0 / (sigma * sigma);
                let expo = |k: usize| {
                    let d = v - (k as f64 + 0.5) / b;
                    -0.5 * d * d * inv
                };
                let top = (0..self.bins).map(expo).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (k, wk) in weight.iter_mut().enumerate() {
                    *wk = (expo(k) - top).exp();
                    total += *wk;
                }
                let mut mean_g = 0.0;
                for (k, wk) in weight.iter_mut().enumerate() {
                    *wk /= total;
                    slope[k] = -(v - (k as f64 + 0.5) / b) * inv;
                    mean_g += *wk * slope[k];
                }
                for (wk, sk) in weight.iter().zip(slope.iter_mut()) {
                    *sk = wk * (*sk - mean_g);
                }
            }
        }
    }
}

fn reflected(len: usize, r: isize) -> Vec<usize> {
    (-r..len as isize + r).map(|i| reflect_index(i, len)).collect()
}

/// Windowed box sum with reflected borders.
fn box_sum(plane: &[f64], h: usize, w: usize, r: isize, out: &mut [f64], tmp: &mut [f64]) {
    let (cols, rows) = (reflected(w, r), reflected(h, r));
    let span = 2 * r as usize + 1;
    let mut line = vec![0.0; cols.len()];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for (l, &c) in line.iter_mut().zip(&cols) {
            *l = row[c];
        }
        for (x, t) in tmp[y * w..(y + 1) * w].iter_mut().enumerate() {
            *t = line[x..x + span].iter().sum();
        }
    }
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        dst.fill(0.0);
        for &src in &rows[y..y + span] {
            for (d, &v) in dst.iter_mut().zip(&tmp[src * w..(src + 1) * w]) {
                *d += v;
            }
        }
    }
}

/// Adjoint of [`box_sum`].
fn box_sum_adjoint(g: &[f64], h: usize, w: usize, r: isize, out: &mut [f64], tmp: &mut [f64]) {
    let (cols, rows) = (reflected(w, r), reflected(h, r));
    let span = 2 * r as usize + 1;
    tmp.fill(0.0);
    for y in 0..h {
        let src = &g[y * w..(y + 1) * w];
        for &dst in &rows[y..y + span] {
            for (d, &v) in tmp[dst * w..(dst + 1) * w].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut line = vec![0.0; cols.len()];
    for y in 0..h {
        line.fill(0.0);
        for (x, &gv) in tmp[y * w..(y + 1) * w].iter().enumerate() {
            for l in &mut line[x..x + span] {
                *l += gv;
            }
        }
        let dst = &mut out[y * w..(y + 1) * w];
        dst.fill(0.0);
        for (&c, &l) in cols.iter().zip(&line) {
            dst[c] += l;
        }
    }
}

/// Bin weights and their derivatives for every pixel, `[plane][bin][pixel]`.
struct Membership {
    weight: Vec<f64>,
    slope: Vec<f64>,
}

fn membership_planes(spec: &EntropySpec, x: &[f64], hw: usize) -> Membership {
    let b = spec.bins;
    let mut weight = vec![0.0; b * x.len()];
    let mut slope = vec![0.0; b * x.len()];
    let (mut wt, mut sl) = (vec![0.0; b], vec![0.0; b]);
    for (pi, plane) in x.chunks(hw).enumerate() {
        let base = pi * b * hw;
        for (i, &v) in plane.iter().enumerate() {
            spec.membership(v, &mut wt, &mut sl);
            for k in 0..b {
                weight[base + k * hw + i] = wt[k];
                slope[base + k * hw + i] = sl[k];
            }
        }
    }
    Membership { weight, slope }
}

/// Windowed bin probabilities `[bins, h, w]` of one plane.
fn probabilities(member: &[f64], bins: usize, window: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let r = (window / 2) as isize;
    let area = (window * window) as f64;
    let mut probs = vec![0.0; bins * hw];
    let mut tmp = vec![0.0; hw];
    for k in 0..bins {
        let src = &member[k * hw..(k + 1) * hw];
        if src.iter().all(|&v| v == 0.0) {
            continue;
        }
        box_sum(src, h, w, r, &mut probs[k * hw..(k + 1) * hw], &mut tmp);
    }
    // divide rather than scale so a full window gives exactly 1
    probs.iter_mut().for_each(|p| *p /= area);
    probs
}

fn entropy_of(probs: &[f64], bins: usize, scale: f64, out: &mut [f64]) {
    let hw = out.len();
    for (i, o) in out.iter_mut().enumerate() {
        let mut e = 0.0;
        for k in 0..bins {
            let p = probs[k * hw + i];
            if p > 0.0 {
                e -= p * p.ln();
            }
        }
        // entropy cannot be negative; clears -0.0 and rounding dust
        *o = (e * scale).max(0.0);
    }
}

/// Maps for each window in `windows`, stacked along the batch axis, plus
/// the probabilities the adjoint needs.
fn stacked_entropy(spec: &EntropySpec, windows: &[usize], x: &Tensor) -> Result<(Tensor, Membership, Vec<Vec<f64>>)> {
    for &window in windows {
        EntropySpec { window, ..*spec }.validate()?;
    }
    let [n, c, h, w] = x.dims4("entropy_map")?;
    let hw = h * w;
    let member = membership_planes(spec, x.data(), hw);
    let scale = spec.scale() / std::f64::consts::LN_2;
    let mut out = vec![0.0; windows.len() * x.numel()];
    let mut all_probs = Vec::with_capacity(windows.len());
    for (wi, &window) in windows.iter().enumerate() {
        let mut probs = Vec::with_capacity(spec.bins * x.numel());
        for pi in 0..n * c {
            let p = probabilities(&member.weight[pi * spec.bins * hw..][..spec.bins * hw], spec.bins, window, h, w);
            entropy_of(&p, spec.bins, scale, &mut out[(wi * n * c + pi) * hw..][..hw]);
            probs.extend_from_slice(&p);
        }
        all_probs.push(probs);
    }
    let value = Tensor::from_vec(vec![windows.len() * n, c, h, w], out)?;
    Ok((value, member, all_probs))
}

fn plain_entropy(spec: &EntropySpec, x: &Tensor) -> Result<Tensor> {
    Ok(stacked_entropy(spec, &[spec.window], x)?.0)
}

struct EntropyRule {
    spec: EntropySpec,
    windows: Vec<usize>,
    slope: Vec<f64>,
    probs: Vec<Vec<f64>>,
}

impl CustomBackward for EntropyRule {
    fn name(&self) -> &'static str {
        "entropy_map"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let spec = &self.spec;
        let x = inputs[0];
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        let hw = h * w;
        let planes = x.numel() / hw;
        let b = spec.bins;
        let scale = spec.scale() / std::f64::consts::LN_2;
        let mut gx = vec![0.0; x.numel()];
        let mut gk = vec![0.0; hw];
        let mut adj = vec![0.0; b * hw];
        let mut part = vec![0.0; hw];
        let mut tmp = vec![0.0; hw];
        for pi in 0..planes {
            adj.fill(0.0);
            for (wi, &window) in self.windows.iter().enumerate() {
                let r = (window / 2) as isize;
                let norm = 1.0 / (window * window) as f64;
                let gplane = &grad.data()[(wi * planes + pi) * hw..][..hw];
                let probs = &self.probs[wi][pi * b * hw..][..b * hw];
                for k in 0..b {
                    let mut any = false;
                    for i in 0..hw {
                        let p = probs[k * hw + i];
                        gk[i] = if p > 0.0 {
                            any = true;
                            -gplane[i] * (p.ln() + 1.0) * scale * norm
                        } else {
                            0.0
                        };
                    }
                    if any {
                        box_sum_adjoint(&gk, h, w, r, &mut part, &mut tmp);
                        for (a, &v) in adj[k * hw..(k + 1) * hw].iter_mut().zip(&part) {
                            *a += v;
                        }
                    }
                }
            }
            let slope = &self.slope[pi * b * hw..][..b * hw];
            for (i, out) in gx[pi * hw..(pi + 1) * hw].iter_mut().enumerate() {
                *out = (0..b).map(|k| slope[k * hw + i] * adj[k * hw + i]).sum();
            }
        }
        vec![Some(Tensor::from_vec(shape.to_vec(), gx).expect("shape preserved"))]
    }
}

/// Local entropy in bits, hard histogram.
pub fn entropy_map(x: &Tensor, window: usize, bins: usize) -> Result<QualityMap> {
    Ok(QualityMap {
        map: plain_entropy(&EntropySpec::hard(window, bins), x)?,
        window,
    })
}

pub fn entropy_map_with(x: &Tensor, spec: &EntropySpec) -> Result<Tensor> {
    plain_entropy(spec, x)
}

/// Differentiable entropy map; the hard histogram has zero
/// gradient almost everywhere.
pub fn entropy_map_var(tape: &mut Tape, x: Var, spec: EntropySpec) -> Result<Var> {
    entropy_maps_var(tape, x, spec, &[spec.window])
}

/// Maps of `[N, C, H, W]` at several windows as one `[windows * N, C, H, W]`
/// node, window-major; `spec.window` is ignored.
pub fn entropy_maps_var(tape: &mut Tape, x: Var, spec: EntropySpec, windows: &[usize]) -> Result<Var> {
    let (value, member, probs) = stacked_entropy(&spec, windows, tape.value(x))?;
    let rule = EntropyRule {
        spec,
        windows: windows.to_vec(),
        slope: member.slope,
        probs,
    };
    tape.custom(&[x], value, Box::new(rule))
}

/// Per-pixel quality map, non-negative.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityMap {
    pub map: Tensor,
    pub window: usize,
}

/// Source of the quality prior that gates discriminator features.
pub trait QualityBranch: Send + Sync {
    fn name(&self) -> &'static str;

    /// `[N, 1, H, W]` map for a `[N, 1, H, W]` image batch.
    fn quality_map(&self, x: &Tensor) -> Result<QualityMap>;

    /// Upper bound of the map, used to normalize pooled statistics.
    fn ceiling(&self) -> f64;
}

pub struct EntropyBranch {
    pub spec: EntropySpec,
}

impl QualityBranch for EntropyBranch {
    fn name(&self) -> &'static str {
        if self.spec.kernel != BinKernel::Hard {
            "soft-entropy"
        } else {
            "entropy"
        }
    }

    fn quality_map(&self, x: &Tensor) -> Result<QualityMap> {
        Ok(QualityMap {
            map: plain_entropy(&self.spec, x)?,
            window: self.spec.window,
        })
    }

    fn ceiling(&self) -> f64 {
        if self.spec.normalize {
            1.0
        } else {
            (self.spec.bins as f64).log2()
        }
    }
}

pub fn registry() -> &'static Registry<dyn QualityBranch> {
    static REG: OnceLock<Registry<dyn QualityBranch>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn QualityBranch> = Registry::new("quality branch");
        r.register(
            "entropy",
            Arc::new(EntropyBranch {
                spec: EntropySpec::hard(QUALITY_WINDOW, ENTROPY_BINS),
            }),
        );
        r.register(
            "soft-entropy",
            Arc::new(EntropyBranch {
                spec: EntropySpec {
                    kernel: BinKernel::Gaussian {
                        bandwidth: IQA_BANDWIDTH,
                    },
                    ..EntropySpec::hard(QUALITY_WINDOW, ENTROPY_BINS)
                },
            }),
        );
        r
    })
}

pub fn branch(name: &str) -> Result<Arc<dyn QualityBranch>> {
    registry().get(name)
}

fn iqa_spec(window: usize) -> EntropySpec {
    EntropySpec {
        window,
        bins: ENTROPY_BINS,
        kernel: BinKernel::Gaussian {
            bandwidth: IQA_BANDWIDTH,
        },
        normalize: true,
    }
}

/// Normalized entropy maps at every window of [`IQA_WINDOWS`].
pub fn iqa_features(x: &Tensor) -> Result<Vec<Tensor>> {
    IQA_WINDOWS.iter().map(|&w| plain_entropy(&iqa_spec(w), x)).collect()
}

/// [`iqa_features`] as one tape node, maps stacked along the batch axis.
pub fn iqa_features_var(tape: &mut Tape, x: Var) -> Result<Var> {
    entropy_maps_var(tape, x, iqa_spec(IQA_WINDOWS[0]), &IQA_WINDOWS)
}

/// Average-pool `[N, C, H, W]` by `factor` in both directions.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("avg_pool")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "avg_pool",
            format!("{h}x{w} is not divisible by pooling factor {factor}"),
        ));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![0.0; n * c * ho * wo];
    let norm = 1.0 / (factor * factor) as f64;
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        for y in 0..h {
            for xx in 0..w {
                out[p * ho * wo + (y / factor) * wo + xx / factor] += plane[y * w + xx] * norm;
            }
        }
    }
    Tensor::from_vec(vec![n, c, ho, wo], out)
}
