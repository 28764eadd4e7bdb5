//! Image fidelity metrics: PSNR, SSIM, radial power spectra, the
//! high-frequency retention ratio and wavelet-domain MAE.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::filters::reflect_index;
use crate::tensor::Tensor;
use crate::wavelet::{WaveletFamily, WaveletPyramid};

pub const DEFAULT_HFRR_CUTOFF: f64 = 0.25;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(estimate: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    estimate.expect_same_shape(reference, "psnr")?;
    let mse = estimate
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / estimate.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean SSIM over all `8x8` sliding windows (stride 1) of every plane.
pub fn ssim(a: &Tensor, b: &Tensor, data_range: f64) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let [_, _, h, w] = a.dims4("ssim")?;
    let win = SSIM_WINDOW.min(h).min(w);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let np = (win * win) as f64;
    let unbias = if np > 1.0 { np / (np - 1.0) } else { 1.0 };
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let (u, v) = (pa[y * w + x], pb[y * w + x]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / np, sb / np);
                let va = (saa / np - ma * ma) * unbias;
                let vb = (sbb / np - mb * mb) * unbias;
                let cov = (sab / np - ma * mb) * unbias;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean power in annuli of constant radial frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    /// Bin centres in cycles/pixel, `0..=0.5`.
    pub rho: Vec<f64>,
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
    /// Sum of power over every frequency, corners included; equals the
    /// mean per-plane image energy.
    pub total_power: f64,
}

impl RadialSpectrum {
    /// Summed bin power strictly above `cutoff`.
    pub fn power_above(&self, cutoff: f64) -> f64 {
        self.rho
            .iter()
            .zip(&self.power)
            .filter(|(r, _)| **r > cutoff)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn total_binned(&self) -> f64 {
        self.power
            .iter()
            .zip(&self.counts)
            .map(|(p, c)| p * *c as f64)
            .sum()
    }
}

fn reflect_to_square(plane: &[f64], h: usize, w: usize, side: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = reflect_index(y as isize, h);
        for x in 0..side {
            out.push(plane[sy * w + reflect_index(x as isize, w)]);
        }
    }
    out
}

/// Side of the square power-of-two grid an `h x w` image is analysed on.
pub fn spectrum_side(h: usize, w: usize) -> usize {
    h.max(w).next_power_of_two()
}

/// Power spectrum of every plane of `x`, averaged over planes. Inputs that
/// are not square powers of two are reflection-padded first. `n_bins`
/// defaults to `side / 2 + 1` (unit-index annuli).
pub fn radial_spectrum(x: &Tensor, n_bins: Option<usize>) -> Result<RadialSpectrum> {
    let [_, _, h, w] = x.dims4("radial_spectrum")?;
    let side = spectrum_side(h, w);
    let n_bins = n_bins.unwrap_or(side / 2 + 1);
    if n_bins < 2 {
        return Err(Error::invalid("radial_spectrum", "need at least 2 bins"));
    }
    let delta = 0.5 / (n_bins - 1) as f64;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(side);
    let freq = |k: usize| -> f64 {
        let k = k as f64;
        let n = side as f64;
        if k <= n / 2.0 {
            k / n
        } else {
            (k - n) / n
        }
    };
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    let mut total = 0.0;
    let planes = x.numel() / (h * w);
    let norm = (side * side) as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); side * side];
    let mut col = vec![Complex::new(0.0, 0.0); side];
    for (pi, plane) in x.data().chunks(h * w).enumerate() {
        let padded = if h == side && w == side {
            plane.to_vec()
        } else {
            reflect_to_square(plane, h, w, side)
        };
        for (c, v) in buf.iter_mut().zip(&padded) {
            *c = Complex::new(*v, 0.0);
        }
        for row in buf.chunks_mut(side) {
            fft.process(row);
        }
        for xx in 0..side {
            for y in 0..side {
                col[y] = buf[y * side + xx];
            }
            fft.process(&mut col);
            for y in 0..side {
                buf[y * side + xx] = col[y];
            }
        }
        for ky in 0..side {
            for kx in 0..side {
                let p = buf[ky * side + kx].norm_sqr() / norm;
                total += p;
                let rho = (freq(ky).powi(2) + freq(kx).powi(2)).sqrt();
                let bin = (rho / delta).round() as usize;
                if bin < n_bins {
                    sums[bin] += p;
                    if pi == 0 {
                        counts[bin] += 1;
                    }
                }
            }
        }
    }
    let power = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| if *c == 0 { 0.0 } else { s / (*c * planes) as f64 })
        .collect();
    Ok(RadialSpectrum {
        rho: (0..n_bins).map(|i| i as f64 * delta).collect(),
        power,
        counts,
        total_power: total / planes as f64,
    })
}

/// High-frequency retention ratio: radially averaged power above `cutoff`
/// in the estimate over the same quantity in the reference. 1 is ideal,
/// below 1 means lost detail, above 1 means residual noise.
pub fn hfrr(estimate: &Tensor, reference: &Tensor, cutoff: f64) -> Result<f64> {
    estimate.expect_same_shape(reference, "hfrr")?;
    let pe = radial_spectrum(estimate, None)?.power_above(cutoff);
    let pr = radial_spectrum(reference, None)?.power_above(cutoff);
    if pr <= 0.0 {
        return Err(Error::Degenerate(format!(
            "reference has no spectral energy above {cutoff} cycles/pixel"
        )));
    }
    Ok(pe / pr)
}

/// Mean absolute difference over every coefficient of a `levels`-deep pyramid.
pub fn wavelet_mae(
    estimate: &Tensor,
    reference: &Tensor,
    levels: usize,
    family: Arc<dyn WaveletFamily>,
) -> Result<f64> {
    estimate.expect_same_shape(reference, "wavelet_mae")?;
    let pe = WaveletPyramid::decompose(estimate, levels, family.clone())?;
    let pr = WaveletPyramid::decompose(reference, levels, family)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((_, _, a), (_, _, b)) in pe.bands().into_iter().zip(pr.bands()) {
        sum += a.data().iter().zip(b.data()).map(|(u, v)| (u - v).abs()).sum::<f64>();
        n += a.numel();
    }
    Ok(sum / n as f64)
}

/// One evaluated image under one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub image_id: String,
    pub method: String,
    pub noise_level: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hfrr: f64,
    pub wavelet_mae: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub images: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub hfrr: f64,
    pub wavelet_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub hfrr_cutoff: f64,
}

impl MetricsReport {
    pub fn new(hfrr_cutoff: f64) -> Self {
        MetricsReport {
            rows: Vec::new(),
            hfrr_cutoff,
        }
    }

    /// Per-method means in first-appearance order. Infinite PSNR values
    /// (exact reconstructions) are excluded from the PSNR mean.
    pub fn summary(&self) -> Vec<MethodSummary> {
        let mut methods: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !methods.contains(&r.method.as_str()) {
                methods.push(&r.method);
            }
        }
        methods
            .into_iter()
            .map(|m| {
                let rows: Vec<&MetricsRow> = self.rows.iter().filter(|r| r.method == m).collect();
                let mean = |f: &dyn Fn(&MetricsRow) -> f64| {
                    let vals: Vec<f64> = rows.iter().map(|r| f(r)).filter(|v| v.is_finite()).collect();
                    if vals.is_empty() {
                        f64::INFINITY
                    } else {
                        vals.iter().sum::<f64>() / vals.len() as f64
                    }
                };
                MethodSummary {
                    method: m.to_string(),
                    images: rows.len(),
                    psnr_db: mean(&|r| r.psnr_db),
                    ssim: mean(&|r| r.ssim),
                    hfrr: mean(&|r| r.hfrr),
                    wavelet_mae: mean(&|r| r.wavelet_mae),
                }
            })
            .collect()
    }

    pub fn method(&self, name: &str) -> Option<MethodSummary> {
        self.summary().into_iter().find(|s| s.method == name)
    }
}
