//! Wavelet-domain convolution and the grouped residual block built on it.

use std::sync::Arc;

use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::family::WaveletFamily;
use super::transform::{dwt2_var, idwt2_var, Band};

/// Subband kernels for one channel group, each `[Cg, Cg, k, k]`, in
/// `LL, LH, HL, HH` order.
#[derive(Clone, Debug, PartialEq)]
pub struct WTCKernel {
    pub group: usize,
    pub kernels: [Tensor; 4],
}

impl WTCKernel {
    pub fn new(group: usize, kernels: [Tensor; 4]) -> Result<Self> {
        let s = kernels[0].shape().to_vec();
        if s.len() != 4 || s[0] != s[1] || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::shape(
                "wtc_kernel",
                format!("kernels must be [Cg,Cg,k,k] with odd k, got {s:?}"),
            ));
        }
        if kernels.iter().any(|k| k.shape() != s.as_slice()) {
            return Err(Error::shape(
                "wtc_kernel",
                "all four subband kernels must share shape",
            ));
        }
        Ok(WTCKernel { group, kernels })
    }

    /// Per-channel identity taps in every subband.
    pub fn identity(group: usize, channels: usize, size: usize) -> Self {
        let mut k = Tensor::zeros(vec![channels, channels, size, size]);
        for c in 0..channels {
            k.data_mut()[((c * channels + c) * size + size / 2) * size + size / 2] = 1.0;
        }
        WTCKernel {
            group,
            kernels: [k.clone(), k.clone(), k.clone(), k],
        }
    }

    pub fn zeros(group: usize, channels: usize, size: usize) -> Self {
        let k = Tensor::zeros(vec![channels, channels, size, size]);
        WTCKernel {
            group,
            kernels: [k.clone(), k.clone(), k.clone(), k],
        }
    }

    pub fn band(&self, b: Band) -> &Tensor {
        &self.kernels[b.index()]
    }

    /// Group `g`'s slice of block-level band weights `[C, C/G, k, k]`.
    pub fn from_block(band_weights: [&Tensor; 4], groups: usize, group: usize) -> Result<Self> {
        let kernels = band_weights.map(|w| {
            let s = w.shape();
            let cg = s[0] / groups;
            let per = w.numel() / s[0];
            let data = w.data()[group * cg * per..(group + 1) * cg * per].to_vec();
            Tensor::from_vec(vec![cg, s[1], s[2], s[3]], data)
        });
        let [a, b, c, d] = kernels;
        WTCKernel::new(group, [a?, b?, c?, d?])
    }
}

/// Transform, convolve each subband with its own kernel (same padding,
/// stride 1), inverse transform. `band_weights` are `[C, C/groups, k, k]`
/// in `LL, LH, HL, HH` order; groups are independent.
pub fn wtc_apply(
    tape: &mut Tape,
    x: Var,
    band_weights: [Var; 4],
    groups: usize,
    family: &Arc<dyn WaveletFamily>,
) -> Result<Var> {
    let [_, c, _, _] = tape.value(x).dims4("wtc_apply")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "wtc_apply",
            format!("C={c} is not divisible by G={groups}"),
        ));
    }
    let k = tape.shape(band_weights[0])[2];
    let packed = dwt2_var(tape, x, family)?;
    let weight = tape.concat(&band_weights, 0)?;
    // band-major packing keeps group (band, g) contiguous, so 4G groups
    // give every subband of every group its own kernel
    let conv = tape.conv2d(packed, weight, None, 1, k / 2, 4 * groups)?;
    idwt2_var(tape, conv, family)
}

/// [`wtc_apply`] for a single group with concrete kernels.
pub fn wtc_apply_kernel(
    tape: &mut Tape,
    x_g: Var,
    kernel: &WTCKernel,
    family: &Arc<dyn WaveletFamily>,
) -> Result<Var> {
    let w = [
        tape.constant(kernel.kernels[0].clone())?,
        tape.constant(kernel.kernels[1].clone())?,
        tape.constant(kernel.kernels[2].clone())?,
        tape.constant(kernel.kernels[3].clone())?,
    ];
    wtc_apply(tape, x_g, w, 1, family)
}

#[derive(Clone, Copy, Debug)]
pub struct WcgWeights {
    pub bands: [Var; 4],
    pub gamma: Var,
    pub beta: Var,
}

/// `y = x + concat_g WTC_g(BN(x)_g)`.
///
/// The per-group outputs are joined along channels; batch norm is
/// per-channel, so normalizing before the split equals normalizing each group.
pub fn wcg_block(
    tape: &mut Tape,
    x: Var,
    groups: usize,
    weights: &WcgWeights,
    running: &mut RunningStats,
    training: bool,
    family: &Arc<dyn WaveletFamily>,
) -> Result<Var> {
    let [_, c, _, _] = tape.value(x).dims4("wcg_block")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(
            "wcg_block",
            format!("C={c} is not divisible by G={groups}"),
        ));
    }
    let normed = tape.batch_norm(x, weights.gamma, weights.beta, running, training)?;
    let branch = wtc_apply(tape, normed, weights.bands, groups, family)?;
    tape.add(x, branch)
}
