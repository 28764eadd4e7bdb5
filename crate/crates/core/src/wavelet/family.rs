use std::sync::{Arc, OnceLock};

use crate::error::Result;
use crate::registry::Registry;

/// An orthonormal two-channel filter bank.
pub trait WaveletFamily: Send + Sync {
    fn name(&self) -> &'static str;

    /// Analysis low-pass filter; unit norm, sums to sqrt(2).
    fn lowpass(&self) -> &[f64];

    /// Quadrature mirror of the low-pass: `g[k] = (-1)^k h[L-1-k]`.
    fn highpass(&self) -> Vec<f64> {
        let h = self.lowpass();
        let l = h.len();
        (0..l)
            .map(|k| if k % 2 == 0 { h[l - 1 - k] } else { -h[l - 1 - k] })
            .collect()
    }
}

pub struct Haar {
    taps: [f64; 2],
}

impl Default for Haar {
    fn default() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Haar { taps: [s, s] }
    }
}

impl WaveletFamily for Haar {
    fn name(&self) -> &'static str {
        "haar"
    }

    fn lowpass(&self) -> &[f64] {
        &self.taps
    }
}

/// Daubechies wavelet with two vanishing moments.
pub struct Daubechies2 {
    taps: [f64; 4],
}

impl Default for Daubechies2 {
    fn default() -> Self {
        let r3 = 3f64.sqrt();
        let d = 4.0 * 2f64.sqrt();
        Daubechies2 {
            taps: [(1.0 + r3) / d, (3.0 + r3) / d, (3.0 - r3) / d, (1.0 - r3) / d],
        }
    }
}

impl WaveletFamily for Daubechies2 {
    fn name(&self) -> &'static str {
        "db2"
    }

    fn lowpass(&self) -> &[f64] {
        &self.taps
    }
}

pub fn registry() -> &'static Registry<dyn WaveletFamily> {
    static REG: OnceLock<Registry<dyn WaveletFamily>> = OnceLock::new();
    REG.get_or_init(|| {
        let mut r: Registry<dyn WaveletFamily> = Registry::new("wavelet family");
        r.register("haar", Arc::new(Haar::default()));
        r.register("db2", Arc::new(Daubechies2::default()));
        r
    })
}

pub fn family(name: &str) -> Result<Arc<dyn WaveletFamily>> {
    registry().get(name)
}
