//! Small spatial filters shared by the baseline and the test oracles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index into `0..len` with half-sample symmetric reflection.
pub fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of every plane with reflected borders.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4("gaussian_blur")?;
    if sigma <= 0.0 {
        return Err(Error::invalid("gaussian_blur", format!("sigma must be positive, got {sigma}")));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut out = x.clone();
    let mut tmp = vec![0.0; h * w];
    for plane in out.data_mut().chunks_mut(h * w) {
        for y in 0..h {
            for xx in 0..w {
                tmp[y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[y * w + reflect_index(xx as isize + t as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for xx in 0..w {
                plane[y * w + xx] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * tmp[reflect_index(y as isize + t as isize - r, h) * w + xx])
                    .sum();
            }
        }
    }
    Ok(out)
}
