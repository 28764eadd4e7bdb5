//! Named parameter collections and initializers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;

/// He-normal convolution weight `[cout, cin_per_group, k, k]`.
pub fn he_conv<R: Rng + ?Sized>(cout: usize, cin_per_group: usize, k: usize, rng: &mut R) -> Tensor {
    let fan_in = (cin_per_group * k * k) as f64;
    Tensor::randn(vec![cout, cin_per_group, k, k], (2.0 / fan_in).sqrt(), rng)
}

pub fn insert(params: &mut ParamMap, name: impl Into<String>, t: Tensor) {
    let name = name.into();
    let prev = params.insert(name.clone(), t);
    debug_assert!(prev.is_none(), "duplicate parameter {name}");
}

pub fn count(params: &ParamMap) -> usize {
    params.values().map(Tensor::numel).sum()
}

pub fn ensure_finite(params: &ParamMap, what: &str) -> Result<()> {
    for (k, v) in params {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{what} parameter {k}")));
        }
    }
    Ok(())
}
