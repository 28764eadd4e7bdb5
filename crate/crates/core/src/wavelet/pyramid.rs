use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::family::WaveletFamily;
use super::transform::{dwt2, dwt2_var, idwt2, Band, Subbands};

/// Detail subbands of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct Details {
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl Details {
    pub fn band(&self, b: Band) -> Option<&Tensor> {
        match b {
            Band::LH => Some(&self.lh),
            Band::HL => Some(&self.hl),
            Band::HH => Some(&self.hh),
            Band::LL => None,
        }
    }
}

/// Multi-level decomposition: `details[j-1]` holds level `j`, `approx` is `LL_J`.
#[derive(Clone)]
pub struct WaveletPyramid {
    pub family: Arc<dyn WaveletFamily>,
    pub details: Vec<Details>,
    pub approx: Tensor,
}

impl std::fmt::Debug for WaveletPyramid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WaveletPyramid")
            .field("family", &self.family.name())
            .field("levels", &self.details.len())
            .field("approx", &self.approx)
            .finish()
    }
}

pub(crate) fn check_divisible(shape: &[usize], levels: usize, op: &'static str) -> Result<()> {
    let m = 1usize << levels;
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if levels == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            op,
            format!("extents {h}x{w} must be divisible by 2^{levels} = {m} (and levels >= 1)"),
        ));
    }
    Ok(())
}

impl WaveletPyramid {
    pub fn decompose(x: &Tensor, levels: usize, family: Arc<dyn WaveletFamily>) -> Result<Self> {
        x.dims4("pyramid")?;
        check_divisible(x.shape(), levels, "pyramid")?;
        let mut details = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for _ in 0..levels {
            let Subbands { ll, lh, hl, hh } = dwt2(&cur, &*family)?;
            details.push(Details { lh, hl, hh });
            cur = ll;
        }
        Ok(WaveletPyramid {
            family,
            details,
            approx: cur,
        })
    }

    pub fn levels(&self) -> usize {
        self.details.len()
    }

    pub fn reconstruct(&self) -> Result<Tensor> {
        let mut cur = self.approx.clone();
        for d in self.details.iter().rev() {
            cur = idwt2(
                &Subbands {
                    ll: cur,
                    lh: d.lh.clone(),
                    hl: d.hl.clone(),
                    hh: d.hh.clone(),
                },
                &*self.family,
            )?;
        }
        Ok(cur)
    }

    /// Every coefficient block as `(level, band, tensor)`: detail bands for
    /// levels `1..=J`, then `LL_J`.
    pub fn bands(&self) -> Vec<(usize, Band, &Tensor)> {
        let mut out = Vec::with_capacity(3 * self.levels() + 1);
        for (j, d) in self.details.iter().enumerate() {
            for b in Band::DETAIL {
                out.push((j + 1, b, d.band(b).expect("detail band")));
            }
        }
        out.push((self.levels(), Band::LL, &self.approx));
        out
    }

    pub fn coefficient_count(&self) -> usize {
        self.bands().iter().map(|(_, _, t)| t.numel()).sum()
    }
}

/// Differentiable pyramid, bands in the same order as [`WaveletPyramid::bands`].
pub fn pyramid_vars(
    tape: &mut Tape,
    x: Var,
    levels: usize,
    family: &Arc<dyn WaveletFamily>,
) -> Result<Vec<(usize, Band, Var)>> {
    tape.value(x).dims4("pyramid")?;
    check_divisible(tape.shape(x), levels, "pyramid")?;
    let mut out = Vec::with_capacity(3 * levels + 1);
    let mut cur = x;
    for j in 1..=levels {
        let c = tape.shape(cur)[1];
        let packed = dwt2_var(tape, cur, family)?;
        for b in Band::DETAIL {
            out.push((j, b, tape.narrow(packed, 1, b.index() * c, c)?));
        }
        cur = tape.narrow(packed, 1, 0, c)?;
    }
    out.push((levels, Band::LL, cur));
    Ok(out)
}
