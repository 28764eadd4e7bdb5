//! Central finite-difference gradient probes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct Probe {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(REL_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(Probe::rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compare `backward` against central differences on `probe_count` random
/// elements of each input. `f` must build a scalar from the given leaves.
pub fn grad_check<F>(f: F, inputs: &[Tensor], probe_count: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for (k, (t, v)) in inputs.iter().zip(&vars).enumerate() {
        let zero = Tensor::zeros(t.shape().to_vec());
        let analytic = tape.grad(*v).unwrap_or(&zero);
        let chosen = sample(&mut rng, t.numel(), probe_count.min(t.numel()));
        for idx in chosen.iter() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= FD_STEP;
            let numeric = (eval(&f, &plus)? - eval(&f, &minus)?) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!("finite difference of input {k}")));
            }
            probes.push(Probe {
                input: k,
                index: idx,
                analytic: analytic.data()[idx],
                numeric,
            });
        }
    }
    Ok(GradCheckReport { probes })
}
