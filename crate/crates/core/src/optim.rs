//! Bias-corrected Adam over named parameter maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.5;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPS,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient are left untouched
    /// but still count toward the shared step.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            p.expect_same_shape(g, "adam_step")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn map(t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("p".to_string(), t)])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = map(Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = params.clone();
        let mut adam = AdamState::new(0.1);
        for _ in 0..5 {
            adam.step(&mut params, &map(Tensor::zeros(vec![3]))).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_closed_form() {
        let mut params = map(Tensor::scalar(0.0));
        let mut adam = AdamState::new(0.1);
        adam.step(&mut params, &map(Tensor::scalar(1.0))).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + DEFAULT_EPS));
        assert!((params["p"].item() - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = map(Tensor::zeros(vec![2]));
        let mut adam = AdamState::new(0.1);
        assert!(adam.step(&mut params, &map(Tensor::zeros(vec![3]))).is_err());
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn hundred_steps_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut params = map(Tensor::randn(vec![10], 1.0, &mut rng));
            let mut adam = AdamState::new(1e-2);
            for _ in 0..100 {
                let g = params["p"].map(|v| 2.0 * v + 0.1);
                adam.step(&mut params, &map(g)).unwrap();
            }
            params["p"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
