use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::grad_check;
use crate::autodiff::{RunningStats, Tape};
use crate::tensor::Tensor;

fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn fam(name: &str) -> Arc<dyn WaveletFamily> {
    family(name).unwrap()
}

#[test]
fn constant_image_haar() {
    let x = Tensor::full(vec![1, 1, 8, 8], 0.3);
    let s = dwt2(&x, &Haar::default()).unwrap();
    assert!(s.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    for b in Band::DETAIL {
        assert!(s.band(b).data().iter().all(|&v| v.abs() < 1e-15));
    }
}

#[test]
fn two_by_two_haar_patch() {
    let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = dwt2(&x, &Haar::default()).unwrap();
    assert!((s.ll.item() - 5.0).abs() < 1e-14);
    // within-row difference, between-row difference, diagonal
    assert!((s.lh.item() + 1.0).abs() < 1e-14);
    assert!((s.hl.item() + 2.0).abs() < 1e-14);
    assert!(s.hh.item().abs() < 1e-14);
}

#[test]
fn parseval_and_round_trip() {
    for name in ["haar", "db2"] {
        let f = fam(name);
        let x = uniform(&[1, 1, 64, 64], 1);
        let s = dwt2(&x, &*f).unwrap();
        assert!((s.energy() - x.sum_sq()).abs() / x.sum_sq() < 1e-10, "{name}");
        let y = uniform(&[2, 3, 32, 32], 2);
        let r = idwt2(&dwt2(&y, &*f).unwrap(), &*f).unwrap();
        assert!(r.max_abs_diff(&y) < 1e-10, "{name}");
    }
}

#[test]
fn zero_subbands_give_zero_image() {
    let z = Tensor::zeros(vec![1, 2, 4, 4]);
    let s = Subbands {
        ll: z.clone(),
        lh: z.clone(),
        hl: z.clone(),
        hh: z,
    };
    let r = idwt2(&s, &Daubechies2::default()).unwrap();
    assert_eq!(r.shape(), &[1, 2, 8, 8]);
    assert!(r.data().iter().all(|&v| v == 0.0));
}

#[test]
fn odd_extents_rejected_with_padding_hint() {
    let err = dwt2(&Tensor::zeros(vec![1, 1, 5, 4]), &Haar::default()).unwrap_err();
    assert!(err.to_string().contains("pad"), "{err}");
    let mismatched = Subbands {
        ll: Tensor::zeros(vec![1, 1, 2, 2]),
        lh: Tensor::zeros(vec![1, 1, 2, 3]),
        hl: Tensor::zeros(vec![1, 1, 2, 2]),
        hh: Tensor::zeros(vec![1, 1, 2, 2]),
    };
    assert!(idwt2(&mismatched, &Haar::default()).is_err());
}

#[test]
fn pad_reflect_extends_symmetrically() {
    let x = Tensor::from_vec(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let p = pad_reflect(&x, 4).unwrap();
    assert_eq!(p.shape(), &[1, 1, 4, 4]);
    assert_eq!(&p.data()[..4], &[1.0, 2.0, 3.0, 3.0]);
    assert_eq!(&p.data()[4..8], &[1.0, 2.0, 3.0, 3.0]);
}

#[test]
fn pyramid_examples() {
    let f = fam("haar");
    let x = uniform(&[1, 1, 16, 16], 3);
    let p = WaveletPyramid::decompose(&x, 1, f.clone()).unwrap();
    let s = dwt2(&x, &*f).unwrap();
    assert_eq!(p.approx, s.ll);
    assert_eq!(p.details[0].lh, s.lh);

    let c = Tensor::full(vec![1, 1, 8, 8], 0.25);
    let p = WaveletPyramid::decompose(&c, 2, f.clone()).unwrap();
    assert!(p.approx.data().iter().all(|&v| (v - 1.0).abs() < 1e-14));
    assert_eq!(p.bands().len(), 7);
    for (_, b, t) in p.bands() {
        if b != Band::LL {
            assert!(t.data().iter().all(|&v| v.abs() < 1e-14));
        }
    }

    for name in ["haar", "db2"] {
        let x = uniform(&[1, 1, 64, 64], 4);
        let p = WaveletPyramid::decompose(&x, 3, fam(name)).unwrap();
        assert_eq!(p.coefficient_count(), 64 * 64);
        assert!(p.reconstruct().unwrap().max_abs_diff(&x) < 1e-9, "{name}");
    }
    let err = WaveletPyramid::decompose(&uniform(&[1, 1, 12, 12], 5), 3, f).unwrap_err();
    assert!(err.to_string().contains("2^3"));
}

#[test]
fn pyramid_vars_match_tensor_pyramid() {
    let f = fam("db2");
    let x = uniform(&[2, 1, 16, 16], 6);
    let p = WaveletPyramid::decompose(&x, 2, f.clone()).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let vars = pyramid_vars(&mut tape, xv, 2, &f).unwrap();
    for ((j, b, v), (j2, b2, t)) in vars.iter().zip(p.bands()) {
        assert_eq!((*j, *b), (j2, b2));
        assert!(tape.value(*v).max_abs_diff(t) < 1e-14);
    }
}

fn wtc_once(x: &Tensor, k: &WTCKernel, f: &Arc<dyn WaveletFamily>) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let y = wtc_apply_kernel(&mut tape, xv, k, f).unwrap();
    tape.value(y).clone()
}

#[test]
fn wtc_identity_and_ll_only() {
    for name in ["haar", "db2"] {
        let f = fam(name);
        let x = uniform(&[2, 3, 16, 16], 7);
        let y = wtc_once(&x, &WTCKernel::identity(0, 3, 3), &f);
        assert!(y.max_abs_diff(&x) < 1e-12, "{name}");

        let mut k = WTCKernel::zeros(0, 3, 3);
        k.kernels[0] = WTCKernel::identity(0, 3, 3).kernels[0].clone();
        let y = wtc_once(&x, &k, &f);
        let s = dwt2(&x, &*f).unwrap();
        let zero = Tensor::zeros(s.ll.shape().to_vec());
        let ll_only = idwt2(
            &Subbands {
                ll: s.ll.clone(),
                lh: zero.clone(),
                hl: zero.clone(),
                hh: zero,
            },
            &*f,
        )
        .unwrap();
        assert!(y.max_abs_diff(&ll_only) < 1e-12, "{name}");
    }
}

#[test]
fn wtc_gradient_check() {
    let f = fam("db2");
    let report = grad_check(
        |t, v| {
            let y = wtc_apply(t, v[0], [v[1], v[2], v[3], v[4]], 2, &f)?;
            let r = t.constant(uniform(t.shape(y), 8))?;
            let p = t.mul(y, r)?;
            t.sum(p)
        },
        &[
            uniform(&[2, 4, 8, 8], 9),
            uniform(&[4, 2, 3, 3], 10),
            uniform(&[4, 2, 3, 3], 11),
            uniform(&[4, 2, 3, 3], 12),
            uniform(&[4, 2, 3, 3], 13),
        ],
        6,
        1,
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{:?}", report.worst());
}

struct BlockParams {
    bands: [Tensor; 4],
    gamma: Tensor,
    beta: Tensor,
}

fn block_params(c: usize, g: usize, seed: u64) -> BlockParams {
    BlockParams {
        bands: [0, 1, 2, 3].map(|k| uniform(&[c, c / g, 3, 3], seed + k)),
        gamma: uniform(&[c], seed + 10),
        beta: uniform(&[c], seed + 11),
    }
}

fn run_block(x: &Tensor, p: &BlockParams, groups: usize) -> Tensor {
    let f = fam("haar");
    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let w = WcgWeights {
        bands: [0, 1, 2, 3].map(|k| t.constant(p.bands[k].clone()).unwrap()),
        gamma: t.constant(p.gamma.clone()).unwrap(),
        beta: t.constant(p.beta.clone()).unwrap(),
    };
    let mut rs = RunningStats::new(x.shape()[1]);
    let y = wcg_block(&mut t, xv, groups, &w, &mut rs, true, &f).unwrap();
    t.value(y).clone()
}

#[test]
fn wcg_zero_kernels_pass_through() {
    let x = uniform(&[2, 4, 8, 8], 20);
    let mut p = block_params(4, 2, 21);
    p.bands = [0, 1, 2, 3].map(|_| Tensor::zeros(vec![4, 2, 3, 3]));
    assert_eq!(run_block(&x, &p, 2), x);
}

#[test]
fn wcg_single_group_matches_ungrouped_path() {
    let f = fam("haar");
    let x = uniform(&[2, 3, 8, 8], 22);
    let p = block_params(3, 1, 23);
    let got = run_block(&x, &p, 1);

    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let g = t.constant(p.gamma.clone()).unwrap();
    let b = t.constant(p.beta.clone()).unwrap();
    let mut rs = RunningStats::new(3);
    let n = t.batch_norm(xv, g, b, &mut rs, true).unwrap();
    let k = WTCKernel::from_block([&p.bands[0], &p.bands[1], &p.bands[2], &p.bands[3]], 1, 0).unwrap();
    let w = wtc_apply_kernel(&mut t, n, &k, &f).unwrap();
    let y = t.add(xv, w).unwrap();
    assert!(t.value(y).max_abs_diff(&got) < 1e-12);
}

#[test]
fn wcg_two_groups_equal_two_half_channel_paths() {
    let f = fam("haar");
    let x = uniform(&[2, 4, 8, 8], 24);
    let p = block_params(4, 2, 25);
    let got = run_block(&x, &p, 2);

    let mut t = Tape::new();
    let xv = t.constant(x.clone()).unwrap();
    let mut halves = Vec::new();
    for grp in 0..2 {
        let xg = t.narrow(xv, 1, 2 * grp, 2).unwrap();
        let gamma = Tensor::from_vec(vec![2], p.gamma.data()[2 * grp..2 * grp + 2].to_vec()).unwrap();
        let beta = Tensor::from_vec(vec![2], p.beta.data()[2 * grp..2 * grp + 2].to_vec()).unwrap();
        let (g, b) = (t.constant(gamma).unwrap(), t.constant(beta).unwrap());
        let mut rs = RunningStats::new(2);
        let n = t.batch_norm(xg, g, b, &mut rs, true).unwrap();
        let k = WTCKernel::from_block([&p.bands[0], &p.bands[1], &p.bands[2], &p.bands[3]], 2, grp).unwrap();
        halves.push(wtc_apply_kernel(&mut t, n, &k, &f).unwrap());
    }
    let cat = t.concat(&halves, 1).unwrap();
    let y = t.add(xv, cat).unwrap();
    assert!(t.value(y).max_abs_diff(&got) < 1e-12);
}

#[test]
fn wcg_rejects_indivisible_channels() {
    let f = fam("haar");
    let mut t = Tape::new();
    let x = t.constant(uniform(&[1, 3, 8, 8], 26)).unwrap();
    let w = WcgWeights {
        bands: [0, 1, 2, 3].map(|_| t.constant(Tensor::zeros(vec![3, 1, 3, 3])).unwrap()),
        gamma: t.constant(Tensor::ones(vec![3])).unwrap(),
        beta: t.constant(Tensor::zeros(vec![3])).unwrap(),
    };
    let err = wcg_block(&mut t, x, 2, &w, &mut RunningStats::new(3), true, &f).unwrap_err();
    assert!(err.to_string().contains("not divisible by G=2"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perfect_reconstruction(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, db2 in any::<bool>()) {
        let f = fam(if db2 { "db2" } else { "haar" });
        let x = uniform(&[1, 2, 2 * h, 2 * w], seed);
        let r = idwt2(&dwt2(&x, &*f).unwrap(), &*f).unwrap();
        prop_assert!(r.max_abs_diff(&x) < 1e-10);
        let e = dwt2(&x, &*f).unwrap().energy();
        prop_assert!((e - x.sum_sq()).abs() <= 1e-10 * x.sum_sq());
    }

    #[test]
    fn analysis_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let f = fam("db2");
        let x = uniform(&[1, 1, 8, 8], seed);
        let y = uniform(&[1, 1, 8, 8], seed ^ 0xabc);
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = dwt2_packed(&combo, &*f).unwrap();
        let rhs = dwt2_packed(&x, &*f).unwrap().zip_map(&dwt2_packed(&y, &*f).unwrap(), |p, q| a * p + b * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
