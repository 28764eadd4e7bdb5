//! Periodized separable 2-D DWT.
//!
//! Subbands are named vertical-filter first: `LH` is low-pass along
//! columns and high-pass along rows, i.e. it holds differences within a
//! row. With orthonormal filters and periodic extension the transform is
//! an orthogonal matrix, so its adjoint is its inverse.

use std::sync::Arc;

use crate::autodiff::{CustomBackward, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::family::WaveletFamily;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];
    pub const DETAIL: [Band; 3] = [Band::LH, Band::HL, Band::HH];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Band::LL => "ll",
            Band::LH => "lh",
            Band::HL => "hl",
            Band::HH => "hh",
        }
    }
}

/// One level of coefficients, each `[N, C, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Subbands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

impl Subbands {
    pub fn band(&self, b: Band) -> &Tensor {
        match b {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn energy(&self) -> f64 {
        Band::ALL.iter().map(|b| self.band(*b).sum_sq()).sum()
    }
}

fn analyze_1d(src: &[f64], lo: &[f64], hi: &[f64], out_lo: &mut [f64], out_hi: &mut [f64]) {
    let n = src.len();
    for (i, (l, h)) in out_lo.iter_mut().zip(out_hi.iter_mut()).enumerate() {
        let (mut a, mut d) = (0.0, 0.0);
        for k in 0..lo.len() {
            let v = src[(2 * i + k) % n];
            a += lo[k] * v;
            d += hi[k] * v;
        }
        *l = a;
        *h = d;
    }
}

fn synthesize_1d(lo_c: &[f64], hi_c: &[f64], lo: &[f64], hi: &[f64], dst: &mut [f64]) {
    let n = dst.len();
    dst.fill(0.0);
    for i in 0..lo_c.len() {
        for k in 0..lo.len() {
            dst[(2 * i + k) % n] += lo[k] * lo_c[i] + hi[k] * hi_c[i];
        }
    }
}

/// Transform one `h x w` plane into four `h/2 x w/2` planes written to `out`
/// in `LL, LH, HL, HH` order.
fn analyze_plane(src: &[f64], h: usize, w: usize, lo: &[f64], hi: &[f64], out: &mut [&mut [f64]; 4]) {
    let (h2, w2) = (h / 2, w / 2);
    // rows: left half low-pass, right half high-pass
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let (l, r) = tmp[y * w..(y + 1) * w].split_at_mut(w2);
        analyze_1d(&src[y * w..(y + 1) * w], lo, hi, l, r);
    }
    let mut col = vec![0.0; h];
    let mut cl = vec![0.0; h2];
    let mut ch = vec![0.0; h2];
    for x in 0..w {
        for y in 0..h {
            col[y] = tmp[y * w + x];
        }
        analyze_1d(&col, lo, hi, &mut cl, &mut ch);
        let (horiz_hi, xx) = (x >= w2, x % w2);
        let (top, bottom) = if horiz_hi { (1, 3) } else { (0, 2) };
        for y in 0..h2 {
            out[top][y * w2 + xx] = cl[y];
            out[bottom][y * w2 + xx] = ch[y];
        }
    }
}

fn synthesize_plane(bands: [&[f64]; 4], h2: usize, w2: usize, lo: &[f64], hi: &[f64], dst: &mut [f64]) {
    let (h, w) = (2 * h2, 2 * w2);
    let mut tmp = vec![0.0; h * w];
    let mut cl = vec![0.0; h2];
    let mut ch = vec![0.0; h2];
    let mut col = vec![0.0; h];
    for x in 0..w {
        let (horiz_hi, xx) = (x >= w2, x % w2);
        let (top, bottom) = if horiz_hi { (1, 3) } else { (0, 2) };
        for y in 0..h2 {
            cl[y] = bands[top][y * w2 + xx];
            ch[y] = bands[bottom][y * w2 + xx];
        }
        synthesize_1d(&cl, &ch, lo, hi, &mut col);
        for y in 0..h {
            tmp[y * w + x] = col[y];
        }
    }
    for y in 0..h {
        let row = &tmp[y * w..(y + 1) * w];
        synthesize_1d(&row[..w2], &row[w2..], lo, hi, &mut dst[y * w..(y + 1) * w]);
    }
}

fn check_even(x: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    let dims = x.dims4(op)?;
    let [_, _, h, w] = dims;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            op,
            format!("extents {h}x{w} must be even; reflect-pad the input first (see wavelet::pad_reflect)"),
        ));
    }
    Ok(dims)
}

/// One-level analysis packed band-major: `[N, 4C, H/2, W/2]` with band `b`
/// in channels `b*C..(b+1)*C`.
pub fn dwt2_packed(x: &Tensor, family: &dyn WaveletFamily) -> Result<Tensor> {
    let [n, c, h, w] = check_even(x, "dwt2")?;
    let (lo, hi) = (family.lowpass(), family.highpass());
    let (h2, w2) = (h / 2, w / 2);
    let q = h2 * w2;
    let mut out = vec![0.0; n * 4 * c * q];
    let mut planes = [vec![0.0; q], vec![0.0; q], vec![0.0; q], vec![0.0; q]];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * h * w..][..h * w];
            {
                let [p0, p1, p2, p3] = &mut planes;
                analyze_plane(src, h, w, lo, &hi, &mut [p0, p1, p2, p3]);
            }
            for (band, plane) in planes.iter().enumerate() {
                out[((b * 4 + band) * c + ch) * q..][..q].copy_from_slice(plane);
            }
        }
    }
    Tensor::from_vec(vec![n, 4 * c, h2, w2], out)
}

/// Inverse of [`dwt2_packed`].
pub fn idwt2_packed(packed: &Tensor, family: &dyn WaveletFamily) -> Result<Tensor> {
    let [n, c4, h2, w2] = packed.dims4("idwt2")?;
    if c4 % 4 != 0 {
        return Err(Error::shape(
            "idwt2",
            format!("packed channel count {c4} is not a multiple of 4"),
        ));
    }
    let c = c4 / 4;
    let (lo, hi) = (family.lowpass(), family.highpass());
    let q = h2 * w2;
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = vec![0.0; n * c * h * w];
    let d = packed.data();
    for b in 0..n {
        for ch in 0..c {
            let band = |k: usize| &d[((b * 4 + k) * c + ch) * q..][..q];
            synthesize_plane(
                [band(0), band(1), band(2), band(3)],
                h2,
                w2,
                lo,
                &hi,
                &mut out[(b * c + ch) * h * w..][..h * w],
            );
        }
    }
    Tensor::from_vec(vec![n, c, h, w], out)
}

fn unpack(packed: &Tensor) -> Subbands {
    let [n, c4, h2, w2] = packed.dims4("unpack").expect("packed rank 4");
    let c = c4 / 4;
    let q = c * h2 * w2;
    let take = |k: usize| {
        let mut data = Vec::with_capacity(n * q);
        for b in 0..n {
            data.extend_from_slice(&packed.data()[(b * 4 + k) * q..][..q]);
        }
        Tensor::from_vec(vec![n, c, h2, w2], data).expect("band shape")
    };
    Subbands {
        ll: take(0),
        lh: take(1),
        hl: take(2),
        hh: take(3),
    }
}

fn pack(s: &Subbands) -> Result<Tensor> {
    let shape = s.ll.dims4("idwt2")?;
    for b in Band::DETAIL {
        if s.band(b).shape() != s.ll.shape() {
            return Err(Error::shape(
                "idwt2",
                format!(
                    "{} band is {:?} but LL is {:?}",
                    b.name(),
                    s.band(b).shape(),
                    s.ll.shape()
                ),
            ));
        }
    }
    let [n, c, h2, w2] = shape;
    let q = c * h2 * w2;
    let mut data = Vec::with_capacity(4 * n * q);
    for b in 0..n {
        for band in Band::ALL {
            data.extend_from_slice(&s.band(band).data()[b * q..(b + 1) * q]);
        }
    }
    Tensor::from_vec(vec![n, 4 * c, h2, w2], data)
}

pub fn dwt2(x: &Tensor, family: &dyn WaveletFamily) -> Result<Subbands> {
    Ok(unpack(&dwt2_packed(x, family)?))
}

pub fn idwt2(bands: &Subbands, family: &dyn WaveletFamily) -> Result<Tensor> {
    idwt2_packed(&pack(bands)?, family)
}

struct AnalysisRule(Arc<dyn WaveletFamily>);

impl CustomBackward for AnalysisRule {
    fn name(&self) -> &'static str {
        "dwt2"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(idwt2_packed(grad, &*self.0).expect("dwt2 grad shape"))]
    }
}

struct SynthesisRule(Arc<dyn WaveletFamily>);

impl CustomBackward for SynthesisRule {
    fn name(&self) -> &'static str {
        "idwt2"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(dwt2_packed(grad, &*self.0).expect("idwt2 grad shape"))]
    }
}

/// Differentiable [`dwt2_packed`].
pub fn dwt2_var(tape: &mut Tape, x: Var, family: &Arc<dyn WaveletFamily>) -> Result<Var> {
    let v = dwt2_packed(tape.value(x), &**family)?;
    tape.custom(&[x], v, Box::new(AnalysisRule(family.clone())))
}

/// Differentiable [`idwt2_packed`].
pub fn idwt2_var(tape: &mut Tape, packed: Var, family: &Arc<dyn WaveletFamily>) -> Result<Var> {
    let v = idwt2_packed(tape.value(packed), &**family)?;
    tape.custom(&[packed], v, Box::new(SynthesisRule(family.clone())))
}

/// Symmetric (half-sample) reflection padding on the bottom/right so both
/// extents become multiples of `multiple`. Returns the padded tensor.
pub fn pad_reflect(x: &Tensor, multiple: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("pad_reflect")?;
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    let (hp, wp) = (up(h), up(w));
    if hp == h && wp == w {
        return Ok(x.clone());
    }
    let reflect = |i: usize, len: usize| -> usize {
        let period = 2 * len;
        let m = i % period;
        if m < len {
            m
        } else {
            period - 1 - m
        }
    };
    let mut data = Vec::with_capacity(n * c * hp * wp);
    for plane in x.data().chunks(h * w) {
        for y in 0..hp {
            let sy = reflect(y, h);
            for xx in 0..wp {
                data.push(plane[sy * w + reflect(xx, w)]);
            }
        }
    }
    Tensor::from_vec(vec![n, c, hp, wp], data)
}
