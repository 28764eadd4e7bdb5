//! Grouped 2-D cross-correlation via im2col and dgemm.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let op = "conv2d";
        let (n, cin, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape(op, format!("input must be [N,Cin,H,W], got {input:?}"))),
        };
        let (cout, cin_g, kh, kw) = match *weight {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => {
                return Err(Error::shape(
                    op,
                    format!("weight must be [Cout,Cin/g,kh,kw], got {weight:?}"),
                ))
            }
        };
        if groups == 0 || stride == 0 {
            return Err(Error::invalid(op, "groups and stride must be positive"));
        }
        if cin % groups != 0 {
            return Err(Error::shape(op, format!("Cin={cin} is not divisible by groups={groups}")));
        }
        if cout % groups != 0 {
            return Err(Error::shape(op, format!("Cout={cout} is not divisible by groups={groups}")));
        }
        if cin / groups != cin_g {
            return Err(Error::shape(
                op,
                format!("weight dim 1 is {cin_g}, expected Cin/groups = {}", cin / groups),
            ));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                op,
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
            ho,
            wo,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Rows of the column matrix for one group.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies inside `0..w`.
fn valid_cols(g: &ConvGeometry, kx: usize) -> (usize, usize) {
    let (s, pad) = (g.stride, g.padding);
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(s) };
    let hi = if g.w + pad > kx { ((g.w + pad - kx - 1) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let (p, hw) = (g.p(), g.h * g.w);
    let pad = g.padding as isize;
    for ci in 0..g.cin_g() {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let start = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &s) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *v = s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (p, hw) = (g.p(), g.h * g.w);
    let pad = g.padding as isize;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.padding;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (d, &v) in line[start..].iter_mut().step_by(g.stride).zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: all slices are sized by the caller for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn forward(g: &ConvGeometry, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (k, p) = (g.k(), g.p());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
    let in_plane = g.h * g.w;
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x.data()[(n * g.cin + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let b: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            let wg = &weight.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dst = &mut out[(n * g.cout + grp * cout_g) * p..][..cout_g * p];
            if let Some(bias) = bias {
                for (o, chunk) in dst.chunks_mut(p).enumerate() {
                    chunk.fill(bias.data()[grp * cout_g + o]);
                }
                gemm(cout_g, k, p, wg, (k, 1), b, (p, 1), 1.0, dst);
            } else {
                gemm(cout_g, k, p, wg, (k, 1), b, (p, 1), 0.0, dst);
            }
        }
    }
    Tensor::from_vec(vec![g.n, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn backward(
    g: &ConvGeometry,
    x: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (k, p) = (g.k(), g.p());
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    let in_plane = g.h * g.w;
    let mut dx = need.0.then(|| vec![0.0; x.numel()]);
    let mut dw = need.1.then(|| vec![0.0; weight.numel()]);
    let mut col = vec![0.0; k * p];
    let mut dcol = vec![0.0; k * p];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let go = &gout.data()[(n * g.cout + grp * cout_g) * p..][..cout_g * p];
            let xs = &x.data()[(n * g.cin + grp * cin_g) * in_plane..][..cin_g * in_plane];
            if let Some(dw) = dw.as_mut() {
                let b: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(g, xs, &mut col);
                    &col
                };
                let dwg = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
                // dW_g += gout_g * col^T
                gemm(cout_g, p, k, go, (p, 1), b, (1, p), 1.0, dwg);
            }
            if let Some(dx) = dx.as_mut() {
                let wg = &weight.data()[grp * cout_g * k..(grp + 1) * cout_g * k];
                let dxs = &mut dx[(n * g.cin + grp * cin_g) * in_plane..][..cin_g * in_plane];
                if g.is_pointwise() {
                    gemm(k, cout_g, p, wg, (1, k), go, (p, 1), 1.0, dxs);
                } else {
                    gemm(k, cout_g, p, wg, (1, k), go, (p, 1), 0.0, &mut dcol);
                    col2im_add(g, &dcol, dxs);
                }
            }
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![0.0; g.cout];
        for n in 0..g.n {
            for (o, d) in db.iter_mut().enumerate() {
                *d += gout.data()[(n * g.cout + o) * p..][..p].iter().sum::<f64>();
            }
        }
        Tensor::from_vec(vec![g.cout], db).expect("bias grad shape")
    });
    ConvGrads {
        input: dx.map(|d| Tensor::from_vec(x.shape().to_vec(), d).expect("input grad shape")),
        weight: dw.map(|d| Tensor::from_vec(weight.shape().to_vec(), d).expect("weight grad shape")),
        bias: db,
    }
}
