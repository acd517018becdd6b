//! 2D convolution via im2col + GEMM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::runtime;
use crate::tensor::{conv_out_dim, Scalar, Tensor};

use super::{Tape, Var};

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn len_out(&self) -> usize {
        self.oh * self.ow
    }
}

/// Fills `col` ([C*kh*kw, OH*OW] row-major) from one input sample.
fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    let l = g.len_out();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut col[((c * g.kh + ki) * g.kw + kj) * l..][..l];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad_h as isize;
                    let base = oh * g.ow;
                    if ih < 0 || ih >= g.h as isize {
                        row[base..base + g.ow].fill(S::ZERO);
                        continue;
                    }
                    let ih = ih as usize;
                    for owi in 0..g.ow {
                        let iw = (owi * g.stride + kj) as isize - g.pad_w as isize;
                        row[base + owi] = if iw < 0 || iw >= g.w as isize {
                            S::ZERO
                        } else {
                            plane[ih * g.w + iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a column gradient back onto one input-sample gradient.
fn col2im_add<S: Scalar>(dcol: &[S], g: &ConvGeom, dx: &mut [S]) {
    let l = g.len_out();
    for c in 0..g.c {
        let plane_off = c * g.h * g.w;
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &dcol[((c * g.kh + ki) * g.kw + kj) * l..][..l];
                for oh in 0..g.oh {
                    let ih = (oh * g.stride + ki) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let ih = ih as usize;
                    for owi in 0..g.ow {
                        let iw = (owi * g.stride + kj) as isize - g.pad_w as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        dx[plane_off + ih * g.w + iw as usize] += row[oh * g.ow + owi];
                    }
                }
            }
        }
    }
}

fn forward_sample<S: Scalar>(x: &[S], w: &[S], b: &[S], g: &ConvGeom, out: &mut [S]) {
    let l = g.len_out();
    let mut col = vec![S::ZERO; g.ckk() * l];
    im2col(x, g, &mut col);
    for k in 0..g.k {
        out[k * l..(k + 1) * l].fill(b[k]);
    }
    S::gemm(
        g.k,
        g.ckk(),
        l,
        S::ONE,
        w,
        g.ckk() as isize,
        1,
        &col,
        l as isize,
        1,
        S::ONE,
        out,
        l as isize,
        1,
    );
}

impl<S: Scalar> Tape<S> {
    /// input [N,C,H,W] * weight [K,C,kh,kw] + bias [K] -> [N,K,OH,OW]
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Var> {
        let (vx, vw, vb) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let (n, c, h, wd) = match vx.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("conv2d input {s:?}, want NCHW"))),
        };
        let (k, wc, kh, kw) = match vw.shape() {
            [k, c, kh, kw] => (*k, *c, *kh, *kw),
            s => return Err(Error::Shape(format!("conv2d weight {s:?}, want [K,C,kh,kw]"))),
        };
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: weight depth {wc} does not match input channels {c}"
            )));
        }
        if vb.shape() != [k] {
            return Err(Error::Shape(format!("conv2d bias {:?}, want [{k}]", vb.shape())));
        }
        if stride < 1 {
            return Err(Error::Geometry("conv2d stride must be >= 1".into()));
        }
        let oh = conv_out_dim(h, kh, stride, pad_h)?;
        let ow = conv_out_dim(wd, kw, stride, pad_w)?;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            k,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        };
        let l = geom.len_out();
        let in_sz = c * h * wd;
        let mut out = Tensor::zeros(&[n, k, oh, ow]);
        {
            let chunks: Vec<(&[S], &mut [S])> = vx
                .data()
                .chunks(in_sz)
                .zip(out.data_mut().chunks_mut(k * l))
                .collect();
            let (wd_s, bd_s) = (vw.data(), vb.data());
            if runtime::threads() > 1 {
                chunks.into_par_iter().for_each(|(xs, os)| {
                    forward_sample(xs, wd_s, bd_s, &geom, os)
                });
            } else {
                for (xs, os) in chunks {
                    forward_sample(xs, vw.data(), vb.data(), &geom, os);
                }
            }
        }
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let ckk = geom.ckk();
                let mut col = vec![S::ZERO; ckk * l];
                let mut dcol = vec![S::ZERO; ckk * l];
                for s in 0..n {
                    let gs = &g.data()[s * k * l..(s + 1) * k * l];
                    im2col(&vx.data()[s * in_sz..(s + 1) * in_sz], &geom, &mut col);
                    // dW += g_s (K×L) * col^T (L×CKK)
                    S::gemm(
                        k,
                        l,
                        ckk,
                        S::ONE,
                        gs,
                        l as isize,
                        1,
                        &col,
                        1,
                        l as isize,
                        S::ONE,
                        grads[wi].data_mut(),
                        ckk as isize,
                        1,
                    );
                    // dcol = W^T (CKK×K) * g_s (K×L)
                    S::gemm(
                        ckk,
                        k,
                        l,
                        S::ONE,
                        vw.data(),
                        1,
                        ckk as isize,
                        gs,
                        l as isize,
                        1,
                        S::ZERO,
                        &mut dcol,
                        l as isize,
                        1,
                    );
                    col2im_add(&dcol, &geom, &mut grads[xi].data_mut()[s * in_sz..(s + 1) * in_sz]);
                    let db = grads[bi].data_mut();
                    for kk in 0..k {
                        let mut acc = S::ZERO;
                        for p in 0..l {
                            acc += gs[kk * l + p];
                        }
                        db[kk] += acc;
                    }
                }
            })),
        ))
    }
}
