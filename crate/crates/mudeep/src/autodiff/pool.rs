//! Max and average pooling.
//!
//! Max pooling treats padded cells as -inf so they never win; ties break to
//! the first candidate in row-major scan order, giving a deterministic
//! backward. Average pooling divides by k*k counting padded zeros.

use crate::error::{Error, Result};
use crate::tensor::{conv_out_dim, Scalar, Tensor};

use super::{Tape, Var};

struct PoolGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn pool_geom<S: Scalar>(t: &Tensor<S>, k: usize, stride: usize, pad: usize) -> Result<PoolGeom> {
    let (n, c, h, w) = match t.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => return Err(Error::Shape(format!("pool input {s:?}, want NCHW"))),
    };
    if k < 1 {
        return Err(Error::Geometry("pool kernel must be >= 1".into()));
    }
    if stride < 1 {
        return Err(Error::Geometry("pool stride must be >= 1".into()));
    }
    Ok(PoolGeom {
        n,
        c,
        h,
        w,
        k,
        stride,
        pad,
        oh: conv_out_dim(h, k, stride, pad)?,
        ow: conv_out_dim(w, k, stride, pad)?,
    })
}

impl<S: Scalar> Tape<S> {
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value_rc(x);
        let g = pool_geom(&vx, k, stride, pad)?;
        let mut out = Tensor::zeros(&[g.n, g.c, g.oh, g.ow]);
        let mut argmax = vec![0usize; out.numel()];
        let mut oi = 0usize;
        for b in 0..g.n {
            for ch in 0..g.c {
                let plane_off = (b * g.c + ch) * g.h * g.w;
                let plane = &vx.data()[plane_off..plane_off + g.h * g.w];
                for oh in 0..g.oh {
                    for ow in 0..g.ow {
                        let mut best = S::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ki in 0..g.k {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.k {
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                let v = plane[ih as usize * g.w + iw as usize];
                                if v > best {
                                    best = v;
                                    best_idx = plane_off + ih as usize * g.w + iw as usize;
                                }
                            }
                        }
                        if best_idx == usize::MAX {
                            return Err(Error::Geometry(
                                "max_pool2d window contains no input cells".into(),
                            ));
                        }
                        out.data_mut()[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        let xi = x.0;
        Ok(self.push(
            out,
            Some(Box::new(move |gout, grads| {
                let gx = grads[xi].data_mut();
                for (i, &src) in argmax.iter().enumerate() {
                    gx[src] += gout.data()[i];
                }
            })),
        ))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let vx = self.value_rc(x);
        let g = pool_geom(&vx, k, stride, pad)?;
        let inv = S::from_f64(1.0 / (k * k) as f64);
        let mut out = Tensor::zeros(&[g.n, g.c, g.oh, g.ow]);
        let mut oi = 0usize;
        for b in 0..g.n {
            for ch in 0..g.c {
                let plane_off = (b * g.c + ch) * g.h * g.w;
                let plane = &vx.data()[plane_off..plane_off + g.h * g.w];
                for oh in 0..g.oh {
                    for ow in 0..g.ow {
                        let mut acc = S::ZERO;
                        for ki in 0..g.k {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            for kj in 0..g.k {
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.w as isize {
                                    continue;
                                }
                                acc += plane[ih as usize * g.w + iw as usize];
                            }
                        }
                        out.data_mut()[oi] = acc * inv;
                        oi += 1;
                    }
                }
            }
        }
        let xi = x.0;
        let geom = (g.n, g.c, g.h, g.w, g.k, g.stride, g.pad, g.oh, g.ow);
        Ok(self.push(
            out,
            Some(Box::new(move |gout, grads| {
                let (n, c, h, w, k, stride, pad, oh_n, ow_n) = geom;
                let gx = grads[xi].data_mut();
                let mut oi = 0usize;
                for b in 0..n {
                    for ch in 0..c {
                        let plane_off = (b * c + ch) * h * w;
                        for oh in 0..oh_n {
                            for ow in 0..ow_n {
                                let go = gout.data()[oi] * inv;
                                oi += 1;
                                for ki in 0..k {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..k {
                                        let iw = (ow * stride + kj) as isize - pad as isize;
                                        if iw < 0 || iw >= w as isize {
                                            continue;
                                        }
                                        gx[plane_off + ih as usize * w + iw as usize] += go;
                                    }
                                }
                            }
                        }
                    }
                }
            })),
        ))
    }
}
