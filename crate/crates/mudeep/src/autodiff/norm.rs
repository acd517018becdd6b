//! Batch normalization over [N,C,H,W] (per channel) or [N,F] (per feature).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Tape, Var};

pub struct BatchNormOut<S: Scalar> {
    pub out: Var,
    /// Batch statistics (mean, biased variance), train mode only; the layer
    /// folds these into its running estimates.
    pub batch_stats: Option<(Vec<S>, Vec<S>)>,
}

/// Interprets the supported layouts as [N, C, spatial].
fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c, h, w] => Ok((*n, *c, h * w)),
        [n, f] => Ok((*n, *f, 1)),
        s => Err(Error::Shape(format!("batch_norm input {s:?}, want NCHW or NF"))),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        train: bool,
        running: Option<(&[S], &[S])>,
    ) -> Result<BatchNormOut<S>> {
        let (vx, vg, vb) = (self.value_rc(x), self.value_rc(gamma), self.value_rc(beta));
        let (n, c, sp) = bn_dims(vx.shape())?;
        if vg.shape() != [c] || vb.shape() != [c] {
            return Err(Error::Shape(format!(
                "batch_norm affine {:?}/{:?}, want [{c}]",
                vg.shape(),
                vb.shape()
            )));
        }
        let m = n * sp;
        let at = move |b: usize, ch: usize, s: usize| (b * c + ch) * sp + s;

        if train {
            if n < 2 {
                return Err(Error::Numeric(
                    "batch_norm train mode requires batch size >= 2".into(),
                ));
            }
            let inv_m = 1.0 / m as f64;
            let mut mean = vec![S::ZERO; c];
            let mut var = vec![S::ZERO; c];
            for ch in 0..c {
                let mut acc = 0.0f64;
                for b in 0..n {
                    for s in 0..sp {
                        acc += vx.data()[at(b, ch, s)].to_f64();
                    }
                }
                let mu = acc * inv_m;
                let mut vacc = 0.0f64;
                for b in 0..n {
                    for s in 0..sp {
                        let d = vx.data()[at(b, ch, s)].to_f64() - mu;
                        vacc += d * d;
                    }
                }
                mean[ch] = S::from_f64(mu);
                var[ch] = S::from_f64(vacc * inv_m);
            }
            let invstd: Vec<S> = var
                .iter()
                .map(|v| S::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            let mut xhat = vec![S::ZERO; vx.numel()];
            let mut out = Tensor::zeros(vx.shape());
            for ch in 0..c {
                let (mu, is) = (mean[ch], invstd[ch]);
                let (g, b0) = (vg.data()[ch], vb.data()[ch]);
                for b in 0..n {
                    for s in 0..sp {
                        let i = at(b, ch, s);
                        let xh = (vx.data()[i] - mu) * is;
                        xhat[i] = xh;
                        out.data_mut()[i] = g * xh + b0;
                    }
                }
            }
            let (xi, gi, bi) = (x.0, gamma.0, beta.0);
            let invstd_b = invstd.clone();
            let vgc = vg.clone();
            let out_var = self.push(
                out,
                Some(Box::new(move |gout, grads| {
                    let m_s = S::from_f64(m as f64);
                    let inv_m_s = S::from_f64(1.0 / m as f64);
                    for ch in 0..c {
                        let mut sum_dy = S::ZERO;
                        let mut sum_dy_xhat = S::ZERO;
                        for b in 0..n {
                            for s in 0..sp {
                                let i = at(b, ch, s);
                                let dy = gout.data()[i];
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat[i];
                            }
                        }
                        grads[gi].data_mut()[ch] += sum_dy_xhat;
                        grads[bi].data_mut()[ch] += sum_dy;
                        let coef = vgc.data()[ch] * invstd_b[ch] * inv_m_s;
                        for b in 0..n {
                            for s in 0..sp {
                                let i = at(b, ch, s);
                                let dy = gout.data()[i];
                                grads[xi].data_mut()[i] +=
                                    coef * (m_s * dy - sum_dy - xhat[i] * sum_dy_xhat);
                            }
                        }
                    }
                })),
            );
            Ok(BatchNormOut {
                out: out_var,
                batch_stats: Some((mean, var)),
            })
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::Config("batch_norm eval mode requires running statistics".into())
            })?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::Shape(format!(
                    "batch_norm running stats length {}/{}, want {c}",
                    rm.len(),
                    rv.len()
                )));
            }
            let invstd: Vec<S> = rv
                .iter()
                .map(|v| S::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
                .collect();
            let rm = rm.to_vec();
            let mut out = Tensor::zeros(vx.shape());
            for ch in 0..c {
                let (mu, is) = (rm[ch], invstd[ch]);
                let (g, b0) = (vg.data()[ch], vb.data()[ch]);
                for b in 0..n {
                    for s in 0..sp {
                        let i = at(b, ch, s);
                        out.data_mut()[i] = g * (vx.data()[i] - mu) * is + b0;
                    }
                }
            }
            let (xi, gi, bi) = (x.0, gamma.0, beta.0);
            let vgc = vg.clone();
            let vxc = vx.clone();
            let out_var = self.push(
                out,
                Some(Box::new(move |gout, grads| {
                    for ch in 0..c {
                        let (mu, is) = (rm[ch], invstd[ch]);
                        let coef = vgc.data()[ch] * is;
                        let mut sum_dy = S::ZERO;
                        let mut sum_dy_xhat = S::ZERO;
                        for b in 0..n {
                            for s in 0..sp {
                                let i = at(b, ch, s);
                                let dy = gout.data()[i];
                                sum_dy += dy;
                                sum_dy_xhat += dy * (vxc.data()[i] - mu) * is;
                                grads[xi].data_mut()[i] += coef * dy;
                            }
                        }
                        grads[gi].data_mut()[ch] += sum_dy_xhat;
                        grads[bi].data_mut()[ch] += sum_dy;
                    }
                })),
            );
            Ok(BatchNormOut {
                out: out_var,
                batch_stats: None,
            })
        }
    }
}
