//! Reverse-mode differentiation on a recording tape.
//!
//! Every forward op pushes a node holding its output value and a backward
//! closure. `backward` walks nodes in exact reverse recording order and
//! accumulates (adds) gradients, so a `Parameter` used at several graph
//! sites — the weight-tying case — receives the sum of its site-wise
//! contributions.

mod conv;
mod norm;
mod pool;

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::ParamRef;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<S> = Box<dyn Fn(&Tensor<S>, &mut [Tensor<S>])>;

struct Node<S: Scalar> {
    value: Rc<Tensor<S>>,
    backward: Option<BackFn<S>>,
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    param_uses: Vec<(usize, ParamRef<S>)>,
    grads: Option<Vec<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_uses: Vec::new(),
            grads: None,
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<S>, backward: Option<BackFn<S>>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<Tensor<S>> {
        self.nodes[v.0].value.clone()
    }

    /// Leaf with no gradient flow.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, None)
    }

    /// Leaf bound to a parameter: after `backward`, the tape gradient for
    /// this use site is added into `Parameter::grad`.
    pub fn param(&mut self, p: &ParamRef<S>) -> Var {
        let v = self.push(p.borrow().value.clone(), None);
        self.param_uses.push((v.0, p.clone()));
        v
    }

    /// Gradient of the last `backward` call w.r.t. `v`.
    pub fn grad(&self, v: Var) -> &Tensor<S> {
        self.grads
            .as_ref()
            .expect("backward has not been run")
            .get(v.0)
            .expect("var out of range")
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// bound parameter's `grad` field.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(
                "backward requires a scalar loss".to_string(),
            ));
        }
        let mut grads: Vec<Tensor<S>> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].fill(S::ONE);
        for i in (0..self.nodes.len()).rev() {
            if let Some(back) = &self.nodes[i].backward {
                let g = std::mem::replace(&mut grads[i], Tensor::zeros(&[0]));
                back(&g, &mut grads);
                grads[i] = g;
            }
        }
        for (idx, p) in &self.param_uses {
            p.borrow_mut().grad.add_assign_tensor(&grads[*idx]);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op: &str,
        fwd: impl Fn(S, S) -> S,
        back: impl Fn(S, S, S) -> (S, S) + 'static,
    ) -> Result<Var> {
        let (va, vb) = (self.value_rc(a), self.value_rc(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let (ai, bi) = (a.0, b.0);
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for i in 0..g.numel() {
                    let (da, db) = back(va.data()[i], vb.data()[i], g.data()[i]);
                    grads[ai].data_mut()[i] += da;
                    grads[bi].data_mut()[i] += db;
                }
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    /// y = sum_i w_i * x_i over equally shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(S, Var)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Shape("weighted_sum of no terms".into()))?;
        let shape = self.value(first.1).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(w, v) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "weighted_sum: {:?} vs {:?}",
                    t.shape(),
                    shape
                )));
            }
            for (o, &x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let captured: Vec<(S, usize)> = terms.iter().map(|&(w, v)| (w, v.0)).collect();
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for &(w, idx) in &captured {
                    for (gi, &go) in grads[idx].data_mut().iter_mut().zip(g.data()) {
                        *gi += w * go;
                    }
                }
            })),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let out = vx.map(|v| if v > S::ZERO { v } else { S::ZERO });
        let xi = x.0;
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                for i in 0..g.numel() {
                    if vx.data()[i] > S::ZERO {
                        grads[xi].data_mut()[i] += g.data()[i];
                    }
                }
            })),
        )
    }

    /// Inverted dropout: survivors scaled by 1/(1-p) in train mode,
    /// identity in eval mode.
    pub fn dropout(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.reshape(x, &self.value(x).shape().to_vec())?);
        }
        let vx = self.value_rc(x);
        let keep = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..vx.numel())
            .map(|_| {
                if rng.random::<f64>() < p {
                    S::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let out = Tensor::from_vec(vx.shape(), data)?;
        let xi = x.0;
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for i in 0..g.numel() {
                    grads[xi].data_mut()[i] += g.data()[i] * mask[i];
                }
            })),
        ))
    }

    /// y[n,o] = sum_i x[n,i] * w[o,i] + b[o]
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value_rc(x), self.value_rc(w), self.value_rc(b));
        let (n, in_dim) = match vx.shape() {
            [n, i] => (*n, *i),
            s => return Err(Error::Shape(format!("fully_connected input {s:?}, want [N,I]"))),
        };
        let (out_dim, w_in) = match vw.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("fully_connected weight {s:?}, want [O,I]"))),
        };
        if w_in != in_dim || vb.shape() != [out_dim] {
            return Err(Error::Shape(format!(
                "fully_connected: x {:?}, w {:?}, b {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, out_dim]);
        for r in 0..n {
            out.data_mut()[r * out_dim..(r + 1) * out_dim].copy_from_slice(vb.data());
        }
        // x (n×in, row-major) * w^T (in×out: w with strides swapped)
        S::gemm(
            n,
            in_dim,
            out_dim,
            S::ONE,
            vx.data(),
            in_dim as isize,
            1,
            vw.data(),
            1,
            in_dim as isize,
            S::ONE,
            out.data_mut(),
            out_dim as isize,
            1,
        );
        let (xi, wi, bi) = (x.0, w.0, b.0);
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                // dX = g (n×out) * w (out×in)
                S::gemm(
                    n,
                    out_dim,
                    in_dim,
                    S::ONE,
                    g.data(),
                    out_dim as isize,
                    1,
                    vw.data(),
                    in_dim as isize,
                    1,
                    S::ONE,
                    grads[xi].data_mut(),
                    in_dim as isize,
                    1,
                );
                // dW = g^T (out×n) * x (n×in)
                S::gemm(
                    out_dim,
                    n,
                    in_dim,
                    S::ONE,
                    g.data(),
                    1,
                    out_dim as isize,
                    vx.data(),
                    in_dim as isize,
                    1,
                    S::ONE,
                    grads[wi].data_mut(),
                    in_dim as isize,
                    1,
                );
                for r in 0..n {
                    for o in 0..out_dim {
                        grads[bi].data_mut()[o] += g.data()[r * out_dim + o];
                    }
                }
            })),
        ))
    }

    /// Mean softmax cross-entropy over the batch; labels index the class axis.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value_rc(logits);
        let (n, c) = match vl.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::Shape(format!("softmax_cross_entropy logits {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "softmax_cross_entropy: {n} rows, {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![S::ZERO; n * c];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &vl.data()[r * c..(r + 1) * c];
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let mut z = S::ZERO;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[r * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[r * c + j] = probs[r * c + j] / z;
            }
            loss -= probs[r * c + labels[r]].to_f64().ln();
        }
        let out = Tensor::scalar(S::from_f64(loss / n as f64));
        let li = logits.0;
        let labels = labels.to_vec();
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let scale = g.item() * S::from_f64(1.0 / n as f64);
                let gl = grads[li].data_mut();
                for r in 0..n {
                    for j in 0..c {
                        let y = if labels[r] == j { S::ONE } else { S::ZERO };
                        gl[r * c + j] += scale * (probs[r * c + j] - y);
                    }
                }
            })),
        ))
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn channel_concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("channel_concat of no inputs".into()));
        }
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&v| self.value(v).shape().to_vec())
            .collect();
        let first = &shapes[0];
        if first.len() != 4 {
            return Err(Error::Shape(format!("channel_concat wants NCHW, got {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        for s in &shapes {
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Shape(format!(
                    "channel_concat: incompatible {s:?} vs {first:?}"
                )));
            }
        }
        let c_total: usize = shapes.iter().map(|s| s[1]).sum();
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        let mut offset = 0usize;
        for (&v, s) in parts.iter().zip(&shapes) {
            let c = s[1];
            let src = self.value(v).data();
            for b in 0..n {
                let dst_base = (b * c_total + offset) * hw;
                let src_base = b * c * hw;
                out.data_mut()[dst_base..dst_base + c * hw]
                    .copy_from_slice(&src[src_base..src_base + c * hw]);
            }
            offset += c;
        }
        let pieces: Vec<(usize, usize)> = parts
            .iter()
            .zip(&shapes)
            .map(|(&v, s)| (v.0, s[1]))
            .collect();
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut offset = 0usize;
                for &(idx, c) in &pieces {
                    for b in 0..n {
                        let src_base = (b * c_total + offset) * hw;
                        let dst_base = b * c * hw;
                        let gd = grads[idx].data_mut();
                        for i in 0..c * hw {
                            gd[dst_base + i] += g.data()[src_base + i];
                        }
                    }
                    offset += c;
                }
            })),
        ))
    }

    /// y[n,c,h,w] = alpha[c] * x[n,c,h,w]
    pub fn channel_scale(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (vx, va) = (self.value_rc(x), self.value_rc(alpha));
        let (n, c, h, w) = match vx.shape() {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::Shape(format!("channel_scale input {s:?}"))),
        };
        if va.shape() != [c] {
            return Err(Error::Shape(format!(
                "channel_scale alpha {:?}, want [{c}]",
                va.shape()
            )));
        }
        let hw = h * w;
        let mut out = Tensor::zeros(vx.shape());
        for b in 0..n {
            for ch in 0..c {
                let a = va.data()[ch];
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    out.data_mut()[base + i] = a * vx.data()[base + i];
                }
            }
        }
        let (xi, ai) = (x.0, alpha.0);
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for b in 0..n {
                    for ch in 0..c {
                        let a = va.data()[ch];
                        let base = (b * c + ch) * hw;
                        let mut da = S::ZERO;
                        for i in 0..hw {
                            let go = g.data()[base + i];
                            grads[xi].data_mut()[base + i] += a * go;
                            da += vx.data()[base + i] * go;
                        }
                        grads[ai].data_mut()[ch] += da;
                    }
                }
            })),
        ))
    }

    /// Per-channel weighted stream fusion:
    /// G[n,j] = sum_i alpha[i,j] * F_i[n,j], alpha shaped [streams, C].
    pub fn saliency_fuse(&mut self, streams: &[Var], alpha: Var) -> Result<Var> {
        let va = self.value_rc(alpha);
        let (ns, c) = match va.shape() {
            [ns, c] => (*ns, *c),
            s => return Err(Error::Shape(format!("saliency alpha {s:?}, want [streams,C]"))),
        };
        if streams.len() != ns {
            return Err(Error::Shape(format!(
                "saliency_fuse: {} streams but alpha has {ns} rows",
                streams.len()
            )));
        }
        let vals: Vec<Rc<Tensor<S>>> = streams.iter().map(|&v| self.value_rc(v)).collect();
        let shape = vals[0].shape().to_vec();
        let (n, h, w) = match shape.as_slice() {
            [n, sc, h, w] if *sc == c => (*n, *h, *w),
            s => {
                return Err(Error::Shape(format!(
                    "saliency_fuse stream {s:?}, want [N,{c},H,W]"
                )))
            }
        };
        for v in &vals {
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "saliency_fuse: stream shapes differ: {:?} vs {:?}",
                    v.shape(),
                    shape
                )));
            }
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&shape);
        for (i, f) in vals.iter().enumerate() {
            for b in 0..n {
                for ch in 0..c {
                    let a = va.data()[i * c + ch];
                    let base = (b * c + ch) * hw;
                    for k in 0..hw {
                        out.data_mut()[base + k] += a * f.data()[base + k];
                    }
                }
            }
        }
        let idxs: Vec<usize> = streams.iter().map(|v| v.0).collect();
        let ai = alpha.0;
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for (i, f) in vals.iter().enumerate() {
                    for b in 0..n {
                        for ch in 0..c {
                            let a = va.data()[i * c + ch];
                            let base = (b * c + ch) * hw;
                            let mut da = S::ZERO;
                            for k in 0..hw {
                                let go = g.data()[base + k];
                                grads[idxs[i]].data_mut()[base + k] += a * go;
                                da += f.data()[base + k] * go;
                            }
                            grads[ai].data_mut()[i * c + ch] += da;
                        }
                    }
                }
            })),
        ))
    }

    /// View with a new shape; element count must match.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        let xi = x.0;
        Ok(self.push(
            out,
            Some(Box::new(move |g, grads| {
                for (gi, &go) in grads[xi].data_mut().iter_mut().zip(g.data()) {
                    *gi += go;
                }
            })),
        ))
    }

    /// [N, ...] -> [N, prod(rest)]
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() {
            return Err(Error::Shape("flatten of 0-d tensor".into()));
        }
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let vx = self.value_rc(x);
        let total = vx.data().iter().fold(S::ZERO, |a, &b| a + b);
        let xi = x.0;
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, grads| {
                let go = g.item();
                for gi in grads[xi].data_mut() {
                    *gi += go;
                }
            })),
        )
    }
}

/// Row-wise softmax, computed off-tape (used for probabilities at eval time).
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(logits.shape());
    for r in 0..n {
        let row = &logits.data()[r * c..(r + 1) * c];
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut z = S::ZERO;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out.data_mut()[r * c + j] = e;
            z += e;
        }
        for j in 0..c {
            let v = out.data_mut()[r * c + j] / z;
            out.data_mut()[r * c + j] = v;
        }
    }
    out
}
