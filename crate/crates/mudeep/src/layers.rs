//! Stateful layer objects over the tape primitives, plus the structural
//! layer plan used for shape inspection without allocating weights.
//!
//! The composite "C-filter block" (conv -> batch norm -> ReLU) is the unit
//! the whole architecture is assembled from; building one under an existing
//! tie key reuses that key's parameter storage, which is how the two
//! Siamese branches share weights.

use std::cell::RefCell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{InitKind, ParamRef, ParamRegistry};
use crate::tensor::{conv_out_dim, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-forward state: mode and the RNG stream feeding dropout masks.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvSpec {
    /// Padding per the stream-table convention: 1 on a side iff that kernel
    /// side is 3, else 0.
    pub fn with_table_padding(
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        stride: usize,
    ) -> Self {
        ConvSpec {
            out_channels,
            kernel_h,
            kernel_w,
            in_channels,
            stride,
            pad_h: if kernel_h == 3 { 1 } else { 0 },
            pad_w: if kernel_w == 3 { 1 } else { 0 },
        }
    }

    pub fn no_pad(
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        stride: usize,
    ) -> Self {
        ConvSpec {
            out_channels,
            kernel_h,
            kernel_w,
            in_channels,
            stride,
            pad_h: 0,
            pad_w: 0,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Structural layer description: enough to derive shapes and parameter
/// counts, or to materialize real layers against a registry.
#[derive(Clone, Debug)]
pub enum LayerDef {
    Conv(ConvSpec),
    Bn { channels: usize },
    Relu,
    MaxPool { k: usize, stride: usize, pad: usize },
    AvgPool { k: usize, stride: usize, pad: usize },
    Dropout { p: f64 },
    Linear { in_dim: usize, out_dim: usize },
    Flatten,
}

impl LayerDef {
    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerDef::Conv(s) => match input {
                [n, c, h, w] => {
                    if *c != s.in_channels {
                        return Err(Error::Shape(format!(
                            "conv expects {} input channels, got {c}",
                            s.in_channels
                        )));
                    }
                    Ok(vec![
                        *n,
                        s.out_channels,
                        conv_out_dim(*h, s.kernel_h, s.stride, s.pad_h)?,
                        conv_out_dim(*w, s.kernel_w, s.stride, s.pad_w)?,
                    ])
                }
                other => Err(Error::Shape(format!("conv input {other:?}"))),
            },
            LayerDef::MaxPool { k, stride, pad } | LayerDef::AvgPool { k, stride, pad } => {
                match input {
                    [n, c, h, w] => Ok(vec![
                        *n,
                        *c,
                        conv_out_dim(*h, *k, *stride, *pad)?,
                        conv_out_dim(*w, *k, *stride, *pad)?,
                    ]),
                    other => Err(Error::Shape(format!("pool input {other:?}"))),
                }
            }
            LayerDef::Bn { channels } => {
                let c = match input {
                    [_, c, _, _] => *c,
                    [_, f] => *f,
                    other => return Err(Error::Shape(format!("bn input {other:?}"))),
                };
                if c != *channels {
                    return Err(Error::Shape(format!(
                        "bn expects {channels} channels, got {c}"
                    )));
                }
                Ok(input.to_vec())
            }
            LayerDef::Relu | LayerDef::Dropout { .. } => Ok(input.to_vec()),
            LayerDef::Linear { in_dim, out_dim } => match input {
                [n, f] if f == in_dim => Ok(vec![*n, *out_dim]),
                other => Err(Error::Shape(format!(
                    "linear expects [N,{in_dim}], got {other:?}"
                ))),
            },
            LayerDef::Flatten => match input {
                [n, rest @ ..] if !rest.is_empty() => Ok(vec![*n, rest.iter().product()]),
                other => Err(Error::Shape(format!("flatten input {other:?}"))),
            },
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerDef::Conv(s) => s.weight_count() + s.out_channels,
            LayerDef::Bn { channels } => 2 * channels,
            LayerDef::Linear { in_dim, out_dim } => in_dim * out_dim + out_dim,
            _ => 0,
        }
    }
}

pub fn stack_out_shape(defs: &[LayerDef], input: &[usize]) -> Result<Vec<usize>> {
    let mut s = input.to_vec();
    for d in defs {
        s = d.out_shape(&s)?;
    }
    Ok(s)
}

pub fn stack_param_count(defs: &[LayerDef]) -> usize {
    defs.iter().map(|d| d.param_count()).sum()
}

pub struct Conv2dLayer<S: Scalar> {
    pub spec: ConvSpec,
    pub weight: ParamRef<S>,
    pub bias: ParamRef<S>,
}

impl<S: Scalar> Conv2dLayer<S> {
    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.spec.stride, self.spec.pad_h, self.spec.pad_w)
    }
}

pub struct BatchNormLayer<S: Scalar> {
    pub gamma: ParamRef<S>,
    pub beta: ParamRef<S>,
    pub running_mean: RefCell<Vec<S>>,
    pub running_var: RefCell<Vec<S>>,
}

impl<S: Scalar> BatchNormLayer<S> {
    pub fn forward(&self, tape: &mut Tape<S>, x: Var, train: bool) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        if train {
            let r = tape.batch_norm(x, g, b, BN_EPS, true, None)?;
            let (mean, var) = r.batch_stats.expect("train mode returns stats");
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            let mom = S::from_f64(BN_MOMENTUM);
            let rest = S::from_f64(1.0 - BN_MOMENTUM);
            for (r, m) in rm.iter_mut().zip(&mean) {
                *r = mom * *r + rest * *m;
            }
            for (r, v) in rv.iter_mut().zip(&var) {
                *r = mom * *r + rest * *v;
            }
            Ok(r.out)
        } else {
            let rm = self.running_mean.borrow();
            let rv = self.running_var.borrow();
            Ok(tape.batch_norm(x, g, b, BN_EPS, false, Some((&rm, &rv)))?.out)
        }
    }
}

pub struct LinearLayer<S: Scalar> {
    pub weight: ParamRef<S>,
    pub bias: ParamRef<S>,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn forward(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.fully_connected(x, w, b)
    }
}

pub enum Layer<S: Scalar> {
    Conv(Conv2dLayer<S>),
    Bn(Rc<BatchNormLayer<S>>),
    Relu,
    MaxPool { k: usize, stride: usize, pad: usize },
    AvgPool { k: usize, stride: usize, pad: usize },
    Dropout { p: f64 },
    Linear(LinearLayer<S>),
    Flatten,
}

pub struct LayerStack<S: Scalar> {
    pub defs: Vec<LayerDef>,
    pub layers: Vec<Layer<S>>,
    pub prefix: String,
}

impl<S: Scalar> LayerStack<S> {
    pub fn forward(&self, tape: &mut Tape<S>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let mut v = x;
        for layer in &self.layers {
            v = match layer {
                Layer::Conv(l) => l.forward(tape, v)?,
                Layer::Bn(l) => l.forward(tape, v, ctx.train)?,
                Layer::Relu => tape.relu(v),
                Layer::MaxPool { k, stride, pad } => tape.max_pool2d(v, *k, *stride, *pad)?,
                Layer::AvgPool { k, stride, pad } => tape.avg_pool2d(v, *k, *stride, *pad)?,
                Layer::Dropout { p } => tape.dropout(v, *p, ctx.train, ctx.rng)?,
                Layer::Linear(l) => l.forward(tape, v)?,
                Layer::Flatten => tape.flatten(v)?,
            };
        }
        Ok(v)
    }

    pub fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        stack_out_shape(&self.defs, input)
    }

    pub fn param_count(&self) -> usize {
        stack_param_count(&self.defs)
    }

    /// Batch-norm instances with their checkpoint name prefixes.
    pub fn bn_layers(&self) -> Vec<(String, Rc<BatchNormLayer<S>>)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Bn(bn) => Some((format!("{}.{i}.bn", self.prefix), bn.clone())),
                _ => None,
            })
            .collect()
    }
}

/// Materializes a layer plan against the registry. Parameter names derive
/// from `prefix` and the layer index, so two stacks built from the same plan
/// under the same prefix share storage (weight tying).
pub fn build_stack<S: Scalar>(
    defs: &[LayerDef],
    registry: &mut ParamRegistry<S>,
    prefix: &str,
) -> Result<LayerStack<S>> {
    let mut layers = Vec::with_capacity(defs.len());
    for (i, def) in defs.iter().enumerate() {
        let layer = match def {
            LayerDef::Conv(spec) => {
                let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
                let weight = registry.get_or_create(
                    &format!("{prefix}.{i}.conv.weight"),
                    &[spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w],
                    InitKind::HeNormal { fan_in },
                )?;
                let bias = registry.get_or_create(
                    &format!("{prefix}.{i}.conv.bias"),
                    &[spec.out_channels],
                    InitKind::Zero,
                )?;
                Layer::Conv(Conv2dLayer {
                    spec: *spec,
                    weight,
                    bias,
                })
            }
            LayerDef::Bn { channels } => {
                let gamma = registry.get_or_create(
                    &format!("{prefix}.{i}.bn.gamma"),
                    &[*channels],
                    InitKind::One,
                )?;
                let beta = registry.get_or_create(
                    &format!("{prefix}.{i}.bn.beta"),
                    &[*channels],
                    InitKind::Zero,
                )?;
                Layer::Bn(Rc::new(BatchNormLayer {
                    gamma,
                    beta,
                    running_mean: RefCell::new(vec![S::ZERO; *channels]),
                    running_var: RefCell::new(vec![S::ONE; *channels]),
                }))
            }
            LayerDef::Relu => Layer::Relu,
            LayerDef::MaxPool { k, stride, pad } => Layer::MaxPool {
                k: *k,
                stride: *stride,
                pad: *pad,
            },
            LayerDef::AvgPool { k, stride, pad } => Layer::AvgPool {
                k: *k,
                stride: *stride,
                pad: *pad,
            },
            LayerDef::Dropout { p } => Layer::Dropout { p: *p },
            LayerDef::Linear { in_dim, out_dim } => {
                let weight = registry.get_or_create(
                    &format!("{prefix}.{i}.fc.weight"),
                    &[*out_dim, *in_dim],
                    InitKind::HeNormal { fan_in: *in_dim },
                )?;
                let bias = registry.get_or_create(
                    &format!("{prefix}.{i}.fc.bias"),
                    &[*out_dim],
                    InitKind::Zero,
                )?;
                Layer::Linear(LinearLayer { weight, bias })
            }
            LayerDef::Flatten => Layer::Flatten,
        };
        layers.push(layer);
    }
    Ok(LayerStack {
        defs: defs.to_vec(),
        layers,
        prefix: prefix.to_string(),
    })
}

/// conv -> batch norm -> ReLU under a tie key. Reusing the key reuses the
/// same parameter storage.
pub fn make_cfilter_block<S: Scalar>(
    spec: ConvSpec,
    registry: &mut ParamRegistry<S>,
    tie_key: &str,
) -> Result<LayerStack<S>> {
    let defs = cfilter_defs(spec);
    build_stack(&defs, registry, tie_key)
}

pub fn cfilter_defs(spec: ConvSpec) -> Vec<LayerDef> {
    vec![
        LayerDef::Conv(spec),
        LayerDef::Bn {
            channels: spec.out_channels,
        },
        LayerDef::Relu,
    ]
}
