//! The full two-branch multi-scale re-identification network.
//!
//! Both branches share every parameter, so the model holds one tower and
//! applies it to each image of a pair. Stream stacks follow the published
//! filter table; `channel_scale` shrinks every channel count uniformly for
//! CPU-feasible ("desk") configurations while keeping the topology.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    build_stack, cfilter_defs, stack_out_shape, stack_param_count, BatchNormLayer, ConvSpec,
    ForwardCtx, LayerDef, LayerStack,
};
use crate::param::{InitKind, ParamRef, ParamRegistry};
use crate::tensor::{Scalar, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_HEIGHT: usize = 160;
pub const INPUT_WIDTH: usize = 60;
pub const EMBED_DROPOUT: f64 = 0.3;
pub const FUSION_STREAMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DifferenceMode {
    Squared,
    Plain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamVariant {
    MuDeep,
    InceptionA,
    InceptionB,
    InceptionAPlusB,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub channel_scale: f64,
    pub embedding_dim: usize,
    pub num_identities: usize,
    pub difference_mode: DifferenceMode,
    pub use_fusion: bool,
    pub use_classnet: bool,
    pub stream_variant: StreamVariant,
    /// Dropout ratio on the embedding (train mode only).
    pub dropout: f64,
}

impl ModelConfig {
    pub fn paper_exact(num_identities: usize) -> Self {
        ModelConfig {
            channel_scale: 1.0,
            embedding_dim: 4096,
            num_identities,
            difference_mode: DifferenceMode::Squared,
            use_fusion: true,
            use_classnet: true,
            stream_variant: StreamVariant::MuDeep,
            dropout: EMBED_DROPOUT,
        }
    }

    /// Quarter channel widths, 256-D embedding: trainable on one CPU core.
    pub fn desk(num_identities: usize) -> Self {
        ModelConfig {
            channel_scale: 0.25,
            embedding_dim: 256,
            ..Self::paper_exact(num_identities)
        }
    }

    /// Scales a table channel count; the result must be a positive integer.
    pub fn scaled(&self, channels: usize) -> Result<usize> {
        let v = channels as f64 * self.channel_scale;
        let r = v.round();
        if (v - r).abs() > 1e-9 || r < 1.0 {
            return Err(Error::Config(format!(
                "channel_scale {} turns {channels} channels into non-integer {v}",
                self.channel_scale
            )));
        }
        Ok(r as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_scale <= 0.0 || self.channel_scale > 1.0 {
            return Err(Error::Config(format!(
                "channel_scale {} outside (0, 1]",
                self.channel_scale
            )));
        }
        if self.embedding_dim < 1 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout ratio {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.use_classnet && self.num_identities < 2 {
            return Err(Error::Config(
                "classification subnet requires at least 2 identities".into(),
            ));
        }
        for c in [16, 24, 48, 56, 64, 96, 128, 256] {
            self.scaled(c)?;
        }
        Ok(())
    }
}

/// Preprocess: two C-filter blocks (no padding) then a halving max-pool.
pub fn build_preprocess(cfg: &ModelConfig) -> Result<Vec<LayerDef>> {
    let c48 = cfg.scaled(48)?;
    let c96 = cfg.scaled(96)?;
    let mut defs = cfilter_defs(ConvSpec::no_pad(c48, 3, 3, INPUT_CHANNELS, 1));
    defs.extend(cfilter_defs(ConvSpec::no_pad(c96, 3, 3, c48, 1)));
    defs.push(LayerDef::MaxPool {
        k: 3,
        stride: 2,
        pad: 1,
    });
    Ok(defs)
}

/// Multi-scale-A: four streams with 1x1 / 3x3 / cascaded 3x3 receptive
/// fields over the preprocessed maps; outputs are channel-concatenated.
pub fn build_multiscale_a(cfg: &ModelConfig) -> Result<Vec<Vec<LayerDef>>> {
    let c96 = cfg.scaled(96)?;
    let c24 = cfg.scaled(24)?;
    let c16 = cfg.scaled(16)?;
    let tp = ConvSpec::with_table_padding;
    let mut s1 = vec![LayerDef::AvgPool {
        k: 3,
        stride: 1,
        pad: 1,
    }];
    s1.extend(cfilter_defs(tp(c24, 1, 1, c96, 1)));
    let s2 = cfilter_defs(tp(c24, 1, 1, c96, 1));
    let mut s3 = cfilter_defs(tp(c16, 1, 1, c96, 1));
    s3.extend(cfilter_defs(tp(c24, 3, 3, c16, 1)));
    let mut s4 = cfilter_defs(tp(c16, 1, 1, c96, 1));
    s4.extend(cfilter_defs(tp(c24, 3, 3, c16, 1)));
    s4.extend(cfilter_defs(tp(c24, 3, 3, c24, 1)));
    Ok(vec![s1, s2, s3, s4])
}

/// Reduction: three stride-2 streams halving the spatial extent.
pub fn build_reduction(cfg: &ModelConfig) -> Result<Vec<Vec<LayerDef>>> {
    let c96 = cfg.scaled(96)?;
    let c48 = cfg.scaled(48)?;
    let c56 = cfg.scaled(56)?;
    let c64 = cfg.scaled(64)?;
    let tp = ConvSpec::with_table_padding;
    let s1 = vec![LayerDef::MaxPool {
        k: 3,
        stride: 2,
        pad: 1,
    }];
    let s2 = cfilter_defs(tp(c96, 3, 3, c96, 2));
    let mut s3 = cfilter_defs(tp(c48, 1, 1, c96, 1));
    s3.extend(cfilter_defs(tp(c56, 3, 3, c48, 1)));
    s3.extend(cfilter_defs(tp(c64, 3, 3, c56, 2)));
    Ok(vec![s1, s2, s3])
}

/// Multi-scale-B: four streams with 3x3 filters factorized into 1x3 / 3x1
/// pairs; every stream keeps the 39x14 extent and full channel width.
/// The pooling stream runs at stride 1 so the four outputs stay fusible.
pub fn build_multiscale_b(cfg: &ModelConfig) -> Result<Vec<Vec<LayerDef>>> {
    let c256 = cfg.scaled(256)?;
    let c128 = cfg.scaled(128)?;
    let c64 = cfg.scaled(64)?;
    let tp = ConvSpec::with_table_padding;
    let s1 = cfilter_defs(tp(c256, 1, 1, c256, 1));
    let mut s2 = cfilter_defs(tp(c64, 1, 1, c256, 1));
    s2.extend(cfilter_defs(tp(c128, 1, 3, c64, 1)));
    s2.extend(cfilter_defs(tp(c256, 3, 1, c128, 1)));
    let mut s3 = cfilter_defs(tp(c64, 1, 1, c256, 1));
    s3.extend(cfilter_defs(tp(c64, 1, 3, c64, 1)));
    s3.extend(cfilter_defs(tp(c128, 3, 1, c64, 1)));
    s3.extend(cfilter_defs(tp(c128, 1, 3, c128, 1)));
    s3.extend(cfilter_defs(tp(c256, 3, 1, c128, 1)));
    let mut s4 = vec![LayerDef::AvgPool {
        k: 3,
        stride: 1,
        pad: 1,
    }];
    s4.extend(cfilter_defs(tp(c256, 1, 1, c256, 1)));
    Ok(vec![s1, s2, s3, s4])
}

/// Which stages a variant assembles and how the embedding is fed.
#[derive(Clone, Debug)]
pub struct ModelPlan {
    pub preprocess: Vec<LayerDef>,
    pub msa: Vec<Vec<LayerDef>>,
    pub reduction: Vec<Vec<LayerDef>>,
    pub msb: Vec<Vec<LayerDef>>,
    /// Learned per-channel fusion of the four B streams (full model only);
    /// otherwise B streams (or the reduction output) are concatenated.
    pub fused: FusionKind,
    pub embed: Vec<LayerDef>,
    pub ver_head: Vec<LayerDef>,
    pub classifier: Option<Vec<LayerDef>>,
    pub embed_in_channels: usize,
    pub embed_in_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Learned alpha, shape [4, C].
    Saliency,
    /// Plain stream sum (alpha fixed at 1, not learnable).
    UnitSum,
    /// Channel concatenation of the final stage's streams.
    Concat,
    /// No multi-stream final stage; the previous output feeds the embedding.
    None,
}

pub fn build_plan(cfg: &ModelConfig) -> Result<ModelPlan> {
    cfg.validate()?;
    let preprocess = build_preprocess(cfg)?;
    let input = vec![1, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH];
    let pre_out = stack_out_shape(&preprocess, &input)?;

    let (msa, with_msa) = match cfg.stream_variant {
        StreamVariant::InceptionB => (Vec::new(), false),
        _ => (build_multiscale_a(cfg)?, true),
    };
    let mut cur = pre_out.clone();
    if with_msa {
        let outs: Vec<Vec<usize>> = msa
            .iter()
            .map(|s| stack_out_shape(s, &cur))
            .collect::<Result<_>>()?;
        let c_sum: usize = outs.iter().map(|s| s[1]).sum();
        cur = vec![cur[0], c_sum, outs[0][2], outs[0][3]];
    }

    let reduction = build_reduction(cfg)?;
    let red_outs: Vec<Vec<usize>> = reduction
        .iter()
        .map(|s| stack_out_shape(s, &cur))
        .collect::<Result<_>>()?;
    let c_red: usize = red_outs.iter().map(|s| s[1]).sum();
    cur = vec![cur[0], c_red, red_outs[0][2], red_outs[0][3]];

    let (msb, fused) = match cfg.stream_variant {
        StreamVariant::MuDeep => (
            build_multiscale_b(cfg)?,
            if cfg.use_fusion {
                FusionKind::Saliency
            } else {
                FusionKind::UnitSum
            },
        ),
        StreamVariant::InceptionB | StreamVariant::InceptionAPlusB => {
            (build_multiscale_b(cfg)?, FusionKind::Concat)
        }
        StreamVariant::InceptionA => (Vec::new(), FusionKind::None),
    };
    let embed_in_shape = if msb.is_empty() {
        cur.clone()
    } else {
        let outs: Vec<Vec<usize>> = msb
            .iter()
            .map(|s| stack_out_shape(s, &cur))
            .collect::<Result<_>>()?;
        for o in &outs {
            if o[2..] != outs[0][2..] || o[1] != outs[0][1] {
                return Err(Error::Shape(format!(
                    "final-stage streams disagree: {:?} vs {:?}",
                    o, outs[0]
                )));
            }
        }
        match fused {
            FusionKind::Concat => {
                let c: usize = outs.iter().map(|s| s[1]).sum();
                vec![cur[0], c, outs[0][2], outs[0][3]]
            }
            _ => outs[0].clone(),
        }
    };
    let embed_in: usize = embed_in_shape[1..].iter().product();
    let embed = vec![
        LayerDef::Flatten,
        LayerDef::Linear {
            in_dim: embed_in,
            out_dim: cfg.embedding_dim,
        },
        LayerDef::Bn {
            channels: cfg.embedding_dim,
        },
        LayerDef::Relu,
        LayerDef::Dropout { p: cfg.dropout },
    ];
    let ver_head = vec![
        LayerDef::Linear {
            in_dim: cfg.embedding_dim,
            out_dim: 512,
        },
        LayerDef::Bn { channels: 512 },
        LayerDef::Relu,
        LayerDef::Linear {
            in_dim: 512,
            out_dim: 2,
        },
    ];
    let classifier = if cfg.use_classnet {
        Some(vec![LayerDef::Linear {
            in_dim: cfg.embedding_dim,
            out_dim: cfg.num_identities,
        }])
    } else {
        None
    };
    Ok(ModelPlan {
        preprocess,
        msa,
        reduction,
        msb,
        fused,
        embed,
        ver_head,
        classifier,
        embed_in_channels: embed_in_shape[1],
        embed_in_shape,
    })
}

pub struct MuDeep<S: Scalar> {
    pub cfg: ModelConfig,
    pub plan: ModelPlan,
    pub registry: ParamRegistry<S>,
    preprocess: LayerStack<S>,
    msa: Vec<LayerStack<S>>,
    reduction: Vec<LayerStack<S>>,
    msb: Vec<LayerStack<S>>,
    pub alpha: Option<ParamRef<S>>,
    embed: LayerStack<S>,
    ver_head: LayerStack<S>,
    classifier: Option<LayerStack<S>>,
}

pub struct FeatureOutput {
    pub embedding: Var,
    /// Final-stage stream maps (full model only).
    pub streams: Vec<Var>,
    pub fused: Var,
}

pub struct PairOutput {
    pub ver_logits: Var,
    pub cls_a: Option<Var>,
    pub cls_b: Option<Var>,
    pub emb_a: Var,
    pub emb_b: Var,
    pub streams_a: Vec<Var>,
    pub streams_b: Vec<Var>,
    pub fused_a: Var,
    pub fused_b: Var,
}

impl<S: Scalar> MuDeep<S> {
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        let plan = build_plan(&cfg)?;
        let mut registry = ParamRegistry::new();
        let preprocess = build_stack(&plan.preprocess, &mut registry, "preprocess")?;
        let msa = plan
            .msa
            .iter()
            .enumerate()
            .map(|(i, defs)| build_stack(defs, &mut registry, &format!("msa.s{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let reduction = plan
            .reduction
            .iter()
            .enumerate()
            .map(|(i, defs)| build_stack(defs, &mut registry, &format!("reduction.s{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let msb = plan
            .msb
            .iter()
            .enumerate()
            .map(|(i, defs)| build_stack(defs, &mut registry, &format!("msb.s{}", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        let alpha = if plan.fused == FusionKind::Saliency {
            Some(registry.create(
                "fusion.alpha",
                &[FUSION_STREAMS, plan.embed_in_channels],
                InitKind::Const(0.25),
            )?)
        } else {
            None
        };
        let embed = build_stack(&plan.embed, &mut registry, "embed")?;
        let ver_head = build_stack(&plan.ver_head, &mut registry, "verify")?;
        let classifier = plan
            .classifier
            .as_ref()
            .map(|defs| build_stack(defs, &mut registry, "classifier"))
            .transpose()?;
        Ok(MuDeep {
            cfg,
            plan,
            registry,
            preprocess,
            msa,
            reduction,
            msb,
            alpha,
            embed,
            ver_head,
            classifier,
        })
    }

    pub fn init_parameters(&self, seed: u64) {
        self.registry.init_parameters(seed);
    }

    /// One branch: image tensor to embedding, exposing intermediates.
    pub fn forward_features(
        &self,
        tape: &mut Tape<S>,
        x: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<FeatureOutput> {
        let mut v = self.preprocess.forward(tape, x, ctx)?;
        if !self.msa.is_empty() {
            let outs = self
                .msa
                .iter()
                .map(|s| s.forward(tape, v, ctx))
                .collect::<Result<Vec<_>>>()?;
            v = tape.channel_concat(&outs)?;
        }
        let red_outs = self
            .reduction
            .iter()
            .map(|s| s.forward(tape, v, ctx))
            .collect::<Result<Vec<_>>>()?;
        v = tape.channel_concat(&red_outs)?;
        let (streams, fused) = if self.msb.is_empty() {
            (Vec::new(), v)
        } else {
            let outs = self
                .msb
                .iter()
                .map(|s| s.forward(tape, v, ctx))
                .collect::<Result<Vec<_>>>()?;
            let fused = match self.plan.fused {
                FusionKind::Saliency => {
                    let a = tape.param(self.alpha.as_ref().expect("alpha present"));
                    tape.saliency_fuse(&outs, a)?
                }
                FusionKind::UnitSum => {
                    let terms: Vec<(S, Var)> = outs.iter().map(|&v| (S::ONE, v)).collect();
                    tape.weighted_sum(&terms)?
                }
                FusionKind::Concat => tape.channel_concat(&outs)?,
                FusionKind::None => unreachable!("msb non-empty"),
            };
            (outs, fused)
        };
        let embedding = self.embed.forward(tape, fused, ctx)?;
        Ok(FeatureOutput {
            embedding,
            streams,
            fused,
        })
    }

    /// Elementwise difference of the two branch embeddings.
    pub fn feature_difference(&self, tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
        let d = tape.sub(a, b)?;
        match self.cfg.difference_mode {
            DifferenceMode::Squared => tape.mul(d, d),
            DifferenceMode::Plain => Ok(d),
        }
    }

    pub fn verification_head(&self, tape: &mut Tape<S>, d: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        self.ver_head.forward(tape, d, ctx)
    }

    pub fn classification_head(
        &self,
        tape: &mut Tape<S>,
        embedding: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let cls = self.classifier.as_ref().ok_or_else(|| {
            Error::Config("classification subnet is disabled in this configuration".into())
        })?;
        cls.forward(tape, embedding, ctx)
    }

    pub fn forward_pair(
        &self,
        tape: &mut Tape<S>,
        imgs_a: Tensor<S>,
        imgs_b: Tensor<S>,
        ctx: &mut ForwardCtx,
    ) -> Result<PairOutput> {
        let xa = tape.constant(imgs_a);
        let xb = tape.constant(imgs_b);
        let fa = self.forward_features(tape, xa, ctx)?;
        let fb = self.forward_features(tape, xb, ctx)?;
        let d = self.feature_difference(tape, fa.embedding, fb.embedding)?;
        let ver_logits = self.verification_head(tape, d, ctx)?;
        let (cls_a, cls_b) = if self.classifier.is_some() {
            (
                Some(self.classification_head(tape, fa.embedding, ctx)?),
                Some(self.classification_head(tape, fb.embedding, ctx)?),
            )
        } else {
            (None, None)
        };
        Ok(PairOutput {
            ver_logits,
            cls_a,
            cls_b,
            emb_a: fa.embedding,
            emb_b: fb.embedding,
            streams_a: fa.streams,
            streams_b: fb.streams,
            fused_a: fa.fused,
            fused_b: fb.fused,
        })
    }

    /// Deterministic eval-mode embeddings for a batch of images.
    pub fn embed_eval(&self, imgs: Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut rng = seed_rng(0);
        let mut ctx = ForwardCtx {
            train: false,
            rng: &mut rng,
        };
        let x = tape.constant(imgs);
        let f = self.forward_features(&mut tape, x, &mut ctx)?;
        Ok(tape.value(f.embedding).clone())
    }

    /// Eval-mode verification logits from precomputed embeddings.
    pub fn verify_from_embeddings(&self, emb_a: Tensor<S>, emb_b: Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let mut rng = seed_rng(0);
        let mut ctx = ForwardCtx {
            train: false,
            rng: &mut rng,
        };
        let a = tape.constant(emb_a);
        let b = tape.constant(emb_b);
        let d = self.feature_difference(&mut tape, a, b)?;
        let logits = self.verification_head(&mut tape, d, &mut ctx)?;
        Ok(tape.value(logits).clone())
    }

    /// Every batch-norm instance with its checkpoint name prefix.
    pub fn bn_layers(&self) -> Vec<(String, std::rc::Rc<BatchNormLayer<S>>)> {
        let mut out = self.preprocess.bn_layers();
        for s in self
            .msa
            .iter()
            .chain(&self.reduction)
            .chain(&self.msb)
            .chain(std::iter::once(&self.embed))
            .chain(std::iter::once(&self.ver_head))
            .chain(self.classifier.iter())
        {
            out.extend(s.bn_layers());
        }
        out
    }

    /// Sets the frozen flag on every parameter matching the predicate.
    pub fn set_frozen(&self, frozen: bool, matches: impl Fn(&str) -> bool) {
        for (name, p) in self.registry.iter() {
            if matches(name) {
                p.borrow_mut().frozen = frozen;
            }
        }
    }
}

pub fn seed_rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct InspectRow {
    pub stage: String,
    pub output_shape: Vec<usize>,
    pub param_count: usize,
}

/// Layer-by-layer shape and parameter table, computed symbolically
/// (no weights are allocated, so the paper-exact scale is instant).
pub fn describe(cfg: &ModelConfig, batch: usize) -> Result<Vec<InspectRow>> {
    let plan = build_plan(cfg)?;
    let mut rows = Vec::new();
    let input = vec![batch, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH];
    rows.push(InspectRow {
        stage: "input".into(),
        output_shape: input.clone(),
        param_count: 0,
    });
    let pre_out = stack_out_shape(&plan.preprocess, &input)?;
    rows.push(InspectRow {
        stage: "preprocess".into(),
        output_shape: pre_out.clone(),
        param_count: stack_param_count(&plan.preprocess),
    });
    let mut cur = pre_out;
    if !plan.msa.is_empty() {
        let outs: Vec<Vec<usize>> = plan
            .msa
            .iter()
            .map(|s| stack_out_shape(s, &cur))
            .collect::<Result<_>>()?;
        let c: usize = outs.iter().map(|s| s[1]).sum();
        cur = vec![cur[0], c, outs[0][2], outs[0][3]];
        rows.push(InspectRow {
            stage: "multi-scale-A".into(),
            output_shape: cur.clone(),
            param_count: plan.msa.iter().map(|s| stack_param_count(s)).sum(),
        });
    }
    let outs: Vec<Vec<usize>> = plan
        .reduction
        .iter()
        .map(|s| stack_out_shape(s, &cur))
        .collect::<Result<_>>()?;
    let c: usize = outs.iter().map(|s| s[1]).sum();
    cur = vec![cur[0], c, outs[0][2], outs[0][3]];
    rows.push(InspectRow {
        stage: "reduction".into(),
        output_shape: cur.clone(),
        param_count: plan.reduction.iter().map(|s| stack_param_count(s)).sum(),
    });
    let mut fused_shape = plan.embed_in_shape.clone();
    fused_shape[0] = batch;
    if !plan.msb.is_empty() {
        let outs: Vec<Vec<usize>> = plan
            .msb
            .iter()
            .map(|s| stack_out_shape(s, &cur))
            .collect::<Result<_>>()?;
        for (i, o) in outs.iter().enumerate() {
            rows.push(InspectRow {
                stage: format!("multi-scale-B stream {}", i + 1),
                output_shape: o.clone(),
                param_count: stack_param_count(&plan.msb[i]),
            });
        }
        let fusion_params = match plan.fused {
            FusionKind::Saliency => FUSION_STREAMS * plan.embed_in_channels,
            _ => 0,
        };
        rows.push(InspectRow {
            stage: match plan.fused {
                FusionKind::Saliency => "saliency fusion".into(),
                FusionKind::UnitSum => "stream sum".into(),
                _ => "stream concat".into(),
            },
            output_shape: fused_shape.clone(),
            param_count: fusion_params,
        });
    }
    let emb_out = stack_out_shape(&plan.embed, &fused_shape)?;
    rows.push(InspectRow {
        stage: "embedding".into(),
        output_shape: emb_out.clone(),
        param_count: stack_param_count(&plan.embed),
    });
    let ver_out = stack_out_shape(&plan.ver_head, &emb_out)?;
    rows.push(InspectRow {
        stage: "verification head".into(),
        output_shape: ver_out,
        param_count: stack_param_count(&plan.ver_head),
    });
    if let Some(cls) = &plan.classifier {
        let cls_out = stack_out_shape(cls, &emb_out)?;
        rows.push(InspectRow {
            stage: "classification head".into(),
            output_shape: cls_out,
            param_count: stack_param_count(cls),
        });
    }
    Ok(rows)
}
