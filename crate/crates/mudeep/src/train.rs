//! Pair sampling, translation augmentation, the three-stage schedule, and
//! plain SGD with step decay.
//!
//! Stage 1 trains the verification loss alone; stage 2 attaches the
//! classifier and freezes everything else; stage 3 optimizes the joint loss
//! with the classification term weighted higher.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::data::{channel_mean, shift_image, Dataset, RawImage};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::{MuDeep, INPUT_HEIGHT, INPUT_WIDTH};
use crate::tensor::{Scalar, Tensor};

/// Verification class indices: 0 = different persons, 1 = same person.
pub const LABEL_DIFFERENT: usize = 0;
pub const LABEL_SAME: usize = 1;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub neg_pos_ratio: f64,
    pub aug_copies: usize,
    pub stage_iters: (usize, usize, usize),
    pub cls_loss_weight: f64,
    pub ver_loss_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr0: 0.001,
            decay_every: 50_000,
            decay_factor: 0.1,
            neg_pos_ratio: 2.0,
            aug_copies: 5,
            stage_iters: (600, 100, 300),
            cls_loss_weight: 1.0,
            ver_loss_weight: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classnet: bool) -> Result<()> {
        if self.batch_size == 0
            || self.lr0 <= 0.0
            || self.decay_every == 0
            || self.decay_factor <= 0.0
            || self.neg_pos_ratio <= 0.0
            || self.aug_copies == 0
            || self.cls_loss_weight <= 0.0
            || self.ver_loss_weight <= 0.0
        {
            return Err(Error::Config("train config values must be positive".into()));
        }
        if classnet && self.stage_iters.2 > 0 && self.cls_loss_weight <= self.ver_loss_weight {
            return Err(Error::Config(format!(
                "stage 3 requires cls_loss_weight > ver_loss_weight ({} vs {})",
                self.cls_loss_weight, self.ver_loss_weight
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((iteration / self.decay_every) as i32)
    }
}

/// Random 2D translation within +/- 5% of each extent, edge-replicated fill.
pub fn augment_translate(img: &RawImage, rng: &mut ChaCha8Rng) -> RawImage {
    let max_dy = (0.05 * img.h as f64).floor() as isize;
    let max_dx = (0.05 * img.w as f64).floor() as isize;
    let dy = rng.random_range(-(max_dy as i64)..=max_dy as i64) as isize;
    let dx = rng.random_range(-(max_dx as i64)..=max_dx as i64) as isize;
    shift_image(img, dy, dx)
}

/// Training pool: original images plus translated copies, with per-channel
/// normalization mean and dense identity labels.
pub struct TrainPool {
    pub images: Vec<RawImage>,
    pub identity: Vec<usize>,
    pub camera: Vec<usize>,
    /// Dense label (0..num_identities) per pool image.
    pub label: Vec<usize>,
    pub mean: [f64; 3],
    pub num_identities: usize,
}

impl TrainPool {
    /// Augments every original to `aug_copies` total variants and computes
    /// the normalization mean over the originals.
    pub fn build(dataset: &Dataset, aug_copies: usize, seed: u64) -> Result<Self> {
        if dataset.identities().len() < 2 {
            return Err(Error::Data(format!(
                "training needs at least 2 identities, got {}",
                dataset.identities().len()
            )));
        }
        let mean = channel_mean(&dataset.images);
        let ids = dataset.identities();
        let label_of: BTreeMap<usize, usize> =
            ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa46_u64);
        let mut pool = TrainPool {
            images: Vec::new(),
            identity: Vec::new(),
            camera: Vec::new(),
            label: Vec::new(),
            mean,
            num_identities: ids.len(),
        };
        for (rec, img) in dataset.records.iter().zip(&dataset.images) {
            debug_assert_eq!((img.h, img.w), (INPUT_HEIGHT, INPUT_WIDTH));
            pool.push(img.clone(), rec.identity, rec.camera, label_of[&rec.identity]);
            for _ in 1..aug_copies {
                let aug = augment_translate(img, &mut rng);
                pool.push(aug, rec.identity, rec.camera, label_of[&rec.identity]);
            }
        }
        Ok(pool)
    }

    fn push(&mut self, img: RawImage, identity: usize, camera: usize, label: usize) {
        self.images.push(img);
        self.identity.push(identity);
        self.camera.push(camera);
        self.label.push(label);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// One image pair by pool index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

/// All cross-camera positive pairs plus `neg_pos_ratio` times as many
/// sampled cross-camera negatives, shuffled.
pub fn build_epoch(pool: &TrainPool, neg_pos_ratio: f64, rng: &mut ChaCha8Rng) -> Result<Vec<PairSpec>> {
    let cam_a: Vec<usize> = (0..pool.len()).filter(|&i| pool.camera[i] == 0).collect();
    let cam_b: Vec<usize> = (0..pool.len()).filter(|&i| pool.camera[i] != 0).collect();
    if cam_a.is_empty() || cam_b.is_empty() {
        return Err(Error::Data(
            "pair sampling needs images in two cameras".into(),
        ));
    }
    let mut pairs = Vec::new();
    for &i in &cam_a {
        for &j in &cam_b {
            if pool.identity[i] == pool.identity[j] {
                pairs.push(PairSpec {
                    a: i,
                    b: j,
                    same: true,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(
            "no positive cross-camera pairs in the dataset".into(),
        ));
    }
    let negatives = (pairs.len() as f64 * neg_pos_ratio).round() as usize;
    let mut made = 0usize;
    while made < negatives {
        let i = cam_a[rng.random_range(0..cam_a.len())];
        let j = cam_b[rng.random_range(0..cam_b.len())];
        if pool.identity[i] == pool.identity[j] {
            continue;
        }
        pairs.push(PairSpec {
            a: i,
            b: j,
            same: false,
        });
        made += 1;
    }
    pairs.shuffle(rng);
    Ok(pairs)
}

/// Materialized batch of normalized image pairs.
pub struct PairBatch<S: Scalar> {
    pub imgs_a: Tensor<S>,
    pub imgs_b: Tensor<S>,
    pub same: Vec<bool>,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
}

/// Streams shuffled epochs of pair specs, rebuilding when exhausted.
pub struct PairSampler {
    epoch: Vec<PairSpec>,
    cursor: usize,
    neg_pos_ratio: f64,
}

impl PairSampler {
    pub fn new(neg_pos_ratio: f64) -> Self {
        PairSampler {
            epoch: Vec::new(),
            cursor: 0,
            neg_pos_ratio,
        }
    }

    pub fn next_specs(
        &mut self,
        pool: &TrainPool,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PairSpec>> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.cursor >= self.epoch.len() {
                self.epoch = build_epoch(pool, self.neg_pos_ratio, rng)?;
                self.cursor = 0;
            }
            out.push(self.epoch[self.cursor]);
            self.cursor += 1;
        }
        Ok(out)
    }

    pub fn next_batch<S: Scalar>(
        &mut self,
        pool: &TrainPool,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<PairBatch<S>> {
        let specs = self.next_specs(pool, batch_size, rng)?;
        Ok(materialize_batch(pool, &specs))
    }
}

pub fn materialize_batch<S: Scalar>(pool: &TrainPool, specs: &[PairSpec]) -> PairBatch<S> {
    let n = specs.len();
    let img_len = 3 * INPUT_HEIGHT * INPUT_WIDTH;
    let mut a = Vec::with_capacity(n * img_len);
    let mut b = Vec::with_capacity(n * img_len);
    let mut same = Vec::with_capacity(n);
    let mut la = Vec::with_capacity(n);
    let mut lb = Vec::with_capacity(n);
    for s in specs {
        a.extend_from_slice(
            crate::data::to_input_tensor::<S>(&pool.images[s.a], &pool.mean).data(),
        );
        b.extend_from_slice(
            crate::data::to_input_tensor::<S>(&pool.images[s.b], &pool.mean).data(),
        );
        same.push(s.same);
        la.push(pool.label[s.a]);
        lb.push(pool.label[s.b]);
    }
    PairBatch {
        imgs_a: Tensor::from_vec(&[n, 3, INPUT_HEIGHT, INPUT_WIDTH], a).expect("sized"),
        imgs_b: Tensor::from_vec(&[n, 3, INPUT_HEIGHT, INPUT_WIDTH], b).expect("sized"),
        same,
        labels_a: la,
        labels_b: lb,
    }
}

/// One plain SGD update: value -= lr * grad on every unfrozen parameter,
/// then grads are cleared.
pub fn sgd_step<S: Scalar>(model: &MuDeep<S>, lr: f64) {
    let lr = S::from_f64(lr);
    for (_, p) in model.registry.iter() {
        let mut p = p.borrow_mut();
        if p.frozen {
            p.zero_grad();
            continue;
        }
        let p = &mut *p;
        let (value, grad) = (&mut p.value, &p.grad);
        for (v, &g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
        p.zero_grad();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    VerificationOnly,
    ClassifierWarmup,
    Joint,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::VerificationOnly => 1,
            Stage::ClassifierWarmup => 2,
            Stage::Joint => 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub iter: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss_ver: f64,
    pub loss_cls: Option<f64>,
    pub acc_ver: f64,
}

pub const METRICS_HEADER: &str = "iter,stage,lr,loss_ver,loss_cls,acc_ver";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            self.stage,
            self.lr,
            self.loss_ver,
            self.loss_cls.map(|v| v.to_string()).unwrap_or_default(),
            self.acc_ver
        )
    }
}

fn batch_losses<S: Scalar>(
    model: &MuDeep<S>,
    tape: &mut Tape<S>,
    batch: &PairBatch<S>,
    ctx: &mut ForwardCtx,
) -> Result<(Var, Option<Var>, f64)> {
    let out = model.forward_pair(tape, batch.imgs_a.clone(), batch.imgs_b.clone(), ctx)?;
    let ver_labels: Vec<usize> = batch
        .same
        .iter()
        .map(|&s| if s { LABEL_SAME } else { LABEL_DIFFERENT })
        .collect();
    let loss_ver = tape.softmax_cross_entropy(out.ver_logits, &ver_labels)?;
    let probs = softmax_rows(tape.value(out.ver_logits));
    let mut correct = 0usize;
    for (r, &lbl) in ver_labels.iter().enumerate() {
        let p_same = probs.data()[r * 2 + LABEL_SAME].to_f64();
        let pred = if p_same > 0.5 { LABEL_SAME } else { LABEL_DIFFERENT };
        if pred == lbl {
            correct += 1;
        }
    }
    let acc = correct as f64 / ver_labels.len() as f64;
    let loss_cls = match (out.cls_a, out.cls_b) {
        (Some(ca), Some(cb)) => {
            let la = tape.softmax_cross_entropy(ca, &batch.labels_a)?;
            let lb = tape.softmax_cross_entropy(cb, &batch.labels_b)?;
            Some(tape.weighted_sum(&[(S::ONE, la), (S::ONE, lb)])?)
        }
        _ => None,
    };
    Ok((loss_ver, loss_cls, acc))
}

/// Runs the three-stage schedule, returning per-iteration metrics and the
/// total iteration count. `start_iter` supports resuming.
pub fn train<S: Scalar>(
    model: &MuDeep<S>,
    pool: &TrainPool,
    cfg: &TrainConfig,
    start_iter: usize,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<usize> {
    cfg.validate(model.cfg.use_classnet)?;
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2545f4914f6cdd1d);
    let mut sampler = PairSampler::new(cfg.neg_pos_ratio);
    let (s1, s2, s3) = cfg.stage_iters;
    let mut global = start_iter;

    let stages: [(Stage, usize); 3] = [
        (Stage::VerificationOnly, s1),
        (Stage::ClassifierWarmup, s2),
        (Stage::Joint, s3),
    ];
    for (stage, iters) in stages {
        if stage == Stage::ClassifierWarmup && !model.cfg.use_classnet {
            continue; // ablation without a classification subnet
        }
        if stage == Stage::ClassifierWarmup {
            model.set_frozen(true, |name| !name.starts_with("classifier"));
        }
        for _ in 0..iters {
            let batch = sampler.next_batch::<S>(pool, cfg.batch_size, &mut sampler_rng)?;
            let lr = cfg.lr_at(global);
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx {
                train: true,
                rng: &mut dropout_rng,
            };
            let (loss_ver, loss_cls, acc_ver) = batch_losses(model, &mut tape, &batch, &mut ctx)?;
            let lv = tape.value(loss_ver).item().to_f64();
            let lc = loss_cls.map(|v| tape.value(v).item().to_f64());
            for (name, v) in [("verification", Some(lv)), ("classification", lc)] {
                if let Some(v) = v {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite {name} loss {v} at iteration {global} (lr {lr})"
                        )));
                    }
                }
            }
            let total = match stage {
                Stage::VerificationOnly => loss_ver,
                Stage::ClassifierWarmup => loss_cls.expect("classifier stage"),
                Stage::Joint => match loss_cls {
                    Some(lc) => tape.weighted_sum(&[
                        (S::from_f64(cfg.cls_loss_weight), lc),
                        (S::from_f64(cfg.ver_loss_weight), loss_ver),
                    ])?,
                    None => loss_ver,
                },
            };
            tape.backward(total)?;
            sgd_step(model, lr);
            global += 1;
            on_row(&MetricsRow {
                iter: global,
                stage: stage.index(),
                lr,
                loss_ver: lv,
                loss_cls: lc,
                acc_ver,
            });
        }
        if stage == Stage::ClassifierWarmup {
            model.set_frozen(false, |_| true);
        }
    }
    Ok(global)
}
