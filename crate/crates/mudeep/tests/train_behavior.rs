//! Behavior of the pair sampler and the three-stage schedule: pair
//! composition, stage-2 freezing, branch equality after updates, and
//! bit-for-bit run determinism.

use mudeep::data::RawImage;
use mudeep::layers::ForwardCtx;
use mudeep::model::{seed_rng, ModelConfig, MuDeep, INPUT_HEIGHT, INPUT_WIDTH};
use mudeep::train::{
    build_epoch, materialize_batch, train, PairSpec, TrainConfig, TrainPool,
};
use mudeep::autodiff::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(num_identities: usize) -> ModelConfig {
    let mut cfg = ModelConfig::paper_exact(num_identities);
    cfg.channel_scale = 0.125;
    cfg.embedding_dim = 32;
    cfg
}

/// In-memory pool: `ids` identities x `per_cam` images per camera, with
/// distinct random content per image.
fn make_pool(ids: usize, per_cam: usize, seed: u64) -> TrainPool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = TrainPool {
        images: Vec::new(),
        identity: Vec::new(),
        camera: Vec::new(),
        label: Vec::new(),
        mean: [0.5; 3],
        num_identities: ids,
    };
    for id in 0..ids {
        for cam in 0..2 {
            for _ in 0..per_cam {
                let mut img = RawImage::new(INPUT_HEIGHT, INPUT_WIDTH);
                for v in &mut img.data {
                    *v = rng.random_range(0.0..1.0f32);
                }
                pool.images.push(img);
                pool.identity.push(id);
                pool.camera.push(cam);
                pool.label.push(id);
            }
        }
    }
    pool
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        stage_iters: (2, 2, 2),
        aug_copies: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn epoch_has_all_positives_and_sampled_negatives() {
    let pool = make_pool(3, 2, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs = build_epoch(&pool, 2.0, &mut rng).unwrap();
    // positives: every cross-camera combination per identity = 3 * 2*2
    let pos: Vec<&PairSpec> = pairs.iter().filter(|p| p.same).collect();
    let neg: Vec<&PairSpec> = pairs.iter().filter(|p| !p.same).collect();
    assert_eq!(pos.len(), 12);
    assert_eq!(neg.len(), 24);
    for p in &pairs {
        assert_eq!(pool.camera[p.a], 0);
        assert_eq!(pool.camera[p.b], 1);
        assert_eq!(p.same, pool.identity[p.a] == pool.identity[p.b]);
    }
    // every positive combination appears exactly once
    let mut seen: Vec<(usize, usize)> = pos.iter().map(|p| (p.a, p.b)).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 12);
}

#[test]
fn single_camera_pool_is_rejected() {
    let mut pool = make_pool(3, 2, 3);
    pool.camera.iter_mut().for_each(|c| *c = 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(build_epoch(&pool, 2.0, &mut rng).is_err());
}

#[test]
fn materialized_batch_normalizes_by_channel_mean() {
    let mut pool = make_pool(2, 1, 4);
    pool.images[0].data.fill(0.9);
    pool.mean = [0.5, 0.25, 0.75];
    let spec = PairSpec {
        a: 0,
        b: 1,
        same: false,
    };
    let batch = materialize_batch::<f64>(&pool, &[spec]);
    let plane = INPUT_HEIGHT * INPUT_WIDTH;
    let a = batch.imgs_a.data();
    assert!((a[0] - (0.9 - 0.5)).abs() < 1e-6);
    assert!((a[plane] - (0.9 - 0.25)).abs() < 1e-6);
    assert!((a[2 * plane] - (0.9 - 0.75)).abs() < 1e-6);
}

#[test]
fn stage2_only_touches_the_classifier() {
    let pool = make_pool(3, 2, 5);
    let model: MuDeep<f32> = MuDeep::build(tiny_cfg(3)).unwrap();
    model.init_parameters(7);
    let before: Vec<(String, Vec<f32>)> = model
        .registry
        .iter()
        .map(|(n, p)| (n.clone(), p.borrow().value.data().to_vec()))
        .collect();
    let cfg = TrainConfig {
        stage_iters: (0, 3, 0),
        ..tiny_train_cfg()
    };
    train(&model, &pool, &cfg, 0, |_| {}).unwrap();
    let mut classifier_changed = false;
    for (name, want) in &before {
        let now = model.registry.get(name).unwrap().borrow().value.data().to_vec();
        if name.starts_with("classifier") {
            classifier_changed |= now != *want;
        } else {
            assert_eq!(&now, want, "{name} changed during classifier warmup");
        }
    }
    assert!(classifier_changed, "warmup did not move the classifier");
    // the freeze is lifted afterwards
    assert!(model.registry.iter().all(|(_, p)| !p.borrow().frozen));
}

#[test]
fn branches_stay_bitwise_equal_after_training() {
    let pool = make_pool(3, 2, 8);
    let model: MuDeep<f32> = MuDeep::build(tiny_cfg(3)).unwrap();
    model.init_parameters(9);
    train(&model, &pool, &tiny_train_cfg(), 0, |_| {}).unwrap();
    // identical input through both branches of the pair forward
    let batch = materialize_batch::<f32>(
        &pool,
        &[
            PairSpec {
                a: 0,
                b: 0,
                same: true,
            },
            PairSpec {
                a: 3,
                b: 3,
                same: true,
            },
        ],
    );
    let mut tape = Tape::new();
    let mut rng = seed_rng(0);
    let mut ctx = ForwardCtx {
        train: false,
        rng: &mut rng,
    };
    let out = model
        .forward_pair(&mut tape, batch.imgs_a.clone(), batch.imgs_a, &mut ctx)
        .unwrap();
    assert_eq!(
        tape.value(out.emb_a).data(),
        tape.value(out.emb_b).data(),
        "tied branches disagree on the same input"
    );
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let run = || {
        let pool = make_pool(3, 2, 10);
        let model: MuDeep<f32> = MuDeep::build(tiny_cfg(3)).unwrap();
        model.init_parameters(11);
        let mut rows = Vec::new();
        train(&model, &pool, &tiny_train_cfg(), 0, |r| {
            rows.push(r.to_csv());
        })
        .unwrap();
        (rows, model)
    };
    let (rows_a, model_a) = run();
    let (rows_b, model_b) = run();
    assert_eq!(rows_a, rows_b);
    assert_eq!(rows_a.len(), 6);
    for (name, p) in model_a.registry.iter() {
        let b = model_b.registry.get(name).unwrap();
        assert_eq!(
            p.borrow().value.data(),
            b.borrow().value.data(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn classnet_free_run_skips_the_warmup_stage() {
    let pool = make_pool(3, 2, 12);
    let mut cfg = tiny_cfg(3);
    cfg.use_classnet = false;
    let model: MuDeep<f32> = MuDeep::build(cfg).unwrap();
    model.init_parameters(13);
    let mut stages = Vec::new();
    train(&model, &pool, &tiny_train_cfg(), 0, |r| stages.push(r.stage)).unwrap();
    // stage 2 contributes no iterations without a classifier
    assert_eq!(stages, vec![1, 1, 3, 3]);
}

#[test]
fn joint_loss_gradient_is_the_weighted_sum_of_parts() {
    #[derive(Clone, Copy)]
    enum Objective {
        Ver,
        Cls,
        Joint { w_cls: f64, w_ver: f64 },
    }
    let pool = make_pool(3, 1, 14);
    let model: MuDeep<f64> = MuDeep::build(tiny_cfg(3)).unwrap();
    model.init_parameters(15);
    let batch = materialize_batch::<f64>(
        &pool,
        &[
            PairSpec {
                a: 0,
                b: 2,
                same: false,
            },
            PairSpec {
                a: 1,
                b: 1,
                same: true,
            },
        ],
    );
    let grads_of = |obj: Objective| -> Vec<f64> {
        model.registry.zero_grad();
        let mut tape = Tape::new();
        let mut rng = seed_rng(99); // identical dropout draws per evaluation
        let mut ctx = ForwardCtx {
            train: true,
            rng: &mut rng,
        };
        let out = model
            .forward_pair(&mut tape, batch.imgs_a.clone(), batch.imgs_b.clone(), &mut ctx)
            .unwrap();
        let lv = tape.softmax_cross_entropy(out.ver_logits, &[0, 1]).unwrap();
        let la = tape
            .softmax_cross_entropy(out.cls_a.unwrap(), &batch.labels_a)
            .unwrap();
        let lb = tape
            .softmax_cross_entropy(out.cls_b.unwrap(), &batch.labels_b)
            .unwrap();
        let lc = tape.weighted_sum(&[(1.0, la), (1.0, lb)]).unwrap();
        let total = match obj {
            Objective::Ver => lv,
            Objective::Cls => lc,
            Objective::Joint { w_cls, w_ver } => {
                tape.weighted_sum(&[(w_cls, lc), (w_ver, lv)]).unwrap()
            }
        };
        tape.backward(total).unwrap();
        model
            .registry
            .iter()
            .flat_map(|(_, p)| p.borrow().grad.data().to_vec())
            .collect()
    };
    let (w_cls, w_ver) = (1.0, 0.5);
    let g_ver = grads_of(Objective::Ver);
    let g_cls = grads_of(Objective::Cls);
    let g_joint = grads_of(Objective::Joint { w_cls, w_ver });
    for ((&j, &c), &v) in g_joint.iter().zip(&g_cls).zip(&g_ver) {
        let want = w_cls * c + w_ver * v;
        // absolute floor: coordinates with ~1e-13 gradients (a bias feeding
        // straight into batch norm has zero true sensitivity) are pure
        // rounding noise on both sides
        assert!(
            (j - want).abs() < 1e-9 + 1e-9 * j.abs().max(want.abs()),
            "joint gradient {j:e} != {w_cls}*{c:e} + {w_ver}*{v:e}"
        );
    }
}

#[test]
fn aug_copies_multiply_the_pool() {
    // TrainPool::build consumes a Dataset, exercised via the synthetic corpus
    let dir = tempfile::tempdir().unwrap();
    let manifest = mudeep::data::synth_generate(2, 2, 0, dir.path()).unwrap();
    let dataset = mudeep::data::Dataset::load(&manifest).unwrap();
    assert_eq!(dataset.images.len(), 8);
    let pool = TrainPool::build(&dataset, 3, 0).unwrap();
    assert_eq!(pool.len(), 24);
    assert_eq!(pool.num_identities, 2);
}
