//! Persistence: byte-exact save/load, classifier re-initialization, and
//! rejection of malformed containers.

use mudeep::autodiff::Tape;
use mudeep::checkpoint::{apply_checkpoint, snapshot, Checkpoint};
use mudeep::layers::ForwardCtx;
use mudeep::model::{seed_rng, ModelConfig, MuDeep, INPUT_HEIGHT, INPUT_WIDTH};
use mudeep::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg(num_identities: usize) -> ModelConfig {
    let mut cfg = ModelConfig::paper_exact(num_identities);
    cfg.channel_scale = 0.125;
    cfg.embedding_dim = 32;
    cfg
}

fn rand_images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * 3 * INPUT_HEIGHT * INPUT_WIDTH;
    let v: Vec<f32> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
    Tensor::from_vec(&[n, 3, INPUT_HEIGHT, INPUT_WIDTH], v).unwrap()
}

/// A model whose weights and running statistics are off their init values.
fn trained_ish(seed: u64) -> MuDeep<f32> {
    let model: MuDeep<f32> = MuDeep::build(tiny_cfg(4)).unwrap();
    model.init_parameters(seed);
    let mut tape = Tape::new();
    let mut rng = seed_rng(seed);
    let mut ctx = ForwardCtx {
        train: true,
        rng: &mut rng,
    };
    let x = tape.constant(rand_images(4, seed ^ 1));
    model.forward_features(&mut tape, x, &mut ctx).unwrap();
    model
}

#[test]
fn save_load_forward_is_bitwise_equal() {
    let model = trained_ish(3);
    let mean = [0.41, 0.42, 0.43];
    let bytes = snapshot(&model, &mean, 77, "k = v\n").to_bytes();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.config_text, "k = v\n");

    let fresh: MuDeep<f32> = MuDeep::build(tiny_cfg(4)).unwrap();
    fresh.init_parameters(999); // unrelated init, fully overwritten below
    let (loaded_mean, iteration) = apply_checkpoint(&fresh, &ckpt, false).unwrap();
    assert_eq!(loaded_mean, mean);
    assert_eq!(iteration, 77);

    let imgs = rand_images(2, 9);
    let a = model.embed_eval(imgs.clone()).unwrap();
    let b = fresh.embed_eval(imgs).unwrap();
    assert_eq!(a.data(), b.data(), "restored forward differs bitwise");
}

#[test]
fn reencoding_a_loaded_checkpoint_is_identical() {
    let model = trained_ish(5);
    let bytes = snapshot(&model, &[0.5; 3], 1, "").to_bytes();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
    assert_eq!(bytes, again);
}

#[test]
fn classifier_reinit_keeps_every_other_parameter() {
    let model = trained_ish(11);
    let ckpt = snapshot(&model, &[0.5; 3], 0, "");

    // new identity count: classifier width differs from the checkpoint
    let fresh: MuDeep<f32> = MuDeep::build(tiny_cfg(6)).unwrap();
    fresh.init_parameters(123);
    let fresh_cls: Vec<Vec<f32>> = fresh
        .registry
        .iter()
        .filter(|(n, _)| n.starts_with("classifier"))
        .map(|(_, p)| p.borrow().value.data().to_vec())
        .collect();
    assert!(!fresh_cls.is_empty());

    apply_checkpoint(&fresh, &ckpt, true).unwrap();
    for (name, p) in fresh.registry.iter() {
        let got = p.borrow().value.data().to_vec();
        if name.starts_with("classifier") {
            continue;
        }
        let want = model.registry.get(name).unwrap().borrow().value.data().to_vec();
        assert_eq!(got, want, "{name} not restored");
    }
    let kept_cls: Vec<Vec<f32>> = fresh
        .registry
        .iter()
        .filter(|(n, _)| n.starts_with("classifier"))
        .map(|(_, p)| p.borrow().value.data().to_vec())
        .collect();
    assert_eq!(kept_cls, fresh_cls, "classifier init was overwritten");
}

#[test]
fn classifier_width_mismatch_without_reinit_is_rejected() {
    let model = trained_ish(13);
    let ckpt = snapshot(&model, &[0.5; 3], 0, "");
    let fresh: MuDeep<f32> = MuDeep::build(tiny_cfg(6)).unwrap();
    fresh.init_parameters(0);
    let err = apply_checkpoint(&fresh, &ckpt, false).unwrap_err();
    assert!(err.to_string().contains("classifier"), "{err}");
}

#[test]
fn running_statistics_are_restored() {
    let model = trained_ish(17);
    let ckpt = snapshot(&model, &[0.5; 3], 0, "");
    let fresh: MuDeep<f32> = MuDeep::build(tiny_cfg(4)).unwrap();
    fresh.init_parameters(0);
    apply_checkpoint(&fresh, &ckpt, false).unwrap();
    let want: Vec<(String, Vec<f32>)> = model
        .bn_layers()
        .into_iter()
        .map(|(n, bn)| (n, bn.running_mean.borrow().clone()))
        .collect();
    let got: Vec<(String, Vec<f32>)> = fresh
        .bn_layers()
        .into_iter()
        .map(|(n, bn)| (n, bn.running_mean.borrow().clone()))
        .collect();
    assert_eq!(want, got);
    // the warm-up forward actually moved the stats off their defaults
    assert!(want
        .iter()
        .any(|(_, m)| m.iter().any(|&v| v != 0.0)));
}

#[test]
fn truncated_bytes_are_rejected() {
    let model = trained_ish(19);
    let bytes = snapshot(&model, &[0.5; 3], 0, "").to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "cut {cut}: {err}");
    }
}

#[test]
fn bad_magic_and_version_are_rejected() {
    let model = trained_ish(23);
    let mut bytes = snapshot(&model, &[0.5; 3], 0, "").to_bytes();
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong)
        .unwrap_err()
        .to_string()
        .contains("magic"));
    bytes[4] = 99; // version field
    assert!(Checkpoint::from_bytes(&bytes)
        .unwrap_err()
        .to_string()
        .contains("version"));
}

#[test]
fn missing_blob_names_the_parameter() {
    let model = trained_ish(29);
    let mut ckpt = snapshot(&model, &[0.5; 3], 0, "");
    ckpt.blobs.shift_remove("embed.1.fc.weight").unwrap();
    let fresh: MuDeep<f32> = MuDeep::build(tiny_cfg(4)).unwrap();
    fresh.init_parameters(0);
    let err = apply_checkpoint(&fresh, &ckpt, false).unwrap_err();
    assert!(err.to_string().contains("embed.1.fc.weight"), "{err}");
}
