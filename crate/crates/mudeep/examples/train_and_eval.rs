//! End-to-end miniature run: synthetic corpus -> three-stage training at a
//! reduced scale -> checkpoint save/load -> single-shot CMC evaluation.
//!
//! This is a demonstration, not a convergence run; expect modest accuracy.
//! The full desk-scale recipe lives in the README.
//!
//! ```bash
//! cargo run --release -p mudeep --example train_and_eval
//! ```

use mudeep::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use mudeep::data::{synth_generate, Dataset};
use mudeep::eval::{cmc_single_shot, rank_at, ScoreBackend};
use mudeep::model::seed_rng;
use mudeep::train::{train, TrainConfig, TrainPool};
use mudeep::{ModelConfig, MuDeep};

fn main() -> mudeep::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = synth_generate(4, 4, 0, dir.path())?;
    let dataset = Dataset::load(&manifest)?;

    let mut model_cfg = ModelConfig::paper_exact(dataset.identities().len());
    model_cfg.channel_scale = 0.125;
    model_cfg.embedding_dim = 64;
    let train_cfg = TrainConfig {
        batch_size: 4,
        aug_copies: 2,
        stage_iters: (60, 20, 60),
        ..TrainConfig::default()
    };

    let pool = TrainPool::build(&dataset, train_cfg.aug_copies, train_cfg.seed)?;
    let model: MuDeep<f32> = MuDeep::build(model_cfg)?;
    model.init_parameters(train_cfg.seed);

    println!("training on a pool of {} images...", pool.len());
    let final_iter = train(&model, &pool, &train_cfg, 0, |row| {
        if row.iter % 20 == 0 {
            println!(
                "iter {:4}  stage {}  loss_ver {:.4}  acc_ver {:.2}",
                row.iter, row.stage, row.loss_ver, row.acc_ver
            );
        }
    })?;

    let ckpt_path = dir.path().join("checkpoint.ckpt");
    save_checkpoint(&ckpt_path, &model, &pool.mean, final_iter as u64, "")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let restored: MuDeep<f32> = MuDeep::build(model.cfg.clone())?;
    restored.init_parameters(0);
    let (mean, iteration) = apply_checkpoint(&restored, &ckpt, false)?;
    println!("checkpoint round-trip OK at iteration {iteration}");

    let mut rng = seed_rng(7);
    let result = cmc_single_shot(
        &restored,
        &dataset,
        &mean,
        0, // probe camera
        1, // gallery camera
        10,
        ScoreBackend::Verification,
        &mut rng,
    )?;
    println!(
        "CMC ({} trials): rank-1 {:.1}%  rank-2 {:.1}%",
        result.trials,
        100.0 * rank_at(&result.curve, 1),
        100.0 * rank_at(&result.curve, 2),
    );
    Ok(())
}
