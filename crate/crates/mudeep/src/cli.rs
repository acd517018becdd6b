//! Command-line front end: train / eval / gradcheck / synth / visualize /
//! inspect. Each run prints the resolved seed and a hash of the effective
//! configuration so experiments are reproducible from the log alone.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::checkpoint::{apply_checkpoint, load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{load_image, synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::{cmc_single_shot, cmc_to_csv, export_saliency, rank_at};
use crate::gradcheck::{grad_check_grouped, GradCheckReport};
use crate::layers::ForwardCtx;
use crate::model::{describe, seed_rng, ModelConfig, MuDeep, INPUT_HEIGHT, INPUT_WIDTH};
use crate::param::ParamRef;
use crate::tensor::{format_shape, Scalar, Tensor};
use crate::train::{train, MetricsRow, TrainPool, LABEL_DIFFERENT, LABEL_SAME, METRICS_HEADER};

#[derive(Parser, Debug)]
#[command(name = "mudeep", about = "Multi-scale person re-identification", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single configuration key, e.g. --set train.lr0=0.01.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads (falls back to MUDEEP_THREADS, then 1).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest CSV (overrides data.manifest).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoint.ckpt and metrics.csv.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// With --resume: keep the loaded backbone but reinitialize the
        /// classification head (for a new identity count).
        #[arg(long)]
        reinit_classifier: bool,
    },
    /// Evaluate a checkpoint: single-shot CMC over a manifest.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write the full CMC curve as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify tape gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Coordinates sampled per module group.
        #[arg(long, default_value_t = 20)]
        coords: usize,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Generate a synthetic two-camera corpus with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        ids: usize,
        /// Images per identity per camera.
        #[arg(long, default_value_t = 8)]
        per_cam: usize,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Export saliency maps and fusion weights for one image.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary PPM).
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "saliency")]
        out: PathBuf,
    },
    /// Print the layer-by-layer shape and parameter table.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Use the full-scale configuration regardless of the config file.
        #[arg(long)]
        paper_scale: bool,
    },
}

/// Short hash of the effective configuration text.
pub fn config_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    let threads = common
        .threads
        .or_else(|| {
            std::env::var("MUDEEP_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(1);
    crate::runtime::set_threads(threads);
    let text = cfg.serialize();
    println!("seed: {}  config: {}", cfg.train.seed, config_hash(&text));
    Ok(cfg)
}

/// Parses argv and runs; returns the process exit code.
pub fn main_entry<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version printing itself
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            data,
            out,
            resume,
            reinit_classifier,
        } => cmd_train(&common, data, &out, resume, reinit_classifier),
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => cmd_eval(&common, &checkpoint, data, out),
        Command::Gradcheck {
            common,
            coords,
            tolerance,
        } => cmd_gradcheck(&common, coords, tolerance),
        Command::Synth {
            common,
            ids,
            per_cam,
            out,
        } => cmd_synth(&common, ids, per_cam, &out),
        Command::Visualize {
            common,
            checkpoint,
            image,
            out,
        } => cmd_visualize(&common, &checkpoint, &image, &out),
        Command::Inspect {
            common,
            batch,
            paper_scale,
        } => cmd_inspect(&common, batch, paper_scale),
    }
}

fn manifest_path(cfg: &RunConfig, cli_data: Option<PathBuf>) -> Result<PathBuf> {
    cli_data
        .or_else(|| cfg.data.manifest.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.manifest".into()))
}

fn cmd_train(
    common: &Common,
    data: Option<PathBuf>,
    out: &Path,
    resume: Option<PathBuf>,
    reinit_classifier: bool,
) -> Result<()> {
    let mut cfg = resolve(common)?;
    let manifest = manifest_path(&cfg, data)?;
    let dataset = Dataset::load(&manifest)?;
    let n_ids = dataset.identities().len();
    if cfg.model.use_classnet {
        cfg.model.num_identities = n_ids;
    }
    let pool = TrainPool::build(&dataset, cfg.train.aug_copies, cfg.train.seed)?;
    println!(
        "dataset: {} images, {} identities -> pool of {}",
        dataset.images.len(),
        n_ids,
        pool.len()
    );
    let model: MuDeep<f32> = MuDeep::build(cfg.model.clone())?;
    model.init_parameters(cfg.train.seed);
    let mut start_iter = 0usize;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(&path)?;
        let (_, iteration) = apply_checkpoint(&model, &ckpt, reinit_classifier)?;
        start_iter = iteration as usize;
        println!("resumed from {} at iteration {start_iter}", path.display());
    }
    fs::create_dir_all(out)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    let mut last: Option<MetricsRow> = None;
    let final_iter = train(&model, &pool, &cfg.train, start_iter, |row| {
        metrics.push_str(&row.to_csv());
        metrics.push('\n');
        if row.iter % 50 == 0 {
            println!(
                "iter {:5}  stage {}  lr {:.6}  loss_ver {:.4}  acc_ver {:.3}",
                row.iter, row.stage, row.lr, row.loss_ver, row.acc_ver
            );
        }
        last = Some(row.clone());
    })?;
    let metrics_path = out.join("metrics.csv");
    fs::write(&metrics_path, &metrics)
        .map_err(|e| Error::Data(format!("cannot write metrics: {e}")))?;
    let ckpt_path = out.join("checkpoint.ckpt");
    save_checkpoint(
        &ckpt_path,
        &model,
        &pool.mean,
        final_iter as u64,
        &cfg.serialize(),
    )?;
    if let Some(row) = last {
        println!(
            "done: {} iterations, final acc_ver {:.3}",
            final_iter, row.acc_ver
        );
    }
    println!("wrote {} and {}", ckpt_path.display(), metrics_path.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    checkpoint: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cli_cfg = resolve(common)?;
    let ckpt = load_checkpoint(checkpoint)?;
    // model topology comes from the checkpoint; eval/data settings from CLI
    let saved = RunConfig::parse(&ckpt.config_text)?;
    let model: MuDeep<f32> = MuDeep::build(saved.model.clone())?;
    let (mean, _) = apply_checkpoint(&model, &ckpt, false)?;
    let manifest = manifest_path(&cli_cfg, data)?;
    let dataset = Dataset::load(&manifest)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli_cfg.train.seed ^ 0x1f3d);
    let result = cmc_single_shot(
        &model,
        &dataset,
        &mean,
        cli_cfg.data.probe_cam,
        cli_cfg.data.gallery_cam,
        cli_cfg.eval.trials,
        cli_cfg.eval.backend,
        &mut rng,
    )?;
    println!(
        "CMC over {} trials, {} probes each",
        result.trials, result.probes_per_trial
    );
    println!(
        "Rank-1: {:.2}%  Rank-5: {:.2}%  Rank-10: {:.2}%",
        100.0 * rank_at(&result.curve, 1),
        100.0 * rank_at(&result.curve, 5),
        100.0 * rank_at(&result.curve, 10),
    );
    if let Some(path) = out {
        fs::write(&path, cmc_to_csv(&result.curve))
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Parameters partitioned by top-level module prefix, in registry order.
pub fn module_groups<S: Scalar>(model: &MuDeep<S>) -> Vec<(String, Vec<ParamRef<S>>)> {
    let mut groups: Vec<(String, Vec<ParamRef<S>>)> = Vec::new();
    for (name, p) in model.registry.iter() {
        let prefix = name.split('.').next().unwrap_or(name).to_string();
        match groups.iter_mut().find(|(g, _)| *g == prefix) {
            Some((_, v)) => v.push(p.clone()),
            None => groups.push((prefix, vec![p.clone()])),
        }
    }
    groups
}

/// Full-model gradient check in 64-bit on a small random pair batch.
/// The loss is the joint objective so every head receives gradient.
pub fn gradcheck_model(
    model: &MuDeep<f64>,
    coords_per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let n = 2usize;
    let len = n * 3 * INPUT_HEIGHT * INPUT_WIDTH;
    let mk = |rng: &mut ChaCha8Rng| -> Tensor<f64> {
        let v: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..0.5)).collect();
        Tensor::from_vec(&[n, 3, INPUT_HEIGHT, INPUT_WIDTH], v).expect("sized")
    };
    let imgs_a = mk(&mut data_rng);
    let imgs_b = mk(&mut data_rng);
    let ver_labels = vec![LABEL_SAME, LABEL_DIFFERENT];
    let cls_a: Vec<usize> = (0..n).map(|i| i % model.cfg.num_identities).collect();
    let cls_b: Vec<usize> = (0..n).map(|i| (i + 1) % model.cfg.num_identities).collect();

    let eval = |with_grad: bool| -> Result<f64> {
        let mut tape = Tape::new();
        // identical dropout draws on every evaluation
        let mut rng = seed_rng(seed ^ 0x5bd1e995);
        let mut ctx = ForwardCtx {
            train: true,
            rng: &mut rng,
        };
        let out = model.forward_pair(&mut tape, imgs_a.clone(), imgs_b.clone(), &mut ctx)?;
        let lv = tape.softmax_cross_entropy(out.ver_logits, &ver_labels)?;
        let total = match (out.cls_a, out.cls_b) {
            (Some(ca), Some(cb)) => {
                let la = tape.softmax_cross_entropy(ca, &cls_a)?;
                let lb = tape.softmax_cross_entropy(cb, &cls_b)?;
                tape.weighted_sum(&[(1.0, lv), (1.0, la), (1.0, lb)])?
            }
            _ => lv,
        };
        let value = tape.value(total).item();
        if with_grad {
            tape.backward(total)?;
        }
        Ok(value)
    };
    let groups = module_groups(model);
    let mut coord_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    grad_check_grouped(&groups, coords_per_group, 1e-5, &mut coord_rng, eval)
}

fn cmd_gradcheck(common: &Common, coords: usize, tolerance: f64) -> Result<()> {
    let cfg = resolve(common)?;
    let model: MuDeep<f64> = MuDeep::build(cfg.model.clone())?;
    model.init_parameters(cfg.train.seed);
    let report = gradcheck_model(&model, coords, cfg.train.seed)?;
    println!("{:<14} {:>7} {:>14}", "group", "coords", "max rel err");
    for g in &report.groups {
        println!("{:<14} {:>7} {:>14.3e}", g.name, g.coords_checked, g.max_rel_err);
    }
    let worst = report.max_rel_err();
    if worst > tolerance {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} > {tolerance:.1e}"
        )));
    }
    println!("gradcheck OK: max relative error {worst:.3e} <= {tolerance:.1e}");
    Ok(())
}

fn cmd_synth(common: &Common, ids: usize, per_cam: usize, out: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let manifest = synth_generate(ids, per_cam, cfg.train.seed, out)?;
    println!(
        "wrote {} identities x 2 cameras x {per_cam} images; manifest {}",
        ids,
        manifest.display()
    );
    Ok(())
}

fn cmd_visualize(common: &Common, checkpoint: &Path, image: &Path, out: &Path) -> Result<()> {
    let _ = resolve(common)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let saved = RunConfig::parse(&ckpt.config_text)?;
    let model: MuDeep<f32> = MuDeep::build(saved.model.clone())?;
    let (mean, _) = apply_checkpoint(&model, &ckpt, false)?;
    let img = load_image(image)?;
    let written = export_saliency(&model, &img, &mean, out)?;
    for name in &written {
        println!("wrote {}", out.join(name).display());
    }
    Ok(())
}

fn cmd_inspect(common: &Common, batch: usize, paper_scale: bool) -> Result<()> {
    let cfg = resolve(common)?;
    let model_cfg = if paper_scale {
        ModelConfig::paper_exact(cfg.model.num_identities.max(2))
    } else {
        cfg.model.clone()
    };
    let rows = describe(&model_cfg, batch)?;
    println!("{:<24} {:<22} {:>12}", "stage", "output shape", "params");
    let mut total = 0usize;
    for r in &rows {
        println!(
            "{:<24} {:<22} {:>12}",
            r.stage,
            format_shape(&r.output_shape),
            r.param_count
        );
        total += r.param_count;
    }
    println!("{:<24} {:<22} {:>12}", "total", "", total);
    Ok(())
}
