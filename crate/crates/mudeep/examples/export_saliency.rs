//! Exports the learned fusion weights and per-stream saliency maps for one
//! synthetic image as `alpha.csv` plus grayscale PGM heatmaps.
//!
//! ```bash
//! cargo run -p mudeep --example export_saliency
//! ```

use mudeep::data::{channel_mean, synth_generate, Dataset};
use mudeep::eval::export_saliency;
use mudeep::{ModelConfig, MuDeep};

fn main() -> mudeep::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = synth_generate(2, 1, 0, dir.path())?;
    let dataset = Dataset::load(&manifest)?;
    let mean = channel_mean(&dataset.images);

    let mut cfg = ModelConfig::paper_exact(2);
    cfg.channel_scale = 0.125;
    cfg.embedding_dim = 32;
    let model: MuDeep<f32> = MuDeep::build(cfg)?;
    model.init_parameters(0);

    let out = dir.path().join("saliency");
    let written = export_saliency(&model, &dataset.images[0], &mean, &out)?;
    println!("exported {} files to {}:", written.len(), out.display());
    for name in &written {
        println!("  {name}");
    }
    let alpha = std::fs::read_to_string(out.join("alpha.csv")).expect("alpha.csv");
    println!("\nalpha.csv (one row per stream, first 80 chars per row):");
    for line in alpha.lines().take(4) {
        let cut = line.chars().take(80).collect::<String>();
        println!("  {cut}...");
    }
    Ok(())
}
