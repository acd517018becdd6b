//! Full-model gradient check in 64-bit at a reduced channel scale: every
//! module group gets randomly sampled coordinates compared against central
//! finite differences on the joint loss.
//!
//! ```bash
//! cargo run --release -p mudeep --example gradient_check
//! ```

use mudeep::cli::gradcheck_model;
use mudeep::{ModelConfig, MuDeep};

fn main() -> mudeep::Result<()> {
    let mut cfg = ModelConfig::paper_exact(4);
    cfg.channel_scale = 0.125; // eighth-width channels keep this quick
    cfg.embedding_dim = 64;
    let model: MuDeep<f64> = MuDeep::build(cfg)?;
    model.init_parameters(0);

    let report = gradcheck_model(&model, 10, 0)?;
    println!("{:<14} {:>7} {:>14}", "group", "coords", "max rel err");
    for g in &report.groups {
        println!(
            "{:<14} {:>7} {:>14.3e}",
            g.name, g.coords_checked, g.max_rel_err
        );
    }
    println!("worst over all groups: {:.3e}", report.max_rel_err());
    Ok(())
}
