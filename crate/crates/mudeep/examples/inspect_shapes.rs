//! Prints the layer-by-layer shape and parameter table for the full-scale
//! configuration and the CPU-friendly desk configuration.
//!
//! The table is computed symbolically, so the full-scale model (hundreds of
//! millions of parameters) costs nothing to inspect.
//!
//! ```bash
//! cargo run -p mudeep --example inspect_shapes
//! ```

use mudeep::model::describe;
use mudeep::tensor::format_shape;
use mudeep::ModelConfig;

fn print_table(title: &str, cfg: &ModelConfig) -> mudeep::Result<()> {
    println!("== {title} ==");
    println!("{:<26} {:<20} {:>12}", "stage", "output shape", "params");
    let mut total = 0usize;
    for row in describe(cfg, 1)? {
        println!(
            "{:<26} {:<20} {:>12}",
            row.stage,
            format_shape(&row.output_shape),
            row.param_count
        );
        total += row.param_count;
    }
    println!("{:<26} {:<20} {:>12}\n", "total", "", total);
    Ok(())
}

fn main() -> mudeep::Result<()> {
    print_table("full scale (100 identities)", &ModelConfig::paper_exact(100))?;
    print_table("desk scale (100 identities)", &ModelConfig::desk(100))?;
    Ok(())
}
