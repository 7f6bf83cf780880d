//! Regenerates the bundled synthetic dataset: `cargo run --example write_fixture -- <dir>`.

use std::path::PathBuf;

use cardtrack::fixture::synthetic;
use cardtrack::market_data::{save_membership, save_price_panel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir: PathBuf = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures/synthetic"));
    std::fs::create_dir_all(&dir)?;
    let ds = synthetic();
    save_price_panel(&ds.panel, &dir.join("panel.csv"))?;
    save_membership(&ds.members, &dir.join("membership.csv"))?;
    std::fs::write(dir.join("truth.txt"), ds.true_assets.join("\n") + "\n")?;
    println!("wrote {}", dir.display());
    Ok(())
}
