//! Writes the synthetic datasets used in the README walkthrough.
//!
//! `cargo run --example synthetic_data -- <out-dir>`

use std::path::PathBuf;

use gmn_core::dataset::{cycles_vs_paths, degree_parity, save_dataset};

fn main() -> gmn_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir).map_err(|source| gmn_core::GmnError::Io {
        path: dir.clone(),
        source,
    })?;
    save_dataset(&cycles_vs_paths(200, 6, 12, 7), &dir.join("cycles_paths.json"))?;
    save_dataset(&degree_parity(20, 50, 5, 7), &dir.join("degree_parity.json"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
