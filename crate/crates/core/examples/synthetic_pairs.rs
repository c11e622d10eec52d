//! Generate the synthetic shape dataset and write a few edit pairs to disk.
//!
//! cargo run --example synthetic_pairs -- /tmp/pairs

use std::path::PathBuf;

use tdm_edit::imageio::{write_pgm, write_ppm};
use tdm_edit::synth::{make_dataset, DatasetConfig};

fn main() -> tdm_edit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or("synthetic_pairs".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = DatasetConfig {
        count: 64,
        held_out: 6,
        ..DatasetConfig::default()
    };
    let ds = make_dataset(&cfg)?;
    println!(
        "{} training images over {} conditions, {} held-out pairs",
        ds.train.len(),
        cfg.inventory.vocab(),
        ds.pairs.len()
    );
    for (i, p) in ds.pairs.iter().enumerate() {
        let mask = p.pair.change_mask();
        let changed = mask.iter().filter(|&&m| m).count();
        println!(
            "pair {i}: condition {} -> {}, {changed} changed pixels",
            p.source_cond, p.target_cond
        );
        write_ppm(
            &out.join(format!("{i}_source.ppm")),
            &p.pair.render_source()?,
        )?;
        write_ppm(
            &out.join(format!("{i}_target.ppm")),
            &p.pair.render_target()?,
        )?;
        let pixels: Vec<f32> = mask.iter().map(|&m| f32::from(u8::from(m))).collect();
        write_pgm(
            &out.join(format!("{i}_mask.pgm")),
            cfg.canvas,
            cfg.canvas,
            &pixels,
        )?;
    }
    println!("wrote {}", out.display());
    Ok(())
}
