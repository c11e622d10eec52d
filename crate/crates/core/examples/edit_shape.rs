//! Edit a held-out image into a different shape and write the result with
//! its masks. Optional argument: a checkpoint from `tdm-edit train`.

mod common;

use tdm_edit::edit::{run_edit, EditRequest};
use tdm_edit::imageio::write_ppm;
use tdm_edit::metrics::{format_db, psnr};

fn main() -> tdm_edit::Result<()> {
    let (cfg, ds, net) = common::setup();
    let codec = cfg.codec()?;
    let out = std::env::temp_dir().join("edit_shape_example");
    std::fs::create_dir_all(&out)?;
    let p = &ds.pairs[0];
    let source = p.pair.render_source()?;
    let result = run_edit(
        &net,
        &EditRequest {
            source: &source,
            c_src: p.source_cond,
            c_tgt: p.target_cond,
            schedule: &cfg.edit,
            codec: &codec,
            seed: cfg.seed,
        },
    )?;
    println!(
        "condition {} -> {}: {} maps, {} evaluations",
        p.source_cond,
        p.target_cond,
        result.divergence.len(),
        result.nfe.total()
    );
    println!(
        "PSNR vs source {} dB, vs target {} dB",
        format_db(psnr(&source, &result.image)?),
        format_db(psnr(&p.pair.render_target()?, &result.image)?)
    );
    write_ppm(&out.join("source.ppm"), &source)?;
    write_ppm(&out.join("edited.ppm"), &result.image)?;
    if let Some(mask) = result.final_mask() {
        mask.soft.write_pgm(&out.join("mask_soft.pgm"))?;
        mask.binary.write_pgm(&out.join("mask.pgm"))?;
    }
    print!("{}", result.manifest.to_text());
    println!("wrote {}", out.display());
    Ok(())
}
