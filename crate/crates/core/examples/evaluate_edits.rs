//! Score a batch of edits against the synthetic ground truth, with and
//! without the front stabilization steps. Optional argument: a checkpoint.

mod common;

use tdm_edit::edit::{run_edit, EditRequest, EditSchedule};
use tdm_edit::metrics::{
    background_psnr, mask_iou, psnr, subject_box, upsample_mask, EvalReport, PairMetrics,
};

fn main() -> tdm_edit::Result<()> {
    let (cfg, ds, net) = common::setup();
    let codec = cfg.codec()?;
    let canvas = cfg.data.canvas;
    for k_front in [0, 2] {
        let schedule = EditSchedule {
            k_front,
            ..cfg.edit.clone()
        };
        let mut pairs = Vec::new();
        for (i, p) in ds.pairs.iter().take(6).enumerate() {
            let source = p.pair.render_source()?;
            let r = run_edit(
                &net,
                &EditRequest {
                    source: &source,
                    c_src: p.source_cond,
                    c_tgt: p.target_cond,
                    schedule: &schedule,
                    codec: &codec,
                    seed: cfg.seed,
                },
            )?;
            let gt = p.pair.change_mask();
            let subject = subject_box(&gt, canvas, canvas, cfg.patch).expect("non-empty change");
            let iou = match r.final_mask() {
                Some(m) => mask_iou(&upsample_mask(&m.binary, cfg.patch), &gt)?,
                None => 0.0,
            };
            pairs.push(PairMetrics {
                name: format!("pair_{i}"),
                psnr: psnr(&source, &r.image)?,
                background_psnr: background_psnr(&source, &r.image, subject)?,
                mask_iou: iou,
            });
        }
        let report = EvalReport::new(String::from("example"), format!("k_front={k_front}"), pairs)?;
        print!("{}", report.to_text());
    }
    Ok(())
}
