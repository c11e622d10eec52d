//! The mask pipeline on hand-made per-token divergences: normalize each
//! step, fuse the window, smooth, threshold.

use tdm_edit::tdm::{
    binarize, fusion_weights, gaussian_smooth, minmax_normalize, softmax_fuse, DivergenceMap,
    TokenMap,
};

fn show(name: &str, m: &TokenMap) {
    println!("{name}");
    for r in 0..m.height {
        let row: Vec<String> = (0..m.width)
            .map(|c| format!("{:4.2}", m.get(r, c)))
            .collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> tdm_edit::Result<()> {
    let (h, w) = (8, 8);
    // A blob near the top-left that sharpens over the steps, plus a stray
    // hot token that only shows up once.
    let steps: Vec<DivergenceMap> = (0..4)
        .map(|s| {
            let values = (0..h * w)
                .map(|i| {
                    let (r, c) = ((i / w) as f32, (i % w) as f32);
                    let d2 = (r - 2.5).powi(2) + (c - 2.5).powi(2);
                    let blob = (-d2 / (4.0 - s as f32 * 0.7)).exp();
                    let stray = if s == 1 && i == 6 * w + 6 { 1.5 } else { 0.0 };
                    0.05 + blob + stray
                })
                .collect();
            DivergenceMap {
                step: s,
                map: TokenMap::new(h, w, values).unwrap(),
            }
        })
        .collect();

    let normalized: Vec<_> = steps.iter().map(minmax_normalize).collect();
    show("step 1, normalized", &normalized[1].map);
    let weights = fusion_weights(&normalized)?;
    let stray: Vec<f64> = weights.iter().map(|per_step| per_step[6 * w + 6]).collect();
    println!("weights at the stray token: {stray:.3?}");
    let fused = softmax_fuse(&normalized)?;
    show("fused", &fused.map);
    let soft = gaussian_smooth(&fused, 1.0)?;
    show("smoothed", &soft.map);
    for tau in [0.2, 0.35, 0.5] {
        let mask = binarize(&soft, tau)?;
        let on = mask.binary.values.iter().filter(|&&v| v > 0.5).count();
        println!("tau {tau}: {on} of {} tokens edited", h * w);
    }
    Ok(())
}
