//! Image and mask metrics for edit evaluation.
//!
//! PSNR uses peak 1.0. Identical inputs give `f64::INFINITY`, written as the
//! string `"inf"` in text and JSON reports.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::tdm::TokenMap;

fn check_pair(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "images differ in size: {}×{} vs {}×{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

fn psnr_from(sq: f64, count: usize) -> f64 {
    if sq == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / (sq / count as f64)).log10()
    }
}

pub fn psnr(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    check_pair(a, b)?;
    let sq: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| f64::from(x - y).powi(2))
        .sum();
    Ok(psnr_from(sq, a.pixels().len()))
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SubjectBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl SubjectBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }
}

/// Bounding box of a pixel mask grown by `margin` pixels on every side and
/// clipped to the canvas; `None` for an empty mask.
pub fn subject_box(
    mask: &[bool],
    width: usize,
    height: usize,
    margin: usize,
) -> Option<SubjectBox> {
    let mut b: Option<SubjectBox> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x, y) = (i % width, i / width);
        let e = b.get_or_insert(SubjectBox {
            x0: x,
            y0: y,
            x1: x + 1,
            y1: y + 1,
        });
        e.x0 = e.x0.min(x);
        e.y0 = e.y0.min(y);
        e.x1 = e.x1.max(x + 1);
        e.y1 = e.y1.max(y + 1);
    }
    b.map(|e| SubjectBox {
        x0: e.x0.saturating_sub(margin),
        y0: e.y0.saturating_sub(margin),
        x1: (e.x1 + margin).min(width),
        y1: (e.y1 + margin).min(height),
    })
}

/// PSNR over the pixels outside `subject`.
pub fn background_psnr(a: &GrayImage, b: &GrayImage, subject: SubjectBox) -> Result<f64> {
    check_pair(a, b)?;
    if subject.x1 > a.width()
        || subject.y1 > a.height()
        || subject.x0 > subject.x1
        || subject.y0 > subject.y1
    {
        return Err(Error::invalid("subject box leaves the canvas"));
    }
    let (mut sq, mut count) = (0.0f64, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if !subject.contains(x, y) {
                sq += f64::from(a.get(x, y) - b.get(x, y)).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "subject box covers the whole canvas; no background left",
        ));
    }
    Ok(psnr_from(sq, count))
}

/// Token mask to pixels by patch replication; entries above 0.5 are set.
pub fn upsample_mask(map: &TokenMap, patch: usize) -> Vec<bool> {
    let w = map.width * patch;
    (0..map.height * patch * w)
        .map(|i| map.get(i / w / patch, (i % w) / patch) > 0.5)
        .collect()
}

/// `|pred ∩ gt| / |pred ∪ gt|`, 1 when both are empty.
pub fn mask_iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("masks differ in size"));
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    let union = pred.iter().zip(gt).filter(|(p, g)| **p || **g).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairMetrics {
    pub name: String,
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    #[serde(serialize_with = "ser_db")]
    pub background_psnr: f64,
    pub mask_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    pub schedule: String,
    pub pairs: Vec<PairMetrics>,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr: f64,
    #[serde(serialize_with = "ser_db")]
    pub mean_background_psnr: f64,
    pub mean_mask_iou: f64,
    /// Metrics that need pretrained networks are not computed.
    pub lpips: Option<f64>,
    pub clip_similarity: Option<f64>,
    pub aesthetic: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

impl EvalReport {
    pub fn new(
        model: impl Into<String>,
        schedule: impl Into<String>,
        pairs: Vec<PairMetrics>,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::invalid(
                "an evaluation report needs at least one pair",
            ));
        }
        Ok(EvalReport {
            model: model.into(),
            schedule: schedule.into(),
            mean_psnr: mean(pairs.iter().map(|p| p.psnr)),
            mean_background_psnr: mean(pairs.iter().map(|p| p.background_psnr)),
            mean_mask_iou: mean(pairs.iter().map(|p| p.mask_iou)),
            pairs,
            lpips: None,
            clip_similarity: None,
            aesthetic: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model {}", self.model);
        let _ = writeln!(out, "schedule {}", self.schedule);
        let _ = writeln!(out, "pair psnr background_psnr mask_iou");
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{} {} {} {:.4}",
                p.name,
                format_db(p.psnr),
                format_db(p.background_psnr),
                p.mask_iou
            );
        }
        let _ = writeln!(
            out,
            "mean {} {} {:.4}",
            format_db(self.mean_psnr),
            format_db(self.mean_background_psnr),
            self.mean_mask_iou
        );
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, |x, y| (x + y) as f32 / 8.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = img(4, 4, |x, y| (x + y) as f32 / 8.0 + 0.1);
        // MSE 0.01 → 20 dB, up to f32 rounding of the offset
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &img(4, 3, |_, _| 0.0)).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let a = img(16, 16, |x, _| x as f32 / 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = [0.01f32, 0.03, 0.1]
            .iter()
            .map(|amp| {
                let b = GrayImage::new(
                    16,
                    16,
                    a.pixels()
                        .iter()
                        .zip(&noise)
                        .map(|(p, n)| p + amp * n)
                        .collect(),
                )
                .unwrap();
                psnr(&a, &b).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2]);
    }

    #[test]
    fn background_psnr_examples() {
        let a = img(8, 8, |_, _| 0.5);
        let inside = img(8, 8, |x, y| {
            if (2..5).contains(&x) && (3..6).contains(&y) {
                0.9
            } else {
                0.5
            }
        });
        let subject = SubjectBox {
            x0: 2,
            y0: 3,
            x1: 5,
            y1: 6,
        };
        assert_eq!(
            background_psnr(&a, &inside, subject).unwrap(),
            f64::INFINITY
        );
        assert!(background_psnr(&a, &inside, subject).unwrap() >= psnr(&a, &inside).unwrap());

        let noisy = img(8, 8, |x, y| 0.5 + ((x * 3 + y) % 5) as f32 / 50.0);
        let empty = SubjectBox {
            x0: 4,
            y0: 4,
            x1: 4,
            y1: 4,
        };
        assert_eq!(
            background_psnr(&a, &noisy, empty).unwrap(),
            psnr(&a, &noisy).unwrap()
        );

        let outside = img(8, 8, |x, y| {
            if subject.contains(x, y) {
                0.5
            } else {
                0.5 + (x as f32) / 40.0
            }
        });
        let (mut sq, mut n) = (0.0f64, 0);
        for y in 0..8 {
            for x in 0..8 {
                if !subject.contains(x, y) {
                    sq += f64::from(a.get(x, y) - outside.get(x, y)).powi(2);
                    n += 1;
                }
            }
        }
        let oracle = 10.0 * (1.0 / (sq / n as f64)).log10();
        assert!((background_psnr(&a, &outside, subject).unwrap() - oracle).abs() < 1e-9);

        assert!(background_psnr(
            &a,
            &a,
            SubjectBox {
                x0: 0,
                y0: 0,
                x1: 8,
                y1: 8
            }
        )
        .is_err());
        assert!(background_psnr(
            &a,
            &a,
            SubjectBox {
                x0: 0,
                y0: 0,
                x1: 9,
                y1: 2
            }
        )
        .is_err());
    }

    #[test]
    fn subject_box_dilates_and_clips() {
        let mut m = vec![false; 64];
        m[3 * 8 + 4] = true;
        m[5 * 8 + 6] = true;
        assert_eq!(
            subject_box(&m, 8, 8, 1),
            Some(SubjectBox {
                x0: 3,
                y0: 2,
                x1: 8,
                y1: 7
            })
        );
        assert_eq!(
            subject_box(&m, 8, 8, 4),
            Some(SubjectBox {
                x0: 0,
                y0: 0,
                x1: 8,
                y1: 8
            })
        );
        assert_eq!(subject_box(&[false; 4], 2, 2, 1), None);
    }

    #[test]
    fn iou_examples() {
        let g = vec![true, true, false, false, true, true];
        assert_eq!(mask_iou(&g, &g).unwrap(), 1.0);
        assert_eq!(mask_iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(
            mask_iou(&[true, false, false, false], &[true, true, false, false]).unwrap(),
            0.5
        );
        assert_eq!(mask_iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        let p = vec![true, false, true, false, true, false];
        assert_eq!(mask_iou(&p, &g).unwrap(), mask_iou(&g, &p).unwrap());
        assert!(mask_iou(&[true], &[true, false]).is_err());
    }

    #[test]
    fn upsampling_replicates_patches() {
        let m = TokenMap::new(1, 2, vec![1.0, 0.0]).unwrap();
        let px = upsample_mask(&m, 2);
        assert_eq!(px, vec![true, true, false, false, true, true, false, false]);
    }

    #[test]
    fn report_means_and_serialization() {
        let pairs = vec![
            PairMetrics {
                name: "a".into(),
                psnr: 20.0,
                background_psnr: 30.0,
                mask_iou: 0.5,
            },
            PairMetrics {
                name: "b".into(),
                psnr: 24.0,
                background_psnr: f64::INFINITY,
                mask_iou: 0.7,
            },
        ];
        let r = EvalReport::new("m", "s", pairs).unwrap();
        assert_eq!(r.mean_psnr, 22.0);
        assert_eq!(r.mean_background_psnr, f64::INFINITY);
        assert!((r.mean_mask_iou - 0.6).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["mean_background_psnr"], "inf");
        assert_eq!(json["pairs"][1]["background_psnr"], "inf");
        assert!(json["lpips"].is_null());
        assert!(r.to_text().contains("mean 22.0000 inf 0.6000"));
        assert!(EvalReport::new("m", "s", vec![]).is_err());
    }
}
