//! Per-token divergence between two velocity fields and its reduction to an
//! edit mask: min-max normalization, softmax fusion over time, Gaussian
//! smoothing and thresholding.

use std::path::Path;

use crate::error::{Error, Result};
use crate::imageio::{write_pgm, write_raw_map};
use crate::latent::LatentGrid;

/// A scalar per token, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl TokenMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::invalid(format!(
                "token map of {height}×{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(TokenMap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        TokenMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len().max(1) as f64
    }

    fn same_grid(&self, other: &TokenMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// 8-bit PGM of `value × 255`, rounded half up.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, self.width, self.height, &self.values)
    }

    /// Lossless raw export (see `imageio::write_raw_map`).
    pub fn write_raw(&self, path: &Path) -> Result<()> {
        write_raw_map(path, self.height, self.width, &self.values)
    }
}

/// `δ_t`: non-negative divergence per token at one denoising step.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceMap {
    pub step: usize,
    pub map: TokenMap,
}

/// `δ̃_t` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedMap {
    pub step: usize,
    pub map: TokenMap,
}

/// `δ̂` fused over a window of `window` maps.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedMap {
    pub map: TokenMap,
    pub window: usize,
}

/// Smoothed soft mask, before thresholding.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    pub map: TokenMap,
    pub sigma: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditMask {
    pub soft: TokenMap,
    /// 1 exactly where `soft > tau`, else 0.
    pub binary: TokenMap,
    pub tau: f32,
    pub sigma: f32,
}

impl EditMask {
    /// A constant mask with no smoothing history (used for forced stages).
    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        let map = TokenMap::filled(height, width, value);
        EditMask {
            soft: map.clone(),
            binary: map,
            tau: 0.5,
            sigma: 0.0,
        }
    }
}

/// Channel-wise L2 norm of `v_tgt − v_src` per token.
pub fn compute_divergence(
    v_tgt: &LatentGrid,
    v_src: &LatentGrid,
    step: usize,
) -> Result<DivergenceMap> {
    v_tgt.check_same_shape(v_src, "compute_divergence")?;
    let c = v_tgt.channels();
    let values = v_tgt
        .values()
        .chunks_exact(c)
        .zip(v_src.values().chunks_exact(c))
        .map(|(a, b)| {
            let sq: f64 = a
                .iter()
                .zip(b)
                .map(|(x, y)| f64::from(x - y) * f64::from(x - y))
                .sum();
            sq.sqrt() as f32
        })
        .collect();
    Ok(DivergenceMap {
        step,
        map: TokenMap::new(v_tgt.height(), v_tgt.width(), values)?,
    })
}

/// `(δ − min) / (max − min)`; a constant map normalizes to zeros.
pub fn minmax_normalize(d: &DivergenceMap) -> NormalizedMap {
    NormalizedMap {
        step: d.step,
        map: normalize_values(&d.map),
    }
}

fn normalize_values(m: &TokenMap) -> TokenMap {
    let lo = m.values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = m.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = f64::from(hi) - f64::from(lo);
    let values = if span > 0.0 && span.is_finite() {
        m.values
            .iter()
            .map(|&v| ((f64::from(v) - f64::from(lo)) / span).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        vec![0.0; m.values.len()]
    };
    TokenMap {
        height: m.height,
        width: m.width,
        values,
    }
}

fn check_window(maps: &[NormalizedMap]) -> Result<()> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("softmax_fuse needs a non-empty window"))?;
    if maps.iter().any(|m| !m.map.same_grid(&first.map)) {
        return Err(Error::invalid(
            "softmax_fuse maps disagree on the token grid",
        ));
    }
    Ok(())
}

/// Per-map, per-token weights `exp(δ̃_t) / Σ_t' exp(δ̃_t')`.
pub fn fusion_weights(maps: &[NormalizedMap]) -> Result<Vec<Vec<f64>>> {
    check_window(maps)?;
    let tokens = maps[0].map.values.len();
    let mut weights = vec![vec![0.0f64; tokens]; maps.len()];
    for i in 0..tokens {
        let peak = maps
            .iter()
            .map(|m| f64::from(m.map.values[i]))
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = maps
            .iter()
            .map(|m| (f64::from(m.map.values[i]) - peak).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        for (w, e) in weights.iter_mut().zip(exps) {
            w[i] = e / total;
        }
    }
    Ok(weights)
}

/// `δ̂ = Σ_t α_t · δ̃_t` with softmax weights over the window.
pub fn softmax_fuse(maps: &[NormalizedMap]) -> Result<FusedMap> {
    let weights = fusion_weights(maps)?;
    let first = &maps[0].map;
    let values = (0..first.values.len())
        .map(|i| {
            let lo = maps
                .iter()
                .map(|m| m.map.values[i])
                .fold(f32::INFINITY, f32::min);
            let hi = maps
                .iter()
                .map(|m| m.map.values[i])
                .fold(f32::NEG_INFINITY, f32::max);
            let v: f64 = maps
                .iter()
                .zip(&weights)
                .map(|(m, w)| w[i] * f64::from(m.map.values[i]))
                .sum();
            (v as f32).clamp(lo, hi)
        })
        .collect();
    Ok(FusedMap {
        map: TokenMap {
            height: first.height,
            width: first.width,
            values,
        },
        window: maps.len(),
    })
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`), any offset.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - 1 - r) as usize
    }
}

/// Normalized, truncated 1-D Gaussian of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let radius = (3.0 * f64::from(sigma)).ceil() as isize;
    let s2 = 2.0 * f64::from(sigma) * f64::from(sigma);
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / s2).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Separable Gaussian convolution with reflect padding, clamped to `[0, 1]`.
/// `σ = 0` returns the map unchanged.
pub fn gaussian_smooth(m: &FusedMap, sigma: f32) -> Result<SoftMask> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "smoothing sigma {sigma} must be finite and non-negative"
        )));
    }
    if sigma == 0.0 {
        return Ok(SoftMask {
            map: m.map.clone(),
            sigma,
        });
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let (h, w) = (m.map.height, m.map.width);
    let src: Vec<f64> = m.map.values.iter().map(|&v| f64::from(v)).collect();
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * src[y * w + reflect(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut values = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * rows[reflect(y as isize + k as isize - r, h) * w + x])
                .sum();
            values[y * w + x] = (v as f32).clamp(0.0, 1.0);
        }
    }
    Ok(SoftMask {
        map: TokenMap {
            height: h,
            width: w,
            values,
        },
        sigma,
    })
}

/// 1 where `soft > τ`, else 0.
pub fn binarize(m: &SoftMask, tau: f32) -> Result<EditMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!(
            "threshold {tau} must lie strictly inside (0, 1)"
        )));
    }
    let values = m
        .map
        .values
        .iter()
        .map(|&v| if v > tau { 1.0 } else { 0.0 })
        .collect();
    Ok(EditMask {
        soft: m.map.clone(),
        binary: TokenMap {
            height: m.map.height,
            width: m.map.width,
            values,
        },
        tau,
        sigma: m.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dmap(h: usize, w: usize, values: Vec<f32>) -> DivergenceMap {
        DivergenceMap {
            step: 0,
            map: TokenMap::new(h, w, values).unwrap(),
        }
    }

    fn nmap(values: Vec<f32>) -> NormalizedMap {
        let n = values.len();
        NormalizedMap {
            step: 0,
            map: TokenMap::new(1, n, values).unwrap(),
        }
    }

    fn fused(h: usize, w: usize, values: Vec<f32>) -> FusedMap {
        FusedMap {
            map: TokenMap::new(h, w, values).unwrap(),
            window: 1,
        }
    }

    #[test]
    fn divergence_examples() {
        let a = LatentGrid::from_vec(1, 3, 2, vec![1.0, 2.0, 0.0, 0.0, -1.0, 5.0]).unwrap();
        assert!(compute_divergence(&a, &a, 0)
            .unwrap()
            .map
            .values
            .iter()
            .all(|&v| v == 0.0));
        let mut b = a.clone();
        b.values_mut()[2] += 1.0;
        assert_eq!(
            compute_divergence(&a, &b, 3).unwrap().map.values,
            vec![0.0, 1.0, 0.0]
        );
        let mut c = a.clone();
        c.values_mut()[4] += 3.0;
        c.values_mut()[5] += 4.0;
        assert_eq!(
            compute_divergence(&c, &a, 0).unwrap().map.values,
            vec![0.0, 0.0, 5.0]
        );
        assert!(compute_divergence(&a, &LatentGrid::zeros(3, 1, 2), 0).is_err());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(
            minmax_normalize(&dmap(1, 3, vec![1.0, 3.0, 5.0]))
                .map
                .values,
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            minmax_normalize(&dmap(2, 2, vec![0.7; 4])).map.values,
            vec![0.0; 4]
        );
    }

    #[test]
    fn fusion_examples() {
        let single = softmax_fuse(&[nmap(vec![0.2, 0.9])]).unwrap();
        assert_eq!(single.map.values, vec![0.2, 0.9]);
        let two = softmax_fuse(&[nmap(vec![0.0]), nmap(vec![1.0])]).unwrap();
        let e = std::f64::consts::E;
        let oracle = e / (1.0 + e);
        assert!((f64::from(two.map.values[0]) - oracle).abs() < 1e-6);
        assert!((f64::from(two.map.values[0]) - 0.7311).abs() < 1e-4);
        let same = softmax_fuse(&[
            nmap(vec![0.3, 0.6]),
            nmap(vec![0.3, 0.6]),
            nmap(vec![0.3, 0.6]),
        ])
        .unwrap();
        assert_eq!(same.map.values, vec![0.3, 0.6]);
        assert!(softmax_fuse(&[]).is_err());
        assert!(softmax_fuse(&[nmap(vec![0.0]), nmap(vec![0.0, 1.0])]).is_err());
    }

    /// Direct double sum over the kernel support with reflected indices.
    fn brute_convolve(m: &TokenMap, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut weights = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                weights.push((
                    dy,
                    dx,
                    (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp(),
                ));
            }
        }
        let total: f64 = weights.iter().map(|w| w.2).sum();
        let mirror = |i: isize, n: isize| -> isize {
            let mut i = i;
            while i < 0 || i >= n {
                i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
            }
            i
        };
        let (h, w) = (m.height as isize, m.width as isize);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx, wt) in &weights {
                    acc += wt
                        * f64::from(m.values[(mirror(y + dy, h) * w + mirror(x + dx, w)) as usize]);
                }
                out.push(acc / total);
            }
        }
        out
    }

    #[test]
    fn smoothing_examples() {
        let c = fused(5, 6, vec![0.4; 30]);
        for v in gaussian_smooth(&c, 1.0).unwrap().map.values {
            assert!((v - 0.4).abs() < 1e-6);
        }
        let input: Vec<f32> = (0..30).map(|i| (i % 7) as f32 / 7.0).collect();
        assert_eq!(
            gaussian_smooth(&fused(5, 6, input.clone()), 0.0)
                .unwrap()
                .map
                .values,
            input
        );

        let mut impulse = vec![0.0f32; 81];
        impulse[40] = 1.0;
        let m = fused(9, 9, impulse);
        let out = gaussian_smooth(&m, 1.0).unwrap();
        let oracle = brute_convolve(&m.map, 1.0);
        for (a, b) in out.map.values.iter().zip(&oracle) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
        let mass: f64 = out.map.values.iter().map(|&v| f64::from(v)).sum();
        assert!((mass - 1.0).abs() < 1e-6);

        // boundary support: still matches the reflected direct sum
        let edge: Vec<f32> = (0..24).map(|i| ((i * 5) % 11) as f32 / 11.0).collect();
        let m = fused(4, 6, edge);
        let out = gaussian_smooth(&m, 1.3).unwrap();
        for (a, b) in out.map.values.iter().zip(brute_convolve(&m.map, 1.3)) {
            assert!((f64::from(*a) - b).abs() < 1e-6);
        }
        assert!(gaussian_smooth(&m, -1.0).is_err());
    }

    #[test]
    fn binarize_examples() {
        let soft = SoftMask {
            map: TokenMap::new(1, 2, vec![0.34, 0.36]).unwrap(),
            sigma: 1.0,
        };
        let m = binarize(&soft, 0.35).unwrap();
        assert_eq!(m.binary.values, vec![0.0, 1.0]);
        assert_eq!(m.soft, soft.map);
        let zeros = SoftMask {
            map: TokenMap::filled(3, 3, 0.0),
            sigma: 1.0,
        };
        assert!(binarize(&zeros, 0.35)
            .unwrap()
            .binary
            .values
            .iter()
            .all(|&v| v == 0.0));
        let ones = SoftMask {
            map: TokenMap::filled(3, 3, 1.0),
            sigma: 1.0,
        };
        assert!(binarize(&ones, 0.35)
            .unwrap()
            .binary
            .values
            .iter()
            .all(|&v| v == 1.0));
        let tie = SoftMask {
            map: TokenMap::filled(1, 1, 0.35),
            sigma: 0.0,
        };
        assert_eq!(binarize(&tie, 0.35).unwrap().binary.values, vec![0.0]);
        assert!(binarize(&tie, 1.0).is_err());
    }

    fn map_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..7, 1usize..7)
            .prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f32..10.0, h * w)))
    }

    proptest! {
        #[test]
        fn normalization_range_and_idempotence((h, w, v) in map_strategy()) {
            let n = minmax_normalize(&dmap(h, w, v));
            prop_assert!(n.map.values.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let lo = n.map.values.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = n.map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            if hi > 0.0 {
                prop_assert_eq!((lo, hi), (0.0, 1.0));
                let again = minmax_normalize(&DivergenceMap { step: 0, map: n.map.clone() });
                for (a, b) in again.map.values.iter().zip(&n.map.values) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn fusion_is_a_permutation_invariant_convex_combination(
            maps in (1usize..6).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(0.0f32..=1.0, 4), n))
        ) {
            let window: Vec<NormalizedMap> = maps.iter().cloned().map(nmap).collect();
            let weights = fusion_weights(&window).unwrap();
            for i in 0..4 {
                let total: f64 = weights.iter().map(|w| w[i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
            let f = softmax_fuse(&window).unwrap();
            for i in 0..4 {
                let lo = maps.iter().map(|m| m[i]).fold(f32::INFINITY, f32::min);
                let hi = maps.iter().map(|m| m[i]).fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(lo <= f.map.values[i] && f.map.values[i] <= hi);
            }
            let mut rev = window.clone();
            rev.reverse();
            let g = softmax_fuse(&rev).unwrap();
            for (a, b) in f.map.values.iter().zip(&g.map.values) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn interior_impulse_mass_is_preserved(sigma in 0.1f32..1.5, value in 0.01f32..1.0) {
            let r = (3.0 * sigma).ceil() as usize;
            let n = 2 * r + 3;
            let mut v = vec![0.0f32; n * n];
            v[(n / 2) * n + n / 2] = value;
            let out = gaussian_smooth(&fused(n, n, v), sigma).unwrap();
            let mass: f64 = out.map.values.iter().map(|&x| f64::from(x)).sum();
            prop_assert!((mass - f64::from(value)).abs() < 1e-6);
        }

        #[test]
        fn binarize_is_monotone_in_tau((h, w, v) in map_strategy(), t1 in 0.01f32..0.99, t2 in 0.01f32..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let soft = SoftMask { map: TokenMap::new(h, w, v.iter().map(|x| x / 10.0).collect()).unwrap(), sigma: 0.0 };
            let a = binarize(&soft, lo).unwrap();
            let b = binarize(&soft, hi).unwrap();
            for (x, y) in a.binary.values.iter().zip(&b.binary.values) {
                prop_assert!(y <= x);
            }
        }
    }
}
