use crate::error::{Error, Result};
use crate::imageio::GrayImage;

/// Per-token edge strength: central-difference gradient magnitude averaged
/// over each `patch × patch` tile, then divided by its maximum so the map
/// lies in `[0, 1]`. Borders replicate the edge pixel. A constant image maps
/// to all zeros.
pub fn adapter_input_from_image(image: &GrayImage, patch: usize) -> Result<Vec<f32>> {
    let (w, h) = (image.width(), image.height());
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::invalid(format!(
            "{w}x{h} image is not tiled by {patch}-pixel patches"
        )));
    }
    let (gw, gh) = (w / patch, h / patch);
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        f64::from(image.get(xc, yc))
    };
    let mut map = vec![0f64; gw * gh];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let gx = 0.5 * (at(xi + 1, yi) - at(xi - 1, yi));
            let gy = 0.5 * (at(xi, yi + 1) - at(xi, yi - 1));
            map[(y / patch) * gw + x / patch] += (gx * gx + gy * gy).sqrt();
        }
    }
    let area = (patch * patch) as f64;
    map.iter_mut().for_each(|v| *v /= area);
    let max = map.iter().copied().fold(0.0, f64::max);
    Ok(map
        .into_iter()
        .map(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_edges() {
        let map = adapter_input_from_image(&GrayImage::filled(32, 32, 0.4), 8).unwrap();
        assert!(map.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_lights_only_straddling_patches() {
        let mut img = GrayImage::filled(32, 32, 0.0);
        for y in 0..32 {
            for x in 20..32 {
                img.set(x, y, 1.0);
            }
        }
        // step between x=19 and x=20 lies inside token column 2
        let map = adapter_input_from_image(&img, 8).unwrap();
        for ty in 0..4 {
            for tx in 0..4 {
                let v = map[ty * 4 + tx];
                if tx == 2 {
                    assert!(v > 0.0);
                } else {
                    assert_eq!(v, 0.0, "token ({tx},{ty})");
                }
            }
        }

        // a step on a patch boundary straddles both neighbours
        let mut img = GrayImage::filled(32, 32, 0.0);
        for y in 0..32 {
            for x in 16..32 {
                img.set(x, y, 1.0);
            }
        }
        let map = adapter_input_from_image(&img, 8).unwrap();
        let row: Vec<bool> = (0..4).map(|tx| map[tx] > 0.0).collect();
        assert_eq!(row, vec![false, true, true, false]);
    }

    #[test]
    fn random_image_stays_in_unit_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f32> = (0..64 * 64).map(|_| rng.gen()).collect();
        let map = adapter_input_from_image(&GrayImage::new(64, 64, px).unwrap(), 8).unwrap();
        assert!(map.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.contains(&1.0));
    }
}
