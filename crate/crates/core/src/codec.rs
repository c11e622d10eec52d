//! Identity patch encoding between pixel images and token latents.
//!
//! Each non-overlapping `patch × patch` tile becomes one token. Per pixel the
//! token carries up to three channels: intensity, a horizontal coordinate ramp
//! and a vertical coordinate ramp, all mapped to `[-1, 1]`. Decoding reads the
//! intensity channel back and ignores the ramps.

use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::latent::LatentGrid;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchCodec {
    pub patch: usize,
    /// 1 = intensity only, 2 = plus x ramp, 3 = plus x and y ramps.
    pub pixel_channels: usize,
}

impl Default for PatchCodec {
    fn default() -> Self {
        PatchCodec {
            patch: 8,
            pixel_channels: 3,
        }
    }
}

impl PatchCodec {
    pub fn new(patch: usize, pixel_channels: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if !(1..=3).contains(&pixel_channels) {
            return Err(Error::config(format!(
                "pixel channels must be 1, 2 or 3, got {pixel_channels}"
            )));
        }
        Ok(PatchCodec {
            patch,
            pixel_channels,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.pixel_channels
    }

    pub fn grid_for(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        if !width.is_multiple_of(self.patch)
            || !height.is_multiple_of(self.patch)
            || width == 0
            || height == 0
        {
            return Err(Error::invalid(format!(
                "{width}x{height} canvas is not tiled by {p}x{p} patches",
                p = self.patch
            )));
        }
        Ok((height / self.patch, width / self.patch))
    }

    pub fn encode(&self, image: &GrayImage) -> Result<LatentGrid> {
        let (gh, gw) = self.grid_for(image.width(), image.height())?;
        let p = self.patch;
        let ramp = |i: usize, n: usize| {
            if n > 1 {
                2.0 * i as f32 / (n - 1) as f32 - 1.0
            } else {
                0.0
            }
        };
        let mut values = Vec::with_capacity(gh * gw * self.token_dim());
        for ty in 0..gh {
            for tx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        let (x, y) = (tx * p + px, ty * p + py);
                        values.push(2.0 * image.get(x, y) - 1.0);
                        if self.pixel_channels >= 2 {
                            values.push(ramp(x, image.width()));
                        }
                        if self.pixel_channels >= 3 {
                            values.push(ramp(y, image.height()));
                        }
                    }
                }
            }
        }
        LatentGrid::from_vec(gh, gw, self.token_dim(), values)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<GrayImage> {
        if latent.channels() != self.token_dim() {
            return Err(Error::invalid(format!(
                "latent token dim {} does not match codec token dim {}",
                latent.channels(),
                self.token_dim()
            )));
        }
        let p = self.patch;
        let (w, h) = (latent.width() * p, latent.height() * p);
        let mut image = GrayImage::filled(w, h, 0.0);
        for ty in 0..latent.height() {
            for tx in 0..latent.width() {
                let token = latent.token(ty * latent.width() + tx);
                for py in 0..p {
                    for px in 0..p {
                        let v = token[(py * p + px) * self.pixel_channels];
                        image.set(tx * p + px, ty * p + py, ((v + 1.0) * 0.5).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Ok(image)
    }

    /// Expand a per-token map to pixels by patch replication.
    pub fn upsample_tokens(&self, grid_h: usize, grid_w: usize, values: &[f32]) -> Vec<f32> {
        let (w, h) = (grid_w * self.patch, grid_h * self.patch);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = values[(y / self.patch) * grid_w + x / self.patch];
            }
        }
        out
    }
}
