//! Grayscale images and the netpbm / raw-map file formats.
//!
//! Images move through the pipeline as [`GrayImage`] with values in `[0, 1]`.
//! They are written as binary PPM (`P6`, gray replicated into RGB), masks and
//! maps as binary PGM (`P5`). Maps are additionally written losslessly as a
//! raw little-endian `f32` file:
//!
//! ```text
//! b"TDMMAP\0\0" | u32 version | u32 height | u32 width | height*width f32
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAP_MAGIC: &[u8; 8] = b"TDMMAP\0\0";
const MAP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn same_shape(&self, other: &GrayImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Quantize a `[0, 1]` value to 8 bits, rounding half up.
pub fn to_u8(value: f32) -> u8 {
    let scaled = f64::from(value.clamp(0.0, 1.0)) * 255.0;
    (scaled + 0.5).floor().min(255.0) as u8
}

pub fn write_ppm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.pixels.len() * 3);
    for &p in &image.pixels {
        let b = to_u8(p);
        out.extend_from_slice(&[b, b, b]);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid("pgm payload does not match its dimensions"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_u8(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary PPM or PGM. Color pixels are averaged to gray.
pub fn read_netpbm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let mut cursor = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if cursor < bytes.len() && bytes[cursor] == b'#' {
            while cursor < bytes.len() && bytes[cursor] != b'\n' {
                cursor += 1;
            }
            continue;
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(Error::format(format!(
                "{}: truncated netpbm header",
                path.display()
            )));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..cursor]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    cursor += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::format(format!(
                "{}: unsupported netpbm kind {other}",
                path.display()
            )))
        }
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("{}: bad header field {s:?}", path.display())))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format(format!(
            "{}: only 8-bit netpbm is supported",
            path.display()
        )));
    }
    let raster = bytes.get(cursor..).unwrap_or(&[]);
    if raster.len() < width * height * channels {
        return Err(Error::format(format!(
            "{}: truncated raster",
            path.display()
        )));
    }
    let pixels = raster[..width * height * channels]
        .chunks_exact(channels)
        .map(|px| px.iter().map(|&b| f32::from(b)).sum::<f32>() / (255.0 * channels as f32))
        .collect();
    GrayImage::new(width, height, pixels)
}

pub fn write_raw_map(path: &Path, height: usize, width: usize, values: &[f32]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::invalid(
            "raw map payload does not match its dimensions",
        ));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAP_MAGIC)?;
    file.write_all(&MAP_VERSION.to_le_bytes())?;
    file.write_all(&(height as u32).to_le_bytes())?;
    file.write_all(&(width as u32).to_le_bytes())?;
    let mut payload = Vec::with_capacity(values.len() * 4);
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Returns `(height, width, values)`.
pub fn read_raw_map(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAP_MAGIC {
        return Err(Error::format(format!(
            "{}: not a raw map file",
            path.display()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(8) != MAP_VERSION {
        return Err(Error::format(format!(
            "{}: unsupported map version {}",
            path.display(),
            word(8)
        )));
    }
    let (height, width) = (word(12) as usize, word(16) as usize);
    let payload = &bytes[20..];
    if payload.len() != height * width * 4 {
        return Err(Error::format(format!(
            "{}: payload length mismatch",
            path.display()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((height, width, values))
}
