//! Token-grid latents and discrete condition ids.

use crate::error::{Error, Result};

/// An `height × width` grid of `channels`-dimensional tokens, stored row-major
/// with the channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl LatentGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        LatentGrid {
            height,
            width,
            channels,
            values: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "latent of shape {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(LatentGrid {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn token(&self, index: usize) -> &[f32] {
        &self.values[index * self.channels..(index + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &LatentGrid) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &LatentGrid, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &LatentGrid, scale: f32) -> Result<LatentGrid> {
        self.check_same_shape(other, "add_scaled")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(self.with_values(values))
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &LatentGrid) -> Result<LatentGrid> {
        self.check_same_shape(other, "sub")?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.with_values(values))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> LatentGrid {
        self.with_values(self.values.iter().copied().map(f).collect())
    }

    pub fn squared_distance(&self, other: &LatentGrid) -> Result<f64> {
        self.check_same_shape(other, "squared_distance")?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| {
                let d = f64::from(*a) - f64::from(*b);
                d * d
            })
            .sum())
    }

    fn with_values(&self, values: Vec<f32>) -> LatentGrid {
        debug_assert_eq!(values.len(), self.values.len());
        LatentGrid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            values,
        }
    }
}

/// Identifies either a learned condition embedding or the unconditional one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionId(pub u32);

impl ConditionId {
    /// The reserved unconditional id. The embedding table stores it after the
    /// `vocab` learned rows.
    pub const NULL: ConditionId = ConditionId(u32::MAX);

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }

    /// Row of the embedding table for this id under a vocabulary of `vocab`.
    pub fn embedding_row(self, vocab: usize) -> Result<usize> {
        if self.is_null() {
            Ok(vocab)
        } else if (self.0 as usize) < vocab {
            Ok(self.0 as usize)
        } else {
            Err(Error::invalid(format!(
                "condition id {} outside vocabulary of {vocab}",
                self.0
            )))
        }
    }
}

impl std::fmt::Display for ConditionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_null() {
            write!(f, "null")
        } else {
            write!(f, "{}", self.0)
        }
    }
}
