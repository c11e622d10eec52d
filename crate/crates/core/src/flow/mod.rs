//! Rectified-flow definitions and the flow-matching trainer.
//!
//! Convention: `t = 0` is the data side (`x0`), `t = 1` the Gaussian side
//! (`x1`). Points on the straight path are `(1 − t)·x0 + t·x1` and the target
//! velocity is `x1 − x0`.

mod checkpoint;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use train::{train, TrainConfig, TrainReport, TrainSample};

use crate::error::{Error, Result};
use crate::latent::{ConditionId, LatentGrid};
use crate::net::VelocityNet;

pub fn interpolate(x0: &LatentGrid, x1: &LatentGrid, t: f32) -> Result<LatentGrid> {
    x0.check_same_shape(x1, "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!(
            "interpolation time {t} outside [0, 1]"
        )));
    }
    let values = x0
        .values()
        .iter()
        .zip(x1.values())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    LatentGrid::from_vec(x0.height(), x0.width(), x0.channels(), values)
}

pub fn target_velocity(x0: &LatentGrid, x1: &LatentGrid) -> Result<LatentGrid> {
    x1.sub(x0)
        .map_err(|_| Error::invalid("target_velocity: endpoint shapes differ"))
}

/// Anything that maps `(x_t, t, c)` to a velocity.
pub trait VelocityModel {
    fn velocity(&self, x: &LatentGrid, t: f32, cond: ConditionId) -> Result<LatentGrid>;
}

impl VelocityModel for VelocityNet {
    fn velocity(&self, x: &LatentGrid, t: f32, cond: ConditionId) -> Result<LatentGrid> {
        self.predict(x, t, cond)
    }
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    clean: Vec<LatentGrid>,
    noise: Vec<LatentGrid>,
    conditions: Vec<ConditionId>,
    times: Vec<f32>,
}

impl TrainBatch {
    pub fn new(
        clean: Vec<LatentGrid>,
        noise: Vec<LatentGrid>,
        conditions: Vec<ConditionId>,
        times: Vec<f32>,
    ) -> Result<Self> {
        let n = clean.len();
        if noise.len() != n || conditions.len() != n || times.len() != n {
            return Err(Error::invalid("train batch sequences differ in length"));
        }
        if let Some(t) = times.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::invalid(format!(
                "train time {t} not strictly inside (0, 1)"
            )));
        }
        for (a, b) in clean.iter().zip(&noise) {
            a.check_same_shape(b, "train batch endpoints")?;
        }
        Ok(TrainBatch {
            clean,
            noise,
            conditions,
            times,
        })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Mean over every scalar element of `‖v(x_t, t, c) − (x1 − x0)‖²`.
pub fn cfm_loss(model: &dyn VelocityModel, batch: &TrainBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("cfm_loss on an empty batch"));
    }
    let mut total = 0.0;
    let mut elements = 0usize;
    for i in 0..batch.len() {
        let (x0, x1, t) = (&batch.clean[i], &batch.noise[i], batch.times[i]);
        let xt = interpolate(x0, x1, t)?;
        let pred = model.velocity(&xt, t, batch.conditions[i])?;
        let target = target_velocity(x0, x1)?;
        total += pred.squared_distance(&target)?;
        elements += target.values().len();
    }
    Ok(total / elements as f64)
}
