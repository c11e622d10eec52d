use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::latent::{ConditionId, LatentGrid};
use crate::net::{AdapterInput, Gradients, Params, VelocityNet};

/// One clean training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub latent: LatentGrid,
    pub cond: ConditionId,
    /// Edge-strength map fed to the adapter branches when they are sampled on.
    pub adapter_map: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Probability of replacing the condition with the null id.
    pub cond_dropout: f32,
    /// Per-branch probability of training with the adapter switched on.
    pub adapter_prob: f32,
    pub warmup_steps: usize,
    /// Cosine decay ends at `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f32,
    /// Global gradient-norm clip.
    pub grad_clip: f32,
    /// The run is accepted when the final running loss is below this.
    pub accept_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 0,
            cond_dropout: 0.1,
            adapter_prob: 0.5,
            warmup_steps: 100,
            final_lr_fraction: 0.05,
            grad_clip: 1.0,
            accept_loss: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "learning_rate must be a positive finite number",
            ));
        }
        for (name, p) in [
            ("cond_dropout", self.cond_dropout),
            ("adapter_prob", self.adapter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// One mean batch loss per optimizer step.
    pub history: Vec<f64>,
    pub batches_per_epoch: usize,
    /// Mean loss over the last epoch (`NaN` when no step ran).
    pub final_running_loss: f64,
    pub accepted: bool,
}

struct Adam {
    m: Params,
    v: Params,
    step: i32,
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(like: &Params) -> Self {
        let mut m = like.clone();
        m.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        Adam {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    fn update(&mut self, params: &mut Params, grads: &Gradients, lr: f32) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        let tensors = params.tensors_mut().into_iter();
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
            let (p, g) = (p.as_slice_mut().unwrap(), g.as_slice().unwrap());
            let (m, v) = (m.as_slice_mut().unwrap(), v.as_slice_mut().unwrap());
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f32 {
    let warm = if cfg.warmup_steps > 0 {
        ((step + 1) as f32 / cfg.warmup_steps as f32).min(1.0)
    } else {
        1.0
    };
    let progress = if total > 1 {
        step as f32 / (total - 1) as f32
    } else {
        0.0
    };
    let floor = cfg.final_lr_fraction;
    let cosine = floor + (1.0 - floor) * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    cfg.learning_rate * warm * cosine
}

/// Minibatch flow-matching training with Adam. Every random draw (shuffle,
/// times, noise, condition dropout, adapter switches) comes from one ChaCha
/// stream seeded by `config.seed`, so identical inputs give bit-identical
/// parameters and histories.
pub fn train(
    net: &mut VelocityNet,
    dataset: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let model = net.config().clone();
    for s in dataset {
        if s.latent.shape() != (model.grid_height, model.grid_width, model.token_dim) {
            return Err(Error::invalid(
                "training latent does not match the model grid",
            ));
        }
        if s.adapter_map.len() != model.tokens() {
            return Err(Error::invalid("adapter map does not match the token grid"));
        }
    }
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let total_steps = batches_per_epoch * config.epochs;
    let mut history = Vec::with_capacity(total_steps);
    if config.epochs == 0 {
        return Ok(TrainReport {
            history,
            batches_per_epoch,
            final_running_loss: f64::NAN,
            accepted: false,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(net.params());
    let mut grads = Params::zeros(&model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let elems = model.tokens() * model.token_dim;
    let mut strengths = vec![0.0f32; model.adapter_branches];

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let step = history.len();
            grads.tensors_mut().into_iter().for_each(|g| g.fill(0.0));
            let norm = 1.0 / (batch.len() * elems) as f32;
            let mut batch_loss = 0.0f64;
            for &idx in batch {
                let sample = &dataset[idx];
                let t: f32 = loop {
                    let t: f32 = rng.gen();
                    if t > 0.0 && t < 1.0 {
                        break t;
                    }
                };
                let noise: Vec<f32> = (0..elems).map(|_| rng.sample(StandardNormal)).collect();
                let cond = if rng.gen::<f32>() < config.cond_dropout {
                    ConditionId::NULL
                } else {
                    sample.cond
                };
                for s in strengths.iter_mut() {
                    *s = if rng.gen::<f32>() < config.adapter_prob {
                        1.0
                    } else {
                        0.0
                    };
                }
                let adapter = strengths.iter().any(|&s| s != 0.0).then_some(AdapterInput {
                    map: &sample.adapter_map,
                    strengths: &strengths,
                });

                let x0 = sample.latent.values();
                let xt_vals: Vec<f32> = x0
                    .iter()
                    .zip(&noise)
                    .map(|(a, b)| (1.0 - t) * a + t * b)
                    .collect();
                let xt = LatentGrid::from_vec(
                    model.grid_height,
                    model.grid_width,
                    model.token_dim,
                    xt_vals,
                )?;
                let (pred, tape) = net
                    .forward_taped(&xt, t, cond, adapter)
                    .map_err(|e| e.at_step(step))?;
                let mut d_out = Vec::with_capacity(elems);
                for ((p, a), b) in pred.values().iter().zip(x0).zip(&noise) {
                    let diff = p - (b - a);
                    batch_loss += f64::from(diff) * f64::from(diff);
                    d_out.push(2.0 * diff * norm);
                }
                let d_out = ArrayView2::from_shape((model.tokens(), model.token_dim), &d_out)
                    .expect("gradient buffer matches output");
                net.backward(&tape, d_out, &mut grads);
            }
            let loss = batch_loss / (batch.len() * elems) as f64;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step,
                    message: format!(
                        "training loss became non-finite; lower the learning rate (currently {})",
                        config.learning_rate
                    ),
                });
            }
            history.push(loss);

            let sq: f64 = grads
                .tensors()
                .iter()
                .flat_map(|g| g.iter())
                .map(|&g| f64::from(g) * f64::from(g))
                .sum();
            let gnorm = sq.sqrt() as f32;
            if config.grad_clip > 0.0 && gnorm > config.grad_clip {
                let s = config.grad_clip / gnorm;
                grads
                    .tensors_mut()
                    .into_iter()
                    .for_each(|g| g.mapv_inplace(|v| v * s));
            }
            adam.update(
                net.params_mut(),
                &grads,
                learning_rate(config, step, total_steps),
            );
        }
    }
    let tail = &history[history.len() - batches_per_epoch..];
    let final_running_loss = tail.iter().sum::<f64>() / tail.len() as f64;
    Ok(TrainReport {
        history,
        batches_per_epoch,
        final_running_loss,
        accepted: final_running_loss < config.accept_loss,
    })
}
