use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub bo: Array2<f32>,
    pub w1: Array2<f32>,
    pub b1: Array2<f32>,
    pub w2: Array2<f32>,
    pub b2: Array2<f32>,
    /// One row per adapter branch.
    pub adapter: Array2<f32>,
}

/// All network weights. Biases are stored as `1 × n` rows.
///
/// [`Params::tensors`] fixes the serialization order: `w_in, b_in, pos,
/// w_time, b_time, cond, cond_map`, then per block `wq, wk, wv, wo, bo, w1, b1, w2, b2,
/// adapter`, then `w_out, b_out, w_skip, b_skip, w_gain, b_gain`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub w_in: Array2<f32>,
    pub b_in: Array2<f32>,
    pub pos: Array2<f32>,
    pub w_time: Array2<f32>,
    pub b_time: Array2<f32>,
    pub cond: Array2<f32>,
    /// Per-token condition embedding: row `c` holds `tokens × width` values.
    pub cond_map: Array2<f32>,
    pub blocks: Vec<BlockParams>,
    pub w_out: Array2<f32>,
    pub b_out: Array2<f32>,
    /// Per-channel input skip gain `s(t) = φ(t)·w_skip + b_skip`.
    pub w_skip: Array2<f32>,
    pub b_skip: Array2<f32>,
    /// Head gain `1 + e·w_gain + b_gain` from the time-plus-condition embedding `e`.
    pub w_gain: Array2<f32>,
    pub b_gain: Array2<f32>,
}

impl Params {
    /// Shapes in serialization order.
    pub fn shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
        let (d, m, p) = (config.width(), config.mlp_hidden, config.token_dim);
        let mut shapes = vec![
            (p, d),
            (1, d),
            (config.tokens(), d),
            (config.time_features, d),
            (1, d),
            (config.vocab + 1, d),
            (config.vocab + 1, config.tokens() * d),
        ];
        for _ in 0..config.blocks {
            shapes.extend([
                (d, d),
                (d, d),
                (d, d),
                (d, d),
                (1, d),
                (d, m),
                (1, m),
                (m, d),
                (1, d),
            ]);
            shapes.push((config.adapter_branches, d));
        }
        shapes.extend([
            (d, p),
            (1, p),
            (config.time_features, p),
            (1, p),
            (d, p),
            (1, p),
        ]);
        shapes
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mut it = Self::shapes(config).into_iter().map(Array2::zeros);
        Self::assemble(config, &mut it)
    }

    fn assemble(config: &ModelConfig, it: &mut impl Iterator<Item = Array2<f32>>) -> Self {
        let mut next = || it.next().expect("shape list covers every tensor");
        let (w_in, b_in, pos, w_time, b_time, cond) =
            (next(), next(), next(), next(), next(), next());
        let cond_map = next();
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
                adapter: next(),
            })
            .collect();
        let (w_out, b_out, w_skip, b_skip) = (next(), next(), next(), next());
        let (w_gain, b_gain) = (next(), next());
        Params {
            w_in,
            b_in,
            pos,
            w_time,
            b_time,
            cond,
            cond_map,
            blocks,
            w_out,
            b_out,
            w_skip,
            b_skip,
            w_gain,
            b_gain,
        }
    }

    /// Gaussian fan-in initialization. Residual output projections are
    /// scaled down by `√(2·blocks)`; the condition map, output head, skip, head gain and adapters start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize, std: f32| {
            Array2::from_shape_simple_fn((rows, cols), || {
                let z: f32 = StandardNormal.sample(&mut rng);
                z * std
            })
        };
        let (d, m, p) = (config.width(), config.mlp_hidden, config.token_dim);
        let fan = |n: usize| 1.0 / (n as f32).sqrt();
        let resid = 1.0 / ((2 * config.blocks) as f32).sqrt();
        let w_in = gauss(p, d, fan(p));
        let pos = gauss(config.tokens(), d, 0.5);
        let w_time = gauss(config.time_features, d, fan(config.time_features));
        let cond = gauss(config.vocab + 1, d, 0.5);
        let blocks = (0..config.blocks)
            .map(|_| BlockParams {
                wq: gauss(d, d, fan(d)),
                wk: gauss(d, d, fan(d)),
                wv: gauss(d, d, fan(d)),
                wo: gauss(d, d, fan(d) * resid),
                bo: Array2::zeros((1, d)),
                w1: gauss(d, m, fan(d)),
                b1: Array2::zeros((1, m)),
                w2: gauss(m, d, fan(m) * resid),
                b2: Array2::zeros((1, d)),
                adapter: Array2::zeros((config.adapter_branches, d)),
            })
            .collect();
        Params {
            w_in,
            b_in: Array2::zeros((1, d)),
            pos,
            w_time,
            b_time: Array2::zeros((1, d)),
            cond,
            cond_map: Array2::zeros((config.vocab + 1, config.tokens() * d)),
            blocks,
            w_out: Array2::zeros((d, p)),
            b_out: Array2::zeros((1, p)),
            w_skip: Array2::zeros((config.time_features, p)),
            b_skip: Array2::zeros((1, p)),
            w_gain: Array2::zeros((d, p)),
            b_gain: Array2::zeros((1, p)),
        }
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Array2<f32>>) -> Result<Self> {
        let shapes = Self::shapes(config);
        if tensors.len() != shapes.len() {
            return Err(Error::format(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (t, s)) in tensors.iter().zip(&shapes).enumerate() {
            if t.dim() != *s {
                return Err(Error::format(format!(
                    "tensor {i} has shape {:?}, expected {s:?}",
                    t.dim()
                )));
            }
        }
        Ok(Self::assemble(config, &mut tensors.into_iter()))
    }

    pub fn tensors(&self) -> Vec<&Array2<f32>> {
        let mut out = vec![
            &self.w_in,
            &self.b_in,
            &self.pos,
            &self.w_time,
            &self.b_time,
            &self.cond,
            &self.cond_map,
        ];
        for b in &self.blocks {
            out.extend([
                &b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.w1, &b.b1, &b.w2, &b.b2, &b.adapter,
            ]);
        }
        out.extend([
            &self.w_out,
            &self.b_out,
            &self.w_skip,
            &self.b_skip,
            &self.w_gain,
            &self.b_gain,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f32>> {
        let mut out = vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.pos,
            &mut self.w_time,
            &mut self.b_time,
            &mut self.cond,
            &mut self.cond_map,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.bo,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
                &mut b.adapter,
            ]);
        }
        out.extend([
            &mut self.w_out,
            &mut self.b_out,
            &mut self.w_skip,
            &mut self.b_skip,
            &mut self.w_gain,
            &mut self.b_gain,
        ]);
        out
    }

    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let shapes = Self::shapes(config);
        let tensors = self.tensors();
        if tensors.len() != shapes.len() || tensors.iter().zip(&shapes).any(|(t, s)| t.dim() != *s)
        {
            return Err(Error::config(
                "parameter shapes do not match the model config",
            ));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}
