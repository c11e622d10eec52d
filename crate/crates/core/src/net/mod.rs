//! The toy velocity network: a pre-norm transformer over patch tokens.
//!
//! Every block can observe or override the keys and values of its
//! self-attention through an [`AttentionHookMode`]. Blocks may also receive a
//! structure-adapter residual, `Block(z) + Σ β_b · Adapter_b(m)`, where `m` is a
//! per-token edge-strength map and each adapter branch is a single learned
//! projection of that map.
//!
//! The output is `g(e) ⊙ head(LN(h)) + s(t) ⊙ x`. `s(t)` is a per-channel,
//! time-dependent skip of the input latent; without it a residual stream
//! narrower than the token cannot carry the noisy input through to the
//! velocity. `g(e) = 1 + e·W_g + b_g` rescales the head from the
//! time-plus-condition embedding `e`, since near t = 0 the velocity is of
//! order 1/t while `LN(h)` has a fixed scale.

mod adapter;
mod attention;
mod grad;
mod params;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};

pub use adapter::adapter_input_from_image;
pub use attention::attention_with_kv;
pub(crate) use grad::Gradients;
pub use params::{BlockParams, Params};

use crate::error::{Error, Result};
use crate::latent::{ConditionId, LatentGrid};

const LN_EPS: f32 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    /// Per-token input/output dimension (patch pixels × pixel channels).
    pub token_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    /// Number of learned condition ids; the null id gets an extra row.
    pub vocab: usize,
    pub time_features: usize,
    pub adapter_branches: usize,
    /// Blocks whose attention may capture or receive external keys/values.
    pub injection_blocks: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_height: 8,
            grid_width: 8,
            token_dim: 192,
            blocks: 6,
            heads: 4,
            head_dim: 16,
            mlp_hidden: 128,
            vocab: 12,
            time_features: 32,
            adapter_branches: 2,
            injection_blocks: vec![4, 5],
        }
    }
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("token_dim", self.token_dim),
            ("blocks", self.blocks),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model {name} must be positive")));
            }
        }
        if self.time_features < 2 || !self.time_features.is_multiple_of(2) {
            return Err(Error::config("time_features must be an even number ≥ 2"));
        }
        if let Some(&b) = self.injection_blocks.iter().find(|&&b| b >= self.blocks) {
            return Err(Error::config(format!(
                "injection block {b} outside [0, {})",
                self.blocks
            )));
        }
        let mut sorted = self.injection_blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.injection_blocks.len() {
            return Err(Error::config("injection block indices must be distinct"));
        }
        Ok(())
    }

    pub fn is_injection_block(&self, block: usize) -> bool {
        self.injection_blocks.contains(&block)
    }
}

/// What a block's self-attention does with its keys and values.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionHookMode {
    Passthrough,
    /// Record the block's own keys and values; output is unaffected.
    Capture,
    /// Replace keys and values with externally supplied ones.
    InjectFull,
    /// Per token `m ⊙ own + (1 − m) ⊙ external`; one mask value per token.
    InjectBlended(Vec<f32>),
}

impl AttentionHookMode {
    fn injects(&self) -> bool {
        matches!(
            self,
            AttentionHookMode::InjectFull | AttentionHookMode::InjectBlended(_)
        )
    }
}

/// One hook per block.
#[derive(Clone, Debug, PartialEq)]
pub struct HookPlan(pub Vec<AttentionHookMode>);

impl HookPlan {
    pub fn passthrough(config: &ModelConfig) -> Self {
        HookPlan(vec![AttentionHookMode::Passthrough; config.blocks])
    }

    /// `mode` on every injection-capable block, passthrough elsewhere.
    pub fn on_injection_blocks(config: &ModelConfig, mode: AttentionHookMode) -> Self {
        HookPlan(
            (0..config.blocks)
                .map(|b| {
                    if config.is_injection_block(b) {
                        mode.clone()
                    } else {
                        AttentionHookMode::Passthrough
                    }
                })
                .collect(),
        )
    }

    pub fn is_passthrough(&self) -> bool {
        self.0.iter().all(|m| *m == AttentionHookMode::Passthrough)
    }
}

/// Keys and values of one block, each `tokens × (heads · head_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockKv {
    pub keys: Array2<f32>,
    pub values: Array2<f32>,
}

/// Keys/values of the injection-capable blocks for one forward pass.
pub type KvSlice = BTreeMap<usize, BlockKv>;

/// Append-only store of [`KvSlice`]s keyed by evaluation point.
#[derive(Clone, Debug)]
pub struct KvCache<K: Ord> {
    entries: BTreeMap<K, KvSlice>,
}

impl<K: Ord> Default for KvCache<K> {
    fn default() -> Self {
        KvCache {
            entries: BTreeMap::new(),
        }
    }
}

impl<K: Ord + Clone + std::fmt::Debug> KvCache<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Entries are immutable once recorded.
    pub fn record(&mut self, key: K, slice: KvSlice) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Err(Error::invalid(format!(
                "kv cache entry {key:?} already recorded"
            )));
        }
        self.entries.insert(key, slice);
        Ok(())
    }

    pub fn get(&self, key: &K) -> Option<&KvSlice> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.entries.keys()
    }
}

/// Structure-adapter input: a per-token map and one strength per branch.
#[derive(Clone, Copy, Debug)]
pub struct AdapterInput<'a> {
    pub map: &'a [f32],
    pub strengths: &'a [f32],
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardRequest<'a> {
    pub cond: ConditionId,
    pub hooks: &'a HookPlan,
    pub external: Option<&'a KvSlice>,
    pub adapter: Option<AdapterInput<'a>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub velocity: LatentGrid,
    /// Entries for every block whose hook was `Capture`.
    pub captured: KvSlice,
}

#[derive(Clone, Debug)]
pub struct VelocityNet {
    config: ModelConfig,
    params: Params,
}

/// Per-block intermediates kept for the backward pass.
pub(crate) struct BlockTape {
    pub a: Array2<f32>,
    pub rstd_a: Vec<f32>,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    pub probs: Vec<Array2<f32>>,
    pub o: Array2<f32>,
    pub a2: Array2<f32>,
    pub rstd_a2: Vec<f32>,
    pub u: Array2<f32>,
    pub g: Array2<f32>,
}

pub(crate) struct Tape {
    pub x: Array2<f32>,
    pub phi: Array1<f32>,
    pub cond_row: usize,
    pub blocks: Vec<BlockTape>,
    pub a_last: Array2<f32>,
    pub rstd_last: Vec<f32>,
    pub embed: Array2<f32>,
    pub head: Array2<f32>,
    pub gain: Array2<f32>,
    pub adapter_map: Option<Vec<f32>>,
    pub adapter_strengths: Vec<f32>,
}

impl VelocityNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(VelocityNet { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(VelocityNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Vanilla conditional velocity: no hooks, no adapter.
    pub fn predict(&self, x: &LatentGrid, t: f32, cond: ConditionId) -> Result<LatentGrid> {
        let hooks = HookPlan::passthrough(&self.config);
        let req = ForwardRequest {
            cond,
            hooks: &hooks,
            external: None,
            adapter: None,
        };
        Ok(self.forward(x, t, &req)?.velocity)
    }

    pub fn forward(&self, x: &LatentGrid, t: f32, req: &ForwardRequest) -> Result<ForwardOutput> {
        let (velocity, captured) = self.run(x, t, req, None)?;
        Ok(ForwardOutput { velocity, captured })
    }

    pub(crate) fn forward_taped(
        &self,
        x: &LatentGrid,
        t: f32,
        cond: ConditionId,
        adapter: Option<AdapterInput>,
    ) -> Result<(LatentGrid, Tape)> {
        let hooks = HookPlan::passthrough(&self.config);
        let req = ForwardRequest {
            cond,
            hooks: &hooks,
            external: None,
            adapter,
        };
        let mut tape = None;
        let (velocity, _) = self.run(x, t, &req, Some(&mut tape))?;
        Ok((velocity, tape.expect("tape requested")))
    }

    fn check_request(&self, x: &LatentGrid, t: f32, req: &ForwardRequest) -> Result<()> {
        let c = &self.config;
        if x.shape() != (c.grid_height, c.grid_width, c.token_dim) {
            return Err(Error::invalid(format!(
                "latent shape {:?} does not match model grid {}x{}x{}",
                x.shape(),
                c.grid_height,
                c.grid_width,
                c.token_dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        if req.hooks.0.len() != c.blocks {
            return Err(Error::config(format!(
                "hook plan has {} entries for {} blocks",
                req.hooks.0.len(),
                c.blocks
            )));
        }
        for (b, mode) in req.hooks.0.iter().enumerate() {
            if *mode != AttentionHookMode::Passthrough && !c.is_injection_block(b) {
                return Err(Error::config(format!("block {b} is not injection-capable")));
            }
            if mode.injects() && req.external.and_then(|e| e.get(&b)).is_none() {
                return Err(Error::config(format!(
                    "block {b} injects but no external keys/values were supplied"
                )));
            }
            if let AttentionHookMode::InjectBlended(mask) = mode {
                if mask.len() != c.tokens() {
                    return Err(Error::invalid(format!(
                        "blend mask has {} entries for {} tokens",
                        mask.len(),
                        c.tokens()
                    )));
                }
            }
            if let Some(kv) = req.external.and_then(|e| e.get(&b)) {
                let want = (c.tokens(), c.width());
                if mode.injects() && (kv.keys.dim() != want || kv.values.dim() != want) {
                    return Err(Error::invalid(format!(
                        "external keys/values for block {b} must be {want:?}"
                    )));
                }
            }
        }
        if let Some(ad) = req.adapter {
            if ad.map.len() != c.tokens() {
                return Err(Error::invalid(format!(
                    "adapter map has {} entries for {} tokens",
                    ad.map.len(),
                    c.tokens()
                )));
            }
            if ad.strengths.len() != c.adapter_branches {
                return Err(Error::invalid(format!(
                    "adapter needs {} strengths, got {}",
                    c.adapter_branches,
                    ad.strengths.len()
                )));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        x: &LatentGrid,
        t: f32,
        req: &ForwardRequest,
        mut tape: Option<&mut Option<Tape>>,
    ) -> Result<(LatentGrid, KvSlice)> {
        self.check_request(x, t, req)?;
        let c = &self.config;
        let p = &self.params;
        let heads = c.heads;
        let x_mat = ArrayView2::from_shape((c.tokens(), c.token_dim), x.values())
            .map_err(|e| Error::invalid(e.to_string()))?;

        let phi = time_features(t, c.time_features);
        let cond_row = req.cond.embedding_row(c.vocab)?;
        let mut embed = phi.view().insert_axis(Axis(0)).dot(&p.w_time) + &p.b_time;
        embed += &p.cond.row(cond_row);
        let cond_map = ArrayView2::from_shape(
            (c.tokens(), c.width()),
            p.cond_map.row(cond_row).to_slice().expect("row-major"),
        )
        .map_err(|e| Error::invalid(e.to_string()))?;
        let mut h = x_mat.dot(&p.w_in) + &p.b_in + &p.pos + &embed + cond_map;

        let mut captured = KvSlice::new();
        let record = tape.is_some();
        let mut block_tapes = Vec::new();
        for (b, bp) in p.blocks.iter().enumerate() {
            let (a, rstd_a) = layer_norm(&h);
            let q = a.dot(&bp.wq);
            let mut k = a.dot(&bp.wk);
            let mut v = a.dot(&bp.wv);
            let mode = &req.hooks.0[b];
            match mode {
                AttentionHookMode::Passthrough => {}
                AttentionHookMode::Capture => {
                    captured.insert(
                        b,
                        BlockKv {
                            keys: k.clone(),
                            values: v.clone(),
                        },
                    );
                }
                AttentionHookMode::InjectFull => {
                    let ext = &req.external.expect("checked")[&b];
                    k = ext.keys.clone();
                    v = ext.values.clone();
                }
                AttentionHookMode::InjectBlended(mask) => {
                    let ext = &req.external.expect("checked")[&b];
                    k = blend_rows(mask, &k, &ext.keys);
                    v = blend_rows(mask, &v, &ext.values);
                }
            }
            let (o, probs) = attention::attention_with_probs(q.view(), k.view(), v.view(), heads)?;
            h = h + o.dot(&bp.wo) + &bp.bo;
            let (a2, rstd_a2) = layer_norm(&h);
            let u = a2.dot(&bp.w1) + &bp.b1;
            let g = u.mapv(silu);
            h = h + g.dot(&bp.w2) + &bp.b2;
            if let Some(ad) = req.adapter {
                add_adapter(&mut h, ad, &bp.adapter);
            }
            if record {
                block_tapes.push(BlockTape {
                    a,
                    rstd_a,
                    q,
                    k,
                    v,
                    probs,
                    o,
                    a2,
                    rstd_a2,
                    u,
                    g,
                });
            }
        }
        let (a_last, rstd_last) = layer_norm(&h);
        let skip = phi.view().insert_axis(Axis(0)).dot(&p.w_skip) + &p.b_skip;
        let gain = embed.dot(&p.w_gain) + &p.b_gain + 1.0;
        let head = a_last.dot(&p.w_out) + &p.b_out;
        let out = &head * &gain + &x_mat * &skip;
        let values: Vec<f32> = out.into_iter().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: 0,
                message: format!("non-finite velocity at t={t}"),
            });
        }
        if let Some(slot) = tape.as_mut() {
            **slot = Some(Tape {
                x: x_mat.to_owned(),
                phi,
                cond_row,
                blocks: block_tapes,
                a_last,
                rstd_last,
                embed,
                head,
                gain,
                adapter_map: req.adapter.map(|a| a.map.to_vec()),
                adapter_strengths: req
                    .adapter
                    .map(|a| a.strengths.to_vec())
                    .unwrap_or_default(),
            });
        }
        Ok((
            LatentGrid::from_vec(c.grid_height, c.grid_width, c.token_dim, values)?,
            captured,
        ))
    }
}

/// Classifier-free guidance: `uncond + g · (cond − uncond)`.
pub fn apply_guidance(
    v_cond: &LatentGrid,
    v_uncond: &LatentGrid,
    scale: f32,
) -> Result<LatentGrid> {
    v_cond.check_same_shape(v_uncond, "apply_guidance")?;
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    let values = v_cond
        .values()
        .iter()
        .zip(v_uncond.values())
        .map(|(c, u)| u + scale * (c - u))
        .collect();
    LatentGrid::from_vec(v_cond.height(), v_cond.width(), v_cond.channels(), values)
}

/// Row-wise `m ⊙ own + (1 − m) ⊙ other`. Exact 0 and 1 select a side
/// verbatim so that full blends are bitwise copies.
pub(crate) fn blend_rows(mask: &[f32], own: &Array2<f32>, other: &Array2<f32>) -> Array2<f32> {
    let mut out = own.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let m = mask[i];
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            row.assign(&other.row(i));
            continue;
        }
        row.zip_mut_with(&other.row(i), |a, &b| *a = m * *a + (1.0 - m) * b);
    }
    out
}

fn add_adapter(h: &mut Array2<f32>, ad: AdapterInput, weights: &Array2<f32>) {
    for (branch, &beta) in ad.strengths.iter().enumerate() {
        if beta == 0.0 {
            continue;
        }
        let w = weights.row(branch);
        for (i, mut row) in h.axis_iter_mut(Axis(0)).enumerate() {
            let scale = beta * ad.map[i];
            if scale != 0.0 {
                row.scaled_add(scale, &w);
            }
        }
    }
}

/// Sinusoidal features of `t` with angular frequencies spaced geometrically
/// in `[1, 20]`.
pub(crate) fn time_features(t: f32, n: usize) -> Array1<f32> {
    let half = n / 2;
    let mut out = Array1::zeros(n);
    for k in 0..half {
        let frac = if half > 1 {
            k as f32 / (half - 1) as f32
        } else {
            0.0
        };
        let freq = 20f32.powf(frac);
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
    out
}

pub(crate) fn layer_norm(x: &Array2<f32>) -> (Array2<f32>, Vec<f32>) {
    let n = x.ncols() as f32;
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / n;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests;
