//! Region-controlled editing: invert the source under its condition while
//! capturing attention keys/values, then denoise under the target condition
//! with a three-stage injection schedule.
//!
//! * Stage 1 (first `k_front` steps): the mask is all zeros, every injecting
//!   block attends with the inversion keys/values.
//! * Stage 2: a divergence map between the target velocity and the replayed
//!   source velocity is fused over the Stage-2 steps so far, smoothed and
//!   thresholded; injecting blocks blend own and inversion keys/values under it.
//! * Stage 3 (last `k_tail` steps): the mask is all ones, no injection.
//!
//! The target velocity of Stage 2 comes from one extra guided evaluation per
//! step without hooks (the probe), because the mask that the step's solver
//! evaluations use depends on it. Probe evaluations are reported separately
//! from the solver NFE.
//!
//! Evaluation keys line up between the runs: denoising step `s` evaluates at
//! grid index `N − s` and in interval `N − s − 1`, both recorded by inversion
//! (grid index `N` through its terminal evaluation).

use std::fmt::Write as _;

use ndarray::Array2;

use crate::codec::PatchCodec;
use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::latent::{ConditionId, LatentGrid};
use crate::net::{
    adapter_input_from_image, apply_guidance, blend_rows, AdapterInput, AttentionHookMode,
    ForwardRequest, HookPlan, KvCache, KvSlice, VelocityNet,
};
use crate::solvers::{
    integrate, Branch, Direction, EvalKey, IntegrateOptions, KvKey, SolverKind, TimeGrid,
    TrajectoryRecord, VelocityField,
};
use crate::tdm::{
    binarize, compute_divergence, gaussian_smooth, minmax_normalize, softmax_fuse, DivergenceMap,
    EditMask, FusedMap, NormalizedMap, TokenMap,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskOverride {
    /// Full inversion injection at every step.
    Zeros,
    /// No injection at any step.
    Ones,
}

impl MaskOverride {
    pub fn name(self) -> &'static str {
        match self {
            MaskOverride::Zeros => "zeros",
            MaskOverride::Ones => "ones",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditSchedule {
    pub steps: usize,
    pub k_front: usize,
    pub k_tail: usize,
    pub tau: f32,
    pub sigma: f32,
    pub guidance: f32,
    pub injection_blocks: Vec<usize>,
    /// Adapter active while the denoising progress `1 − t` lies in this interval.
    pub adapter_interval: (f32, f32),
    pub adapter_strengths: Vec<f32>,
    pub adapter_enabled: bool,
    pub mask_override: Option<MaskOverride>,
    pub solver: SolverKind,
}

impl Default for EditSchedule {
    fn default() -> Self {
        EditSchedule {
            steps: 28,
            k_front: 2,
            k_tail: 4,
            tau: 0.35,
            sigma: 1.0,
            guidance: 2.0,
            injection_blocks: vec![4, 5],
            adapter_interval: (0.1, 0.7),
            adapter_strengths: vec![2.5, 3.5],
            adapter_enabled: true,
            mask_override: None,
            solver: SolverKind::SecondOrder,
        }
    }
}

impl EditSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be positive"));
        }
        if self.k_front + self.k_tail > self.steps {
            return Err(Error::config(format!(
                "k_front + k_tail = {} exceeds steps = {}",
                self.k_front + self.k_tail,
                self.steps
            )));
        }
        let (lo, hi) = self.adapter_interval;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "adapter interval [{lo}, {hi}] must satisfy 0 ≤ lo < hi ≤ 1"
            )));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::config("guidance must be finite and non-negative"));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config("tau must lie strictly inside (0, 1)"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// Stage boundaries as half-open step ranges.
    pub fn stage_bounds(&self) -> [(usize, usize); 3] {
        let a = self.k_front;
        let b = self.steps - self.k_tail;
        [(0, a), (a, b), (b, self.steps)]
    }

    fn adapter_active(&self, t: f32) -> bool {
        let p = 1.0 - t;
        self.adapter_enabled && self.adapter_interval.0 <= p && p <= self.adapter_interval.1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

/// Stage of denoising step `s`, counted from the start of denoising.
pub fn stage_for_step(s: usize, schedule: &EditSchedule) -> Result<Stage> {
    if s >= schedule.steps {
        return Err(Error::invalid(format!(
            "step {s} outside 0..{}",
            schedule.steps
        )));
    }
    if schedule.k_front + schedule.k_tail > schedule.steps {
        return Err(Error::config("k_front + k_tail exceeds steps"));
    }
    Ok(if s < schedule.k_front {
        Stage::Stage1
    } else if s < schedule.steps - schedule.k_tail {
        Stage::Stage2
    } else {
        Stage::Stage3
    })
}

/// `K* = M ⊙ K_tgt + (1 − M) ⊙ K_inv`, likewise for values, per token row.
pub fn blend_kv(
    mask: &[f32],
    k_tgt: &Array2<f32>,
    v_tgt: &Array2<f32>,
    k_inv: &Array2<f32>,
    v_inv: &Array2<f32>,
) -> Result<(Array2<f32>, Array2<f32>)> {
    let dim = k_tgt.dim();
    if v_tgt.dim() != dim || k_inv.dim() != dim || v_inv.dim() != dim {
        return Err(Error::invalid("blend_kv tensors differ in shape"));
    }
    if mask.len() != dim.0 {
        return Err(Error::invalid(format!(
            "blend mask has {} entries for {} tokens",
            mask.len(),
            dim.0
        )));
    }
    if mask.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::invalid("blend mask values must lie in [0, 1]"));
    }
    Ok((
        blend_rows(mask, k_tgt, k_inv),
        blend_rows(mask, v_tgt, v_inv),
    ))
}

/// Adapter conditioning shared by both trajectories of an edit.
#[derive(Clone, Debug)]
struct AdapterSetup {
    map: Vec<f32>,
    strengths: Vec<f32>,
}

/// Classifier-free-guided evaluation with identical hooks and adapter on both
/// branches. With guidance 1 the unconditional branch is skipped.
pub struct Guided<'a> {
    pub net: &'a VelocityNet,
    pub guidance: f32,
}

struct Branches {
    velocity: LatentGrid,
    cond_kv: KvSlice,
    uncond_kv: KvSlice,
}

impl<'a> Guided<'a> {
    pub fn new(net: &'a VelocityNet, guidance: f32) -> Self {
        Guided { net, guidance }
    }

    fn needs_uncond(&self) -> bool {
        self.guidance != 1.0
    }

    fn eval(
        &self,
        x: &LatentGrid,
        t: f32,
        cond: ConditionId,
        hooks: &HookPlan,
        external: Option<(&KvSlice, &KvSlice)>,
        adapter: Option<AdapterInput>,
    ) -> Result<Branches> {
        let req = ForwardRequest {
            cond,
            hooks,
            external: external.map(|e| e.0),
            adapter,
        };
        let c = self.net.forward(x, t, &req)?;
        if !self.needs_uncond() {
            return Ok(Branches {
                velocity: c.velocity,
                cond_kv: c.captured,
                uncond_kv: KvSlice::new(),
            });
        }
        let req = ForwardRequest {
            cond: ConditionId::NULL,
            hooks,
            external: external.map(|e| e.1),
            adapter,
        };
        let u = self.net.forward(x, t, &req)?;
        Ok(Branches {
            velocity: apply_guidance(&c.velocity, &u.velocity, self.guidance)?,
            cond_kv: c.captured,
            uncond_kv: u.captured,
        })
    }

    /// Plain guided velocity, no hooks or adapter.
    pub fn velocity(&self, x: &LatentGrid, t: f32, cond: ConditionId) -> Result<LatentGrid> {
        let hooks = HookPlan::passthrough(self.net.config());
        Ok(self.eval(x, t, cond, &hooks, None, None)?.velocity)
    }
}

/// Guided passthrough field for one condition.
pub struct GuidedField<'a> {
    pub guided: Guided<'a>,
    pub cond: ConditionId,
}

impl VelocityField for GuidedField<'_> {
    fn velocity(&mut self, x: &LatentGrid, t: f32, _key: EvalKey) -> Result<LatentGrid> {
        self.guided.velocity(x, t, self.cond)
    }
}

fn hook_plan(net: &VelocityNet, blocks: &[usize], mode: AttentionHookMode) -> HookPlan {
    let mut plan = HookPlan::passthrough(net.config());
    for &b in blocks {
        plan.0[b] = mode.clone();
    }
    plan
}

struct InversionField<'a> {
    guided: Guided<'a>,
    cond: ConditionId,
    hooks: HookPlan,
    schedule: &'a EditSchedule,
    adapter: Option<&'a AdapterSetup>,
    cache: KvCache<KvKey>,
}

fn adapter_for<'s>(
    schedule: &EditSchedule,
    adapter: Option<&'s AdapterSetup>,
    t: f32,
) -> Option<AdapterInput<'s>> {
    adapter
        .filter(|_| schedule.adapter_active(t))
        .map(|a| AdapterInput {
            map: &a.map,
            strengths: &a.strengths,
        })
}

impl VelocityField for InversionField<'_> {
    fn velocity(&mut self, x: &LatentGrid, t: f32, key: EvalKey) -> Result<LatentGrid> {
        let adapter = adapter_for(self.schedule, self.adapter, t);
        let out = self
            .guided
            .eval(x, t, self.cond, &self.hooks, None, adapter)?;
        self.cache.record(
            KvKey {
                eval: key,
                branch: Branch::Cond,
            },
            out.cond_kv,
        )?;
        if self.guided.needs_uncond() {
            self.cache.record(
                KvKey {
                    eval: key,
                    branch: Branch::Uncond,
                },
                out.uncond_kv,
            )?;
        }
        Ok(out.velocity)
    }
}

struct EditField<'a> {
    guided: Guided<'a>,
    cond: ConditionId,
    schedule: &'a EditSchedule,
    adapter: Option<&'a AdapterSetup>,
    inversion: &'a TrajectoryRecord,
    cache: &'a KvCache<KvKey>,
    window: Vec<NormalizedMap>,
    divergence: Vec<DivergenceMap>,
    fused: Vec<FusedMap>,
    masks: Vec<EditMask>,
    /// Binary mask of the Stage-2 step in progress.
    current: Option<Vec<f32>>,
    probe_nfe: usize,
}

impl EditField<'_> {
    fn step_of(&self, key: EvalKey) -> usize {
        let n = self.schedule.steps;
        match key {
            EvalKey::Grid(k) => n - k,
            EvalKey::Interval(j) => n - 1 - j,
        }
    }

    fn externals(&self, key: EvalKey) -> Result<(&KvSlice, &KvSlice)> {
        let get = |branch| {
            self.cache.get(&KvKey { eval: key, branch }).ok_or_else(|| {
                Error::config(format!(
                    "no inversion keys/values recorded for {key} ({branch:?})"
                ))
            })
        };
        let cond = get(Branch::Cond)?;
        let uncond = if self.guided.needs_uncond() {
            get(Branch::Uncond)?
        } else {
            cond
        };
        Ok((cond, uncond))
    }

    fn update_mask(&mut self, x: &LatentGrid, t: f32, k: usize, step: usize) -> Result<()> {
        let adapter = adapter_for(self.schedule, self.adapter, t);
        let hooks = HookPlan::passthrough(self.guided.net.config());
        let probe = self
            .guided
            .eval(x, t, self.cond, &hooks, None, adapter)?
            .velocity;
        self.probe_nfe += 1;
        let source = self
            .inversion
            .velocity_at(k)
            .ok_or_else(|| Error::config(format!("inversion has no velocity at grid index {k}")))?;
        let d = compute_divergence(&probe, source, step)?;
        self.window.push(minmax_normalize(&d));
        let fused = softmax_fuse(&self.window)?;
        let mask = binarize(
            &gaussian_smooth(&fused, self.schedule.sigma)?,
            self.schedule.tau,
        )?;
        self.current = Some(mask.binary.values.clone());
        self.divergence.push(d);
        self.fused.push(fused);
        self.masks.push(mask);
        Ok(())
    }
}

impl VelocityField for EditField<'_> {
    fn velocity(&mut self, x: &LatentGrid, t: f32, key: EvalKey) -> Result<LatentGrid> {
        let step = self.step_of(key);
        let mode = match self.schedule.mask_override {
            Some(MaskOverride::Zeros) => AttentionHookMode::InjectFull,
            Some(MaskOverride::Ones) => AttentionHookMode::Passthrough,
            None => match stage_for_step(step, self.schedule)? {
                Stage::Stage1 => AttentionHookMode::InjectFull,
                Stage::Stage3 => AttentionHookMode::Passthrough,
                Stage::Stage2 => {
                    if let EvalKey::Grid(k) = key {
                        self.update_mask(x, t, k, step)?;
                    }
                    AttentionHookMode::InjectBlended(
                        self.current
                            .clone()
                            .expect("primary evaluation sets the mask"),
                    )
                }
            },
        };
        let hooks = hook_plan(self.guided.net, &self.schedule.injection_blocks, mode);
        let external = if hooks.is_passthrough() {
            None
        } else {
            Some(self.externals(key)?)
        };
        let adapter = adapter_for(self.schedule, self.adapter, t);
        Ok(self
            .guided
            .eval(x, t, self.cond, &hooks, external, adapter)?
            .velocity)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NfeReport {
    pub inversion: usize,
    /// Terminal capture evaluation at `t = 1`.
    pub inversion_aux: usize,
    pub denoising: usize,
    /// Stage-2 probe evaluations.
    pub probe: usize,
}

impl NfeReport {
    pub fn total(&self) -> usize {
        self.inversion + self.inversion_aux + self.denoising + self.probe
    }
}

/// Ordered `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub entries: Vec<(String, String)>,
}

impl RunManifest {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug)]
pub struct EditResult {
    pub edited: LatentGrid,
    pub image: GrayImage,
    /// One per Stage-2 step, in denoising order.
    pub divergence: Vec<DivergenceMap>,
    pub fused: Vec<FusedMap>,
    pub masks: Vec<EditMask>,
    pub inversion: TrajectoryRecord,
    pub denoising: TrajectoryRecord,
    pub nfe: NfeReport,
    pub manifest: RunManifest,
}

impl EditResult {
    /// Mask of the last Stage-2 step.
    pub fn final_mask(&self) -> Option<&EditMask> {
        self.masks.last()
    }

    /// Fused divergence over every Stage-2 step.
    pub fn final_fused(&self) -> Option<&FusedMap> {
        self.fused.last()
    }
}

pub struct EditRequest<'a> {
    pub source: &'a GrayImage,
    pub c_src: ConditionId,
    pub c_tgt: ConditionId,
    pub schedule: &'a EditSchedule,
    pub codec: &'a PatchCodec,
    pub seed: u64,
}

pub fn run_edit(net: &VelocityNet, req: &EditRequest) -> Result<EditResult> {
    let schedule = req.schedule;
    schedule.validate()?;
    let config = net.config();
    if let Some(&b) = schedule
        .injection_blocks
        .iter()
        .find(|&&b| !config.is_injection_block(b))
    {
        return Err(Error::config(format!(
            "block {b} is not injection-capable in this model"
        )));
    }
    if schedule.adapter_enabled && schedule.adapter_strengths.len() != config.adapter_branches {
        return Err(Error::config(format!(
            "{} adapter strengths for {} adapter branches",
            schedule.adapter_strengths.len(),
            config.adapter_branches
        )));
    }
    let x0 = req.codec.encode(req.source)?;
    let grid = TimeGrid::uniform(schedule.steps)?;
    let adapter = schedule.adapter_enabled.then(|| -> Result<AdapterSetup> {
        Ok(AdapterSetup {
            map: adapter_input_from_image(req.source, req.codec.patch)?,
            strengths: schedule.adapter_strengths.clone(),
        })
    });
    let adapter = adapter.transpose()?;

    let mut inv_field = InversionField {
        guided: Guided::new(net, schedule.guidance),
        cond: req.c_src,
        hooks: HookPlan::on_injection_blocks(config, AttentionHookMode::Capture),
        schedule,
        adapter: adapter.as_ref(),
        cache: KvCache::new(),
    };
    let opts = IntegrateOptions {
        terminal_eval: true,
    };
    let mut inversion = integrate(
        &x0,
        &grid,
        Direction::Inversion,
        schedule.solver,
        &mut inv_field,
        opts,
    )?;
    inversion.cond = Some(req.c_src);
    let cache = std::mem::take(&mut inv_field.cache);

    let mut field = EditField {
        guided: Guided::new(net, schedule.guidance),
        cond: req.c_tgt,
        schedule,
        adapter: adapter.as_ref(),
        inversion: &inversion,
        cache: &cache,
        window: Vec::new(),
        divergence: Vec::new(),
        fused: Vec::new(),
        masks: Vec::new(),
        current: None,
        probe_nfe: 0,
    };
    let mut denoising = integrate(
        inversion.end(),
        &grid,
        Direction::Denoising,
        schedule.solver,
        &mut field,
        IntegrateOptions::default(),
    )?;
    denoising.cond = Some(req.c_tgt);
    let EditField {
        divergence,
        fused,
        masks,
        probe_nfe,
        ..
    } = field;
    inversion.kv = Some(cache);

    let nfe = NfeReport {
        inversion: inversion.nfe(),
        inversion_aux: inversion.aux_nfe,
        denoising: denoising.nfe(),
        probe: probe_nfe,
    };
    let edited = denoising.end().clone();
    let image = req.codec.decode(&edited)?;
    let manifest = edit_manifest(req, &nfe, net);
    Ok(EditResult {
        edited,
        image,
        divergence,
        fused,
        masks,
        inversion,
        denoising,
        nfe,
        manifest,
    })
}

fn edit_manifest(req: &EditRequest, nfe: &NfeReport, net: &VelocityNet) -> RunManifest {
    let s = req.schedule;
    let mut m = RunManifest::default();
    m.push("seed", req.seed);
    m.push("c_src", req.c_src);
    m.push("c_tgt", req.c_tgt);
    m.push("steps", s.steps);
    m.push("k_front", s.k_front);
    m.push("k_tail", s.k_tail);
    m.push("tau", s.tau);
    m.push("sigma", s.sigma);
    m.push("guidance", s.guidance);
    m.push("solver", s.solver.name());
    m.push("injection_blocks", join(&s.injection_blocks));
    m.push("adapter_enabled", s.adapter_enabled);
    m.push(
        "adapter_interval",
        format!("{},{}", s.adapter_interval.0, s.adapter_interval.1),
    );
    m.push("adapter_strengths", join(&s.adapter_strengths));
    m.push(
        "mask_override",
        s.mask_override.map_or("none", MaskOverride::name),
    );
    let [a, b, c] = s.stage_bounds();
    m.push("stage1_steps", format!("{}..{}", a.0, a.1));
    m.push("stage2_steps", format!("{}..{}", b.0, b.1));
    m.push("stage3_steps", format!("{}..{}", c.0, c.1));
    m.push("source_velocity", "replayed_from_inversion");
    m.push("nfe_inversion", nfe.inversion);
    m.push("nfe_inversion_terminal", nfe.inversion_aux);
    m.push("nfe_denoising", nfe.denoising);
    m.push("nfe_probe", nfe.probe);
    m.push("nfe_total", nfe.total());
    m.push("model_parameters", net.params().count());
    m
}

/// The schedule collapsed onto reconstruction: `c_tgt = c_src` and full
/// injection at every step.
pub fn reconstruct(
    net: &VelocityNet,
    source: &GrayImage,
    cond: ConditionId,
    schedule: &EditSchedule,
    codec: &PatchCodec,
    seed: u64,
) -> Result<EditResult> {
    let full = EditSchedule {
        k_front: schedule.steps,
        k_tail: 0,
        mask_override: None,
        ..schedule.clone()
    };
    run_edit(
        net,
        &EditRequest {
            source,
            c_src: cond,
            c_tgt: cond,
            schedule: &full,
            codec,
            seed,
        },
    )
}

/// Plain inversion followed by denoising under one condition, no hooks or adapter.
pub fn round_trip(
    net: &VelocityNet,
    x0: &LatentGrid,
    cond: ConditionId,
    steps: usize,
    solver: SolverKind,
    guidance: f32,
) -> Result<(TrajectoryRecord, TrajectoryRecord)> {
    let grid = TimeGrid::uniform(steps)?;
    let mut field = GuidedField {
        guided: Guided::new(net, guidance),
        cond,
    };
    let opts = IntegrateOptions::default();
    let mut up = integrate(x0, &grid, Direction::Inversion, solver, &mut field, opts)?;
    let mut down = integrate(
        up.end(),
        &grid,
        Direction::Denoising,
        solver,
        &mut field,
        opts,
    )?;
    up.cond = Some(cond);
    down.cond = Some(cond);
    Ok((up, down))
}

/// Plain guided sampling from a given start latent.
pub fn sample(
    net: &VelocityNet,
    x1: &LatentGrid,
    cond: ConditionId,
    steps: usize,
    solver: SolverKind,
    guidance: f32,
) -> Result<TrajectoryRecord> {
    let grid = TimeGrid::uniform(steps)?;
    let mut field = GuidedField {
        guided: Guided::new(net, guidance),
        cond,
    };
    let mut r = integrate(
        x1,
        &grid,
        Direction::Denoising,
        solver,
        &mut field,
        IntegrateOptions::default(),
    )?;
    r.cond = Some(cond);
    Ok(r)
}

/// Mean of a token map inside and outside a pixel mask, after patch replication.
pub fn inside_outside_means(
    map: &TokenMap,
    patch: usize,
    pixel_mask: &[bool],
) -> Result<(f64, f64)> {
    let w = map.width * patch;
    if pixel_mask.len() != w * map.height * patch {
        return Err(Error::invalid("pixel mask does not match the token map"));
    }
    let (mut si, mut ni, mut so, mut no) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (i, &m) in pixel_mask.iter().enumerate() {
        let v = f64::from(map.get(i / w / patch, (i % w) / patch));
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::invalid(
            "pixel mask must have both inside and outside pixels",
        ));
    }
    Ok((si / ni as f64, so / no as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (VelocityNet, PatchCodec, GrayImage) {
        let config = ModelConfig {
            grid_height: 4,
            grid_width: 4,
            token_dim: 12,
            blocks: 3,
            heads: 2,
            head_dim: 4,
            mlp_hidden: 16,
            vocab: 5,
            time_features: 4,
            adapter_branches: 2,
            injection_blocks: vec![1, 2],
        };
        let mut net = VelocityNet::new(config, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in net.params_mut().tensors_mut() {
            t.mapv_inplace(|v| v + rng.gen_range(-0.2..0.2));
        }
        let codec = PatchCodec::new(2, 3).unwrap();
        let image = GrayImage::new(
            8,
            8,
            (0..64)
                .map(|i| if (18..46).contains(&i) { 0.8 } else { 0.2 })
                .collect(),
        )
        .unwrap();
        (net, codec, image)
    }

    fn schedule() -> EditSchedule {
        EditSchedule {
            steps: 6,
            k_front: 1,
            k_tail: 1,
            injection_blocks: vec![1, 2],
            ..EditSchedule::default()
        }
    }

    #[test]
    fn stages_follow_the_schedule() {
        let s = EditSchedule::default();
        let stage = |i| stage_for_step(i, &s).unwrap();
        assert_eq!((stage(0), stage(1)), (Stage::Stage1, Stage::Stage1));
        assert_eq!((stage(2), stage(23)), (Stage::Stage2, Stage::Stage2));
        assert_eq!((stage(24), stage(27)), (Stage::Stage3, Stage::Stage3));
        assert!(stage_for_step(28, &s).is_err());
        let counts = (0..28).fold([0; 3], |mut c, i| {
            c[stage(i) as usize] += 1;
            c
        });
        assert_eq!(counts, [2, 22, 4]);
    }

    #[test]
    fn schedules_are_validated() {
        assert!(EditSchedule::default().validate().is_ok());
        assert!(EditSchedule {
            k_front: 20,
            k_tail: 9,
            ..EditSchedule::default()
        }
        .validate()
        .is_err());
        assert!(EditSchedule {
            adapter_interval: (0.7, 0.1),
            ..EditSchedule::default()
        }
        .validate()
        .is_err());
        assert!(EditSchedule {
            guidance: -1.0,
            ..EditSchedule::default()
        }
        .validate()
        .is_err());
        let (net, codec, image) = setup();
        let bad = EditSchedule {
            injection_blocks: vec![0],
            ..schedule()
        };
        let req = EditRequest {
            source: &image,
            c_src: ConditionId(0),
            c_tgt: ConditionId(1),
            schedule: &bad,
            codec: &codec,
            seed: 0,
        };
        assert!(matches!(run_edit(&net, &req), Err(Error::Config(_))));
    }

    #[test]
    fn blend_kv_examples() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f32);
        let b = Array2::from_shape_fn((3, 2), |(i, j)| -((i + j) as f32) - 0.5);
        let (k, v) = blend_kv(&[1.0; 3], &a, &a, &b, &b).unwrap();
        assert_eq!((k, v), (a.clone(), a.clone()));
        let (k, _) = blend_kv(&[0.0; 3], &a, &a, &b, &b).unwrap();
        assert_eq!(k, b);
        let (k, _) = blend_kv(&[0.5; 3], &a, &a, &b, &b).unwrap();
        assert_eq!(k, (&a + &b) * 0.5);
        let (k, _) = blend_kv(&[0.3, 0.9, 0.1], &a, &a, &b, &b).unwrap();
        for ((x, y), z) in a.iter().zip(b.iter()).zip(k.iter()) {
            assert!(x.min(*y) <= *z && *z <= x.max(*y));
        }
        assert!(blend_kv(&[0.5; 2], &a, &a, &b, &b).is_err());
        assert!(blend_kv(&[1.5; 3], &a, &a, &b, &b).is_err());
        assert!(blend_kv(&[0.5; 3], &a, &a, &b, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn forced_zero_mask_is_the_reconstruction_path() {
        let (net, codec, image) = setup();
        let s = EditSchedule {
            mask_override: Some(MaskOverride::Zeros),
            ..schedule()
        };
        let c = ConditionId(2);
        let req = EditRequest {
            source: &image,
            c_src: c,
            c_tgt: c,
            schedule: &s,
            codec: &codec,
            seed: 0,
        };
        let forced = run_edit(&net, &req).unwrap();
        let recon = reconstruct(&net, &image, c, &schedule(), &codec, 0).unwrap();
        assert_eq!(forced.edited, recon.edited);
        assert!(forced.divergence.is_empty());
    }

    #[test]
    fn forced_one_mask_is_plain_sampling() {
        let (net, codec, image) = setup();
        let s = EditSchedule {
            k_front: 0,
            k_tail: 0,
            adapter_enabled: false,
            mask_override: Some(MaskOverride::Ones),
            ..schedule()
        };
        let req = EditRequest {
            source: &image,
            c_src: ConditionId(0),
            c_tgt: ConditionId(3),
            schedule: &s,
            codec: &codec,
            seed: 0,
        };
        let edit = run_edit(&net, &req).unwrap();
        let plain = sample(
            &net,
            edit.inversion.end(),
            ConditionId(3),
            s.steps,
            s.solver,
            s.guidance,
        )
        .unwrap();
        assert_eq!(&edit.edited, plain.end());
    }

    #[test]
    fn default_edit_records_every_stage_two_step() {
        let (net, codec, image) = setup();
        let s = schedule();
        let req = EditRequest {
            source: &image,
            c_src: ConditionId(0),
            c_tgt: ConditionId(4),
            schedule: &s,
            codec: &codec,
            seed: 9,
        };
        let a = run_edit(&net, &req).unwrap();
        assert_eq!(a.divergence.len(), 4);
        assert_eq!(
            a.divergence.iter().map(|d| d.step).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert_eq!(a.fused.last().unwrap().window, 4);
        assert_eq!(
            a.nfe,
            NfeReport {
                inversion: 12,
                inversion_aux: 1,
                denoising: 12,
                probe: 4
            }
        );
        assert_eq!(a.manifest.get("nfe_total"), Some("29"));
        assert_eq!(a.manifest.get("stage2_steps"), Some("1..5"));
        for m in &a.masks {
            assert!(m.binary.values.iter().all(|&v| v == 0.0 || v == 1.0));
        }
        // inversion keys: 7 grid + 6 midpoint evaluations, two branches each
        assert_eq!(a.inversion.kv.as_ref().unwrap().len(), 26);
        let b = run_edit(&net, &req).unwrap();
        assert_eq!(a.edited, b.edited);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.manifest, b.manifest);
    }

    #[test]
    fn unit_guidance_skips_the_unconditional_branch() {
        let (net, codec, image) = setup();
        let s = EditSchedule {
            guidance: 1.0,
            ..schedule()
        };
        let req = EditRequest {
            source: &image,
            c_src: ConditionId(0),
            c_tgt: ConditionId(1),
            schedule: &s,
            codec: &codec,
            seed: 0,
        };
        let r = run_edit(&net, &req).unwrap();
        assert_eq!(r.inversion.kv.as_ref().unwrap().len(), 13);
    }

    #[test]
    fn inside_outside_split() {
        let map = TokenMap::new(1, 2, vec![1.0, 0.0]).unwrap();
        let mask = [true, false, false, false];
        let (i, o) = inside_outside_means(&map, 1, &mask[..2]).unwrap();
        assert_eq!((i, o), (1.0, 0.0));
        assert!(inside_outside_means(&map, 2, &[true; 8]).is_err());
    }
}
