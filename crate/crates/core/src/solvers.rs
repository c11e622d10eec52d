//! Fixed-grid ODE integration along the rectified-flow time axis.
//!
//! Denoising walks the grid from `t = 1` to `t = 0` with `x ← x − h·v`;
//! inversion walks it upward with the mirrored update `x ← x + h·v`. The
//! second-order step is the explicit midpoint rule: its time derivative
//! estimate `(v(x, t) − v(x − (h/2)·v, t − h/2)) / (h/2)` turns
//! `x − h·v + ½h²·∂_t v` into `x − h·v_mid`.
//!
//! Every evaluation is tagged with an [`EvalKey`] so that a caller can match
//! the evaluations of two runs over the same grid: `Grid(k)` is the primary
//! evaluation at grid time `t_k`, `Interval(j)` is the midpoint evaluation
//! inside `[t_j, t_{j+1}]`. An inversion step and the denoising step that
//! undoes it share both keys.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::latent::{ConditionId, LatentGrid};
use crate::net::KvCache;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    /// `times[k] = t_k`, ascending from `t_0 = 0` to `t_N = 1`.
    times: Vec<f32>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid(
                "a time grid needs at least one step (endpoints 0 and 1)",
            ));
        }
        let mut times: Vec<f32> = (0..=steps).map(|k| k as f32 / steps as f32).collect();
        times[steps] = 1.0;
        Ok(TimeGrid { times })
    }

    pub fn from_times(times: Vec<f32>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(Error::invalid("time grid must start at 0 and end at 1"));
        }
        if times
            .windows(2)
            .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
        {
            return Err(Error::invalid("time grid must be strictly monotone"));
        }
        Ok(TimeGrid { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f32] {
        &self.times
    }

    pub fn t(&self, k: usize) -> f32 {
        self.times[k]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverKind {
    Euler,
    SecondOrder,
}

impl SolverKind {
    pub fn nfe_per_step(self) -> usize {
        match self {
            SolverKind::Euler => 1,
            SolverKind::SecondOrder => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::SecondOrder => "second-order",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(SolverKind::Euler),
            "second-order" | "second_order" => Ok(SolverKind::SecondOrder),
            other => Err(Error::config(format!(
                "unknown solver {other:?} (euler | second-order)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Data to noise, `t` increasing.
    Inversion,
    /// Noise to data, `t` decreasing.
    Denoising,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Inversion => "inversion",
            Direction::Denoising => "denoising",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalKey {
    Grid(usize),
    Interval(usize),
}

impl fmt::Display for EvalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalKey::Grid(k) => write!(f, "grid{k}"),
            EvalKey::Interval(j) => write!(f, "mid{j}"),
        }
    }
}

/// Guidance branch a set of captured keys/values belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Cond,
    Uncond,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KvKey {
    pub eval: EvalKey,
    pub branch: Branch,
}

/// A velocity evaluator that may depend on which grid evaluation it serves.
pub trait VelocityField {
    fn velocity(&mut self, x: &LatentGrid, t: f32, key: EvalKey) -> Result<LatentGrid>;
}

/// Adapts a key-agnostic closure.
pub struct FnField<F>(pub F);

impl<F: FnMut(&LatentGrid, f32) -> Result<LatentGrid>> VelocityField for FnField<F> {
    fn velocity(&mut self, x: &LatentGrid, t: f32, _key: EvalKey) -> Result<LatentGrid> {
        (self.0)(x, t)
    }
}

/// Counts evaluator calls.
pub struct Counting<V> {
    pub inner: V,
    pub calls: usize,
}

impl<V> Counting<V> {
    pub fn new(inner: V) -> Self {
        Counting { inner, calls: 0 }
    }
}

impl<V: VelocityField> VelocityField for Counting<V> {
    fn velocity(&mut self, x: &LatentGrid, t: f32, key: EvalKey) -> Result<LatentGrid> {
        self.calls += 1;
        self.inner.velocity(x, t, key)
    }
}

fn checked(v: LatentGrid, x: &LatentGrid, t: f32) -> Result<LatentGrid> {
    x.check_same_shape(&v, "velocity")?;
    if !v.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            message: format!("non-finite velocity at t = {t}"),
        });
    }
    Ok(v)
}

/// One step with signed size: positive `h` moves toward `t = 0`.
/// Returns the new latent and the primary velocity `v(x, t)`.
fn signed_step(
    kind: SolverKind,
    x: &LatentGrid,
    t: f32,
    h: f32,
    keys: (EvalKey, EvalKey),
    field: &mut dyn VelocityField,
) -> Result<(LatentGrid, LatentGrid)> {
    let v = checked(field.velocity(x, t, keys.0)?, x, t)?;
    let next = match kind {
        SolverKind::Euler => x.add_scaled(&v, -h)?,
        SolverKind::SecondOrder => {
            let half = x.add_scaled(&v, -0.5 * h)?;
            let tm = t - 0.5 * h;
            let vm = checked(field.velocity(&half, tm, keys.1)?, x, tm)?;
            x.add_scaled(&vm, -h)?
        }
    };
    if !next.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            message: format!("latent became non-finite leaving t = {t}"),
        });
    }
    Ok((next, v))
}

fn check_h(h: f32) -> Result<()> {
    if h > 0.0 && h.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("step size {h} must be positive")))
    }
}

/// Denoising Euler step from `t` to `t − h`: one evaluation.
pub fn euler_step(
    x: &LatentGrid,
    t: f32,
    h: f32,
    field: &mut dyn VelocityField,
) -> Result<LatentGrid> {
    check_h(h)?;
    Ok(signed_step(
        SolverKind::Euler,
        x,
        t,
        h,
        (EvalKey::Grid(0), EvalKey::Interval(0)),
        field,
    )?
    .0)
}

/// Denoising second-order step from `t` to `t − h`: two evaluations.
pub fn second_order_step(
    x: &LatentGrid,
    t: f32,
    h: f32,
    field: &mut dyn VelocityField,
) -> Result<LatentGrid> {
    check_h(h)?;
    Ok(signed_step(
        SolverKind::SecondOrder,
        x,
        t,
        h,
        (EvalKey::Grid(0), EvalKey::Interval(0)),
        field,
    )?
    .0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Position in traversal order.
    pub index: usize,
    pub t_from: f32,
    pub t_to: f32,
    pub before: LatentGrid,
    pub after: LatentGrid,
    pub nfe: usize,
    /// Primary evaluation `v(before, t_from)`.
    pub velocity: LatentGrid,
}

#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub direction: Direction,
    pub solver: SolverKind,
    pub grid: TimeGrid,
    pub cond: Option<ConditionId>,
    pub steps: Vec<StepRecord>,
    /// Extra evaluation at the final latent (inversion: `v(x_1, 1)`), when requested.
    pub terminal_velocity: Option<LatentGrid>,
    /// Evaluations outside the per-step budget.
    pub aux_nfe: usize,
    pub kv: Option<KvCache<KvKey>>,
}

impl TrajectoryRecord {
    pub fn start(&self) -> &LatentGrid {
        &self.steps[0].before
    }

    pub fn end(&self) -> &LatentGrid {
        &self.steps.last().expect("at least one step").after
    }

    /// Solver evaluations, `N × nfe_per_step`.
    pub fn nfe(&self) -> usize {
        self.steps.iter().map(|s| s.nfe).sum()
    }

    /// Latent at grid index `k`.
    pub fn latent_at(&self, k: usize) -> Option<&LatentGrid> {
        let n = self.grid.steps();
        let pos = match self.direction {
            Direction::Inversion => k,
            Direction::Denoising => n.checked_sub(k)?,
        };
        if pos == n {
            self.steps.last().map(|s| &s.after)
        } else {
            self.steps.get(pos).map(|s| &s.before)
        }
    }

    /// Primary velocity evaluated at grid index `k`, including the terminal one.
    pub fn velocity_at(&self, k: usize) -> Option<&LatentGrid> {
        let n = self.grid.steps();
        let pos = match self.direction {
            Direction::Inversion => k,
            Direction::Denoising => n.checked_sub(k)?,
        };
        if pos == n {
            self.terminal_velocity.as_ref()
        } else {
            self.steps.get(pos).map(|s| &s.velocity)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IntegrateOptions {
    /// Evaluate once more at the final latent; reported as auxiliary NFE.
    pub terminal_eval: bool,
}

/// Integrate over the whole grid. Step `s` of a denoising run goes from grid
/// index `N − s` to `N − s − 1`; step `s` of an inversion from `s` to `s + 1`.
pub fn integrate(
    x_start: &LatentGrid,
    grid: &TimeGrid,
    direction: Direction,
    solver: SolverKind,
    field: &mut dyn VelocityField,
    options: IntegrateOptions,
) -> Result<TrajectoryRecord> {
    if !x_start.is_finite() {
        return Err(Error::invalid("start latent is not finite"));
    }
    let n = grid.steps();
    let mut steps = Vec::with_capacity(n);
    let mut x = x_start.clone();
    for s in 0..n {
        let (k_from, k_to, interval) = match direction {
            Direction::Inversion => (s, s + 1, s),
            Direction::Denoising => (n - s, n - s - 1, n - s - 1),
        };
        let (t_from, t_to) = (grid.t(k_from), grid.t(k_to));
        let h = t_from - t_to;
        let keys = (EvalKey::Grid(k_from), EvalKey::Interval(interval));
        let (next, velocity) =
            signed_step(solver, &x, t_from, h, keys, field).map_err(|e| e.at_step(s))?;
        steps.push(StepRecord {
            index: s,
            t_from,
            t_to,
            before: x,
            after: next.clone(),
            nfe: solver.nfe_per_step(),
            velocity,
        });
        x = next;
    }
    let (terminal_velocity, aux_nfe) = if options.terminal_eval {
        let k = match direction {
            Direction::Inversion => n,
            Direction::Denoising => 0,
        };
        let t = grid.t(k);
        let v = field
            .velocity(&x, t, EvalKey::Grid(k))
            .and_then(|v| checked(v, &x, t))
            .map_err(|e| e.at_step(n))?;
        (Some(v), 1)
    } else {
        (None, 0)
    };
    Ok(TrajectoryRecord {
        direction,
        solver,
        grid: grid.clone(),
        cond: None,
        steps,
        terminal_velocity,
        aux_nfe,
        kv: None,
    })
}

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"TDMTRAJ\0";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Flat little-endian export, steps in traversal order:
///
/// ```text
/// magic b"TDMTRAJ\0", u32 version,
/// u32 direction (0 inversion, 1 denoising), u32 solver (0 euler, 1 second-order),
/// u32 cond (u32::MAX for null or absent), u32 steps N, u32 height, u32 width, u32 channels,
/// u32 has_terminal, u32 aux_nfe, f32 × (N+1) grid times,
/// per step: u32 index, u32 nfe, f32 t_from, f32 t_to, before, after, velocity (f32 × H·W·C each),
/// terminal velocity when present
/// ```
///
/// Key/value caches are not exported.
pub fn trajectory_bytes(record: &TrajectoryRecord) -> Vec<u8> {
    let x = record.start();
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    put_u32(&mut out, TRAJECTORY_VERSION as usize);
    put_u32(
        &mut out,
        matches!(record.direction, Direction::Denoising) as usize,
    );
    put_u32(
        &mut out,
        matches!(record.solver, SolverKind::SecondOrder) as usize,
    );
    put_u32(
        &mut out,
        record.cond.map_or(ConditionId::NULL.0, |c| c.0) as usize,
    );
    for v in [record.steps.len(), x.height(), x.width(), x.channels()] {
        put_u32(&mut out, v);
    }
    put_u32(&mut out, record.terminal_velocity.is_some() as usize);
    put_u32(&mut out, record.aux_nfe);
    put_f32s(&mut out, record.grid.times());
    for s in &record.steps {
        put_u32(&mut out, s.index);
        put_u32(&mut out, s.nfe);
        put_f32s(&mut out, &[s.t_from, s.t_to]);
        put_f32s(&mut out, s.before.values());
        put_f32s(&mut out, s.after.values());
        put_f32s(&mut out, s.velocity.values());
    }
    if let Some(v) = &record.terminal_velocity {
        put_f32s(&mut out, v.values());
    }
    out
}

pub fn save_trajectory(path: &Path, record: &TrajectoryRecord) -> Result<()> {
    fs::write(path, trajectory_bytes(record))?;
    Ok(())
}

pub fn parse_trajectory(bytes: &[u8]) -> Result<TrajectoryRecord> {
    let mut r = Reader::new(bytes, "trajectory");
    if r.take(8)? != TRAJECTORY_MAGIC {
        return Err(Error::format("not a trajectory file (bad magic)"));
    }
    let version = r.u32()?;
    if version != TRAJECTORY_VERSION as usize {
        return Err(Error::format(format!(
            "unsupported trajectory version {version}"
        )));
    }
    let direction = match r.u32()? {
        0 => Direction::Inversion,
        1 => Direction::Denoising,
        d => return Err(Error::format(format!("bad direction {d}"))),
    };
    let solver = match r.u32()? {
        0 => SolverKind::Euler,
        1 => SolverKind::SecondOrder,
        s => return Err(Error::format(format!("bad solver {s}"))),
    };
    let cond = r.u32()? as u32;
    let cond = (cond != ConditionId::NULL.0).then_some(ConditionId(cond));
    let (n, gh, gw, gc) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let has_terminal = r.u32()? == 1;
    let aux_nfe = r.u32()?;
    let times = r.f32s(
        n.checked_add(1)
            .ok_or_else(|| Error::format("trajectory step count overflows"))?,
    )?;
    let grid =
        TimeGrid::from_times(times).map_err(|e| Error::format(format!("trajectory grid: {e}")))?;
    let elems = gh
        .checked_mul(gw)
        .and_then(|v| v.checked_mul(gc))
        .ok_or_else(|| Error::format("trajectory shape overflows"))?;
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let (index, nfe) = (r.u32()?, r.u32()?);
        let (t_from, t_to) = (r.f32()?, r.f32()?);
        let before = LatentGrid::from_vec(gh, gw, gc, r.f32s(elems)?)?;
        let after = LatentGrid::from_vec(gh, gw, gc, r.f32s(elems)?)?;
        let velocity = LatentGrid::from_vec(gh, gw, gc, r.f32s(elems)?)?;
        steps.push(StepRecord {
            index,
            t_from,
            t_to,
            before,
            after,
            nfe,
            velocity,
        });
    }
    let terminal_velocity = if has_terminal {
        Some(LatentGrid::from_vec(gh, gw, gc, r.f32s(elems)?)?)
    } else {
        None
    };
    r.finish()?;
    Ok(TrajectoryRecord {
        direction,
        solver,
        grid,
        cond,
        steps,
        terminal_velocity,
        aux_nfe,
        kv: None,
    })
}
