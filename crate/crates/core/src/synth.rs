//! Procedural scenes with exact ground-truth change masks.
//!
//! A scene is a background pattern plus a list of hard-edged shapes. The
//! condition id of a single-object scene encodes the shape kind and which cell
//! of a `cells × cells` layout grid holds its center, so an edit pair that
//! swaps the shape kind in place has source and target conditions that differ
//! only in kind.
//!
//! Manifest grammar (one record per line, space-separated `key=value`):
//!
//! ```text
//! train index=<n> seed=<u64> cond=<id> canvas=<px> bg=<pattern> level=<f> texture=<f> objects=<objs>
//! pair index=<n> seed=<u64> source_cond=<id> target_cond=<id> canvas=<px> bg=<pattern> level=<f> texture=<f> source=<objs> target=<objs>
//! objs := obj (';' obj)* | '-'      obj := kind ':' cx ':' cy ':' scale ':' intensity
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::GrayImage;
use crate::latent::ConditionId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn index(self) -> usize {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::format(format!("unknown shape kind {s:?}")))
    }
}

/// Square half-side as a fraction of the object scale.
const SQUARE_HALF: f32 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    /// Circle radius; square half-side is `0.85 · scale`; the triangle spans
    /// `2 · scale` in both axes with its apex at the top.
    pub scale: f32,
    pub intensity: f32,
}

impl SceneObject {
    /// Pixel-center inside test.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let (dx, dy) = (px - self.cx, py - self.cy);
        let s = self.scale;
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= s * s,
            ShapeKind::Square => dx.abs() <= SQUARE_HALF * s && dy.abs() <= SQUARE_HALF * s,
            ShapeKind::Triangle => dy >= -s && dy <= s && dx.abs() <= 0.5 * (dy + s),
        }
    }

    fn extent(&self) -> f32 {
        match self.kind {
            ShapeKind::Square => SQUARE_HALF * self.scale,
            _ => self.scale,
        }
    }

    fn encode(&self) -> String {
        format!(
            "{}:{}:{}:{}:{}",
            self.kind.name(),
            self.cx,
            self.cy,
            self.scale,
            self.intensity
        )
    }

    fn decode(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 5 {
            return Err(Error::format(format!(
                "object {s:?} needs kind:cx:cy:scale:intensity"
            )));
        }
        let num = |p: &str| {
            p.parse::<f32>()
                .map_err(|_| Error::format(format!("bad number {p:?} in {s:?}")))
        };
        Ok(SceneObject {
            kind: ShapeKind::parse(parts[0])?,
            cx: num(parts[1])?,
            cy: num(parts[2])?,
            scale: num(parts[3])?,
            intensity: num(parts[4])?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    /// 0 flat, 1 horizontal ramp, 2 vertical ramp, 3 16-pixel checker.
    pub pattern: u8,
    pub level: f32,
    /// Amplitude of the seeded per-pixel uniform texture.
    pub texture: f32,
}

impl Background {
    pub const PATTERNS: u8 = 4;

    fn value(&self, x: usize, y: usize, canvas: usize) -> f32 {
        let span = (canvas.max(2) - 1) as f32;
        let (u, v) = (x as f32 / span, y as f32 / span);
        match self.pattern {
            1 => self.level + 0.15 * (u - 0.5),
            2 => self.level + 0.15 * (v - 0.5),
            3 => {
                self.level
                    + if ((x / 16) + (y / 16)).is_multiple_of(2) {
                        0.05
                    } else {
                        -0.05
                    }
            }
            _ => self.level,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub canvas: usize,
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::invalid("canvas must be non-empty"));
        }
        if self.background.pattern >= Background::PATTERNS {
            return Err(Error::invalid(format!(
                "unknown background pattern {}",
                self.background.pattern
            )));
        }
        let c = self.canvas as f32;
        for o in &self.objects {
            let e = o.extent();
            let fits = o.scale > 0.0
                && o.cx - e >= 0.0
                && o.cx + e <= c
                && o.cy - e >= 0.0
                && o.cy + e <= c;
            if !fits {
                return Err(Error::invalid(format!(
                    "{} at ({}, {}) leaves the canvas",
                    o.kind.name(),
                    o.cx,
                    o.cy
                )));
            }
        }
        Ok(())
    }

    pub fn silhouette(&self, object: &SceneObject) -> Vec<bool> {
        let n = self.canvas;
        (0..n * n).map(|i| object.contains(i % n, i / n)).collect()
    }
}

/// The space of single-object inventories that receive condition ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Inventory {
    /// Layout cells per axis.
    pub cells: usize,
}

impl Default for Inventory {
    fn default() -> Self {
        Inventory { cells: 2 }
    }
}

impl Inventory {
    pub fn vocab(&self) -> usize {
        ShapeKind::ALL.len() * self.cells * self.cells
    }

    pub fn cell_of(&self, canvas: usize, cx: f32, cy: f32) -> (usize, usize) {
        let size = canvas as f32 / self.cells as f32;
        let clamp = |v: f32| ((v / size).floor().max(0.0) as usize).min(self.cells - 1);
        (clamp(cx), clamp(cy))
    }

    pub fn cell_center(&self, canvas: usize, cell: (usize, usize)) -> (f32, f32) {
        let size = canvas as f32 / self.cells as f32;
        ((cell.0 as f32 + 0.5) * size, (cell.1 as f32 + 0.5) * size)
    }

    pub fn id(&self, kind: ShapeKind, cell: (usize, usize)) -> ConditionId {
        ConditionId((kind.index() * self.cells * self.cells + cell.1 * self.cells + cell.0) as u32)
    }

    /// A pure function of the inventory: kind and layout cell of the single object.
    pub fn condition_of(&self, spec: &SceneSpec) -> Result<ConditionId> {
        match spec.objects.as_slice() {
            [o] => Ok(self.id(o.kind, self.cell_of(spec.canvas, o.cx, o.cy))),
            other => Err(Error::invalid(format!(
                "condition ids cover single-object scenes, this one has {}",
                other.len()
            ))),
        }
    }
}

/// Deterministic hard-edged render; objects paint over earlier ones.
pub fn render(spec: &SceneSpec, seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let n = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = spec.background.texture;
    let mut img = GrayImage::filled(n, n, 0.0);
    for y in 0..n {
        for x in 0..n {
            let base = spec
                .objects
                .iter()
                .rev()
                .find(|o| o.contains(x, y))
                .map_or_else(|| spec.background.value(x, y, n), |o| o.intensity);
            let noise = if amp > 0.0 {
                rng.gen_range(-amp..=amp)
            } else {
                0.0
            };
            img.set(x, y, (base + noise).clamp(0.0, 1.0));
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditPair {
    pub source: SceneSpec,
    pub target: SceneSpec,
    pub seed: u64,
}

impl EditPair {
    /// Union of the source and target silhouettes of every object slot whose
    /// source and target objects differ.
    pub fn change_mask(&self) -> Vec<bool> {
        let n = self.source.canvas;
        let mut mask = vec![false; n * n];
        let slots = self.source.objects.len().max(self.target.objects.len());
        for i in 0..slots {
            let (s, t) = (self.source.objects.get(i), self.target.objects.get(i));
            if s == t {
                continue;
            }
            for o in s.into_iter().chain(t) {
                for (m, inside) in mask.iter_mut().zip(self.source.silhouette(o)) {
                    *m |= inside;
                }
            }
        }
        mask
    }

    pub fn render_source(&self) -> Result<GrayImage> {
        render(&self.source, self.seed)
    }

    pub fn render_target(&self) -> Result<GrayImage> {
        render(&self.target, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem {
    pub spec: SceneSpec,
    pub seed: u64,
    pub cond: ConditionId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub pair: EditPair,
    pub source_cond: ConditionId,
    pub target_cond: ConditionId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub canvas: usize,
    pub count: usize,
    pub held_out: usize,
    pub seed: u64,
    pub texture: f32,
    pub inventory: Inventory,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            canvas: 64,
            count: 2048,
            held_out: 50,
            seed: 0,
            texture: 0.02,
            inventory: Inventory::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainItem>,
    pub pairs: Vec<PairItem>,
}

fn random_scene(
    rng: &mut ChaCha8Rng,
    cfg: &DatasetConfig,
    kind: ShapeKind,
    cell: (usize, usize),
) -> SceneSpec {
    let (cx0, cy0) = cfg.inventory.cell_center(cfg.canvas, cell);
    let cell_size = cfg.canvas as f32 / cfg.inventory.cells as f32;
    // largest scale keeping a jittered object inside its cell's canvas span
    let max_scale = (0.42 * cell_size).max(1.0);
    let scale = rng.gen_range(0.72 * max_scale..=max_scale);
    let jitter = 0.07 * cell_size;
    let object = SceneObject {
        kind,
        cx: cx0 + rng.gen_range(-jitter..=jitter),
        cy: cy0 + rng.gen_range(-jitter..=jitter),
        scale,
        intensity: rng.gen_range(0.65..=0.95),
    };
    SceneSpec {
        canvas: cfg.canvas,
        background: Background {
            pattern: rng.gen_range(0..Background::PATTERNS),
            level: rng.gen_range(0.1..=0.4),
            texture: cfg.texture,
        },
        objects: vec![object],
    }
}

/// Balanced training scenes (kinds and cells cycle) plus held-out in-place
/// shape-swap pairs that never coincide with a training scene.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.count == 0 {
        return Err(Error::invalid("dataset count must be positive"));
    }
    let inv = cfg.inventory;
    if inv.cells == 0 {
        return Err(Error::config("inventory needs at least one cell"));
    }
    let cells = inv.cells * inv.cells;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let kind = ShapeKind::ALL[i % 3];
        let c = (i / 3) % cells;
        let cell = (c % inv.cells, c / inv.cells);
        let spec = random_scene(&mut rng, cfg, kind, cell);
        spec.validate()?;
        let cond = inv.condition_of(&spec)?;
        train.push(TrainItem {
            spec,
            seed: rng.gen(),
            cond,
        });
    }
    let seen: HashSet<String> = train
        .iter()
        .map(|t| encode_objects(&t.spec.objects))
        .collect();
    let mut pairs = Vec::with_capacity(cfg.held_out);
    let mut j = 0usize;
    while pairs.len() < cfg.held_out {
        let c = j % cells;
        let cell = (c % inv.cells, c / inv.cells);
        let src_kind = ShapeKind::ALL[(j / cells) % 3];
        let tgt_kind = ShapeKind::ALL[(src_kind.index() + 1 + (j / (3 * cells)) % 2) % 3];
        j += 1;
        let source = random_scene(&mut rng, cfg, src_kind, cell);
        let mut target = source.clone();
        target.objects[0].kind = tgt_kind;
        let seed = rng.gen();
        if target.validate().is_err()
            || seen.contains(&encode_objects(&source.objects))
            || seen.contains(&encode_objects(&target.objects))
        {
            continue;
        }
        let (source_cond, target_cond) = (inv.condition_of(&source)?, inv.condition_of(&target)?);
        pairs.push(PairItem {
            pair: EditPair {
                source,
                target,
                seed,
            },
            source_cond,
            target_cond,
        });
    }
    Ok(Dataset { train, pairs })
}

fn encode_objects(objects: &[SceneObject]) -> String {
    if objects.is_empty() {
        "-".to_string()
    } else {
        objects
            .iter()
            .map(SceneObject::encode)
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn decode_objects(s: &str) -> Result<Vec<SceneObject>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(';').map(SceneObject::decode).collect()
}

fn background_fields(spec: &SceneSpec) -> String {
    let b = &spec.background;
    format!(
        "canvas={} bg={} level={} texture={}",
        spec.canvas, b.pattern, b.level, b.texture
    )
}

pub fn manifest_text(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (i, t) in dataset.train.iter().enumerate() {
        let _ = writeln!(
            out,
            "train index={i} seed={} cond={} {} objects={}",
            t.seed,
            t.cond,
            background_fields(&t.spec),
            encode_objects(&t.spec.objects)
        );
    }
    for (i, p) in dataset.pairs.iter().enumerate() {
        let _ = writeln!(
            out,
            "pair index={i} seed={} source_cond={} target_cond={} {} source={} target={}",
            p.pair.seed,
            p.source_cond,
            p.target_cond,
            background_fields(&p.pair.source),
            encode_objects(&p.pair.source.objects),
            encode_objects(&p.pair.target.objects)
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut words = line.split_whitespace();
        let kind = words.next().unwrap_or_default();
        let mut fields = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| {
                Error::format(format!(
                    "manifest line {}: {w:?} is not key=value",
                    lineno + 1
                ))
            })?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::format(format!("manifest line {}: missing {k}", lineno + 1)))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("manifest line {}: bad {k}", lineno + 1)))
        };
        let cond = |k: &str| -> Result<ConditionId> {
            let v = get(k)?;
            if v == "null" {
                return Ok(ConditionId::NULL);
            }
            v.parse()
                .map(ConditionId)
                .map_err(|_| Error::format(format!("manifest line {}: bad {k}", lineno + 1)))
        };
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad seed", lineno + 1)))?;
        let base = |objects| -> Result<SceneSpec> {
            Ok(SceneSpec {
                canvas: num("canvas")? as usize,
                background: Background {
                    pattern: num("bg")? as u8,
                    level: get("level")?
                        .parse()
                        .map_err(|_| Error::format("bad level"))?,
                    texture: get("texture")?
                        .parse()
                        .map_err(|_| Error::format("bad texture"))?,
                },
                objects,
            })
        };
        match kind {
            "train" => {
                let spec = base(decode_objects(get("objects")?)?)?;
                train.push(TrainItem {
                    spec,
                    seed,
                    cond: cond("cond")?,
                });
            }
            "pair" => {
                let source = base(decode_objects(get("source")?)?)?;
                let target = base(decode_objects(get("target")?)?)?;
                pairs.push(PairItem {
                    pair: EditPair {
                        source,
                        target,
                        seed,
                    },
                    source_cond: cond("source_cond")?,
                    target_cond: cond("target_cond")?,
                });
            }
            other => {
                return Err(Error::format(format!(
                    "manifest line {}: unknown record {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    Ok(Dataset { train, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(kind: ShapeKind, cx: f32, cy: f32, scale: f32) -> SceneSpec {
        SceneSpec {
            canvas: 64,
            background: Background {
                pattern: 1,
                level: 0.2,
                texture: 0.0,
            },
            objects: vec![SceneObject {
                kind,
                cx,
                cy,
                scale,
                intensity: 0.9,
            }],
        }
    }

    #[test]
    fn empty_scene_is_pure_background() {
        let spec = SceneSpec {
            canvas: 64,
            background: Background {
                pattern: 0,
                level: 0.3,
                texture: 0.0,
            },
            objects: vec![],
        };
        let img = render(&spec, 1).unwrap();
        assert!(img.pixels().iter().all(|&p| p == 0.3));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut spec = one(ShapeKind::Triangle, 30.0, 30.0, 9.0);
        spec.background.texture = 0.05;
        assert_eq!(render(&spec, 9).unwrap(), render(&spec, 9).unwrap());
        assert_ne!(render(&spec, 9).unwrap(), render(&spec, 10).unwrap());
    }

    #[test]
    fn circle_area_matches_analytic_area() {
        for r in [6.0f32, 9.5, 14.0] {
            let spec = one(ShapeKind::Circle, 32.0, 32.0, r);
            let count = spec
                .silhouette(&spec.objects[0])
                .iter()
                .filter(|&&b| b)
                .count() as f64;
            let area = std::f64::consts::PI * f64::from(r) * f64::from(r);
            assert!(
                (count - area).abs() / area < 0.03,
                "r={r}: {count} vs {area}"
            );
        }
    }

    #[test]
    fn out_of_canvas_objects_are_rejected() {
        assert!(render(&one(ShapeKind::Circle, 5.0, 32.0, 9.0), 0).is_err());
        assert!(render(&one(ShapeKind::Square, 60.0, 32.0, 5.0), 0).is_err());
        assert!(render(&one(ShapeKind::Square, 58.0, 32.0, 5.0), 0).is_ok());
    }

    #[test]
    fn pair_background_is_identical_outside_the_change_mask() {
        let ds = make_dataset(&DatasetConfig {
            count: 30,
            held_out: 12,
            ..DatasetConfig::default()
        })
        .unwrap();
        for p in &ds.pairs {
            let mask = p.pair.change_mask();
            assert!(mask.iter().any(|&m| m));
            let (a, b) = (
                p.pair.render_source().unwrap(),
                p.pair.render_target().unwrap(),
            );
            for ((m, x), y) in mask.iter().zip(a.pixels()).zip(b.pixels()) {
                if !m {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            assert_ne!(p.source_cond, p.target_cond);
        }
    }

    #[test]
    fn condition_ids_are_injective_over_the_inventory() {
        let inv = Inventory::default();
        let mut seen = HashSet::new();
        for kind in ShapeKind::ALL {
            for cy in 0..inv.cells {
                for cx in 0..inv.cells {
                    let (x, y) = inv.cell_center(64, (cx, cy));
                    let spec = one(kind, x, y, 4.0);
                    let id = inv.condition_of(&spec).unwrap();
                    assert!((id.0 as usize) < inv.vocab());
                    assert!(seen.insert(id));
                }
            }
        }
        assert_eq!(seen.len(), inv.vocab());
        let mut two = one(ShapeKind::Circle, 20.0, 20.0, 4.0);
        two.objects.push(two.objects[0]);
        assert!(inv.condition_of(&two).is_err());
    }

    #[test]
    fn dataset_contract() {
        assert!(make_dataset(&DatasetConfig {
            count: 0,
            ..DatasetConfig::default()
        })
        .is_err());
        let cfg = DatasetConfig {
            count: 24,
            held_out: 20,
            seed: 4,
            ..DatasetConfig::default()
        };
        let a = make_dataset(&cfg).unwrap();
        let b = make_dataset(&cfg).unwrap();
        assert_eq!(manifest_text(&a), manifest_text(&b));
        assert_eq!(a.train.len(), 24);
        assert_eq!(a.pairs.len(), 20);
        // 24 = 2 full cycles over 3 kinds × 4 cells
        let mut counts = std::collections::HashMap::new();
        for t in &a.train {
            *counts.entry(t.cond).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 12);
        assert!(counts.values().all(|&c| c == 2));
        for t in &a.train {
            t.spec.validate().unwrap();
        }
    }

    #[test]
    fn manifest_round_trips() {
        let ds = make_dataset(&DatasetConfig {
            count: 10,
            held_out: 4,
            seed: 1,
            ..DatasetConfig::default()
        })
        .unwrap();
        let text = manifest_text(&ds);
        assert_eq!(parse_manifest(&text).unwrap(), ds);
        assert!(parse_manifest("bogus a=1").is_err());
        assert!(parse_manifest("train index=0 seed=x").is_err());
    }
}
