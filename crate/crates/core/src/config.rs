//! Run configuration file.
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Every key belongs to a
//! section and is addressed elsewhere (for example by `--set`) as
//! `section.key`. Unknown sections or keys are errors. Lists are
//! comma-separated. [`RunConfig::to_text`] writes every key, so its output is
//! a complete, reloadable description of the run.

use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::codec::PatchCodec;
use crate::edit::{EditSchedule, MaskOverride};
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::net::ModelConfig;
use crate::solvers::SolverKind;
use crate::synth::{DatasetConfig, Inventory};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub data: DatasetConfig,
    pub patch: usize,
    pub pixel_channels: usize,
    /// Grid, token size and vocabulary follow from the data section.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
    pub edit: EditSchedule,
    /// Held-out pairs edited by the evaluation commands.
    pub eval_pairs: usize,
    pub round_trip_guidance: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            checkpoint: PathBuf::from("model.ckpt"),
            dataset: PathBuf::from("data"),
            data: DatasetConfig::default(),
            patch: 8,
            pixel_channels: 3,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            resume: None,
            edit: EditSchedule::default(),
            eval_pairs: 20,
            round_trip_guidance: 2.0,
        };
        c.sync();
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Propagate derived model fields from the data section.
    fn sync(&mut self) {
        let grid = self.data.canvas / self.patch.max(1);
        self.model.grid_height = grid;
        self.model.grid_width = grid;
        self.model.token_dim = self.patch * self.patch * self.pixel_channels;
        self.model.vocab = self.data.inventory.vocab();
        self.train.seed = self.seed;
        self.data.seed = self.seed;
    }

    pub fn codec(&self) -> Result<PatchCodec> {
        PatchCodec::new(self.patch, self.pixel_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.data.canvas.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "canvas {} is not a multiple of patch {}",
                self.data.canvas, self.patch
            )));
        }
        self.codec().map_err(|e| Error::config(e.to_string()))?;
        self.model.validate()?;
        self.train.validate()?;
        self.edit.validate()?;
        if self.data.inventory.cells == 0 {
            return Err(Error::config("data.cells must be positive"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "run.checkpoint" => self.checkpoint = PathBuf::from(v),
            "run.dataset" => self.dataset = PathBuf::from(v),
            "data.canvas" => self.data.canvas = parse(key, v)?,
            "data.count" => self.data.count = parse(key, v)?,
            "data.held_out" => self.data.held_out = parse(key, v)?,
            "data.texture" => self.data.texture = parse(key, v)?,
            "data.cells" => {
                self.data.inventory = Inventory {
                    cells: parse(key, v)?,
                }
            }
            "data.patch" => self.patch = parse(key, v)?,
            "data.pixel_channels" => self.pixel_channels = parse(key, v)?,
            "model.blocks" => self.model.blocks = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.head_dim" => self.model.head_dim = parse(key, v)?,
            "model.mlp_hidden" => self.model.mlp_hidden = parse(key, v)?,
            "model.time_features" => self.model.time_features = parse(key, v)?,
            "model.adapter_branches" => self.model.adapter_branches = parse(key, v)?,
            "model.injection_blocks" => self.model.injection_blocks = parse_list(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, v)?,
            "train.cond_dropout" => self.train.cond_dropout = parse(key, v)?,
            "train.adapter_prob" => self.train.adapter_prob = parse(key, v)?,
            "train.warmup_steps" => self.train.warmup_steps = parse(key, v)?,
            "train.final_lr_fraction" => self.train.final_lr_fraction = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.accept_loss" => self.train.accept_loss = parse(key, v)?,
            "train.resume" => {
                self.resume = (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
            }
            "edit.steps" => self.edit.steps = parse(key, v)?,
            "edit.k_front" => self.edit.k_front = parse(key, v)?,
            "edit.k_tail" => self.edit.k_tail = parse(key, v)?,
            "edit.tau" => self.edit.tau = parse(key, v)?,
            "edit.sigma" => self.edit.sigma = parse(key, v)?,
            "edit.guidance" => self.edit.guidance = parse(key, v)?,
            "edit.injection_blocks" => self.edit.injection_blocks = parse_list(key, v)?,
            "edit.adapter_lo" => self.edit.adapter_interval.0 = parse(key, v)?,
            "edit.adapter_hi" => self.edit.adapter_interval.1 = parse(key, v)?,
            "edit.adapter_strengths" => self.edit.adapter_strengths = parse_list(key, v)?,
            "edit.adapter_enabled" => self.edit.adapter_enabled = parse(key, v)?,
            "edit.mask_override" => {
                self.edit.mask_override = match v {
                    "none" => None,
                    "zeros" => Some(MaskOverride::Zeros),
                    "ones" => Some(MaskOverride::Ones),
                    other => {
                        return Err(Error::config(format!(
                            "{key}: expected none, zeros or ones, got {other:?}"
                        )))
                    }
                }
            }
            "edit.solver" => self.edit.solver = SolverKind::parse(v)?,
            "eval.pairs" => self.eval_pairs = parse(key, v)?,
            "eval.round_trip_guidance" => self.round_trip_guidance = parse(key, v)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        self.sync();
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_text(text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected key = value, got {line:?}",
                    n + 1
                ))
            })?;
            let section = section.as_deref().ok_or_else(|| {
                Error::config(format!("line {}: key outside any [section]", n + 1))
            })?;
            self.set(&format!("{section}.{}", k.trim()), v)
                .map_err(|e| Error::config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        self.render(true)
    }

    /// [`to_text`](Self::to_text) without `run.out`, for writing into the output
    /// directory itself.
    pub fn portable_text(&self) -> String {
        self.render(false)
    }

    fn render(&self, with_out: bool) -> String {
        let mut out = String::new();
        let e = &self.edit;
        let sections: [(&str, Vec<(&str, String)>); 6] = [
            (
                "run",
                vec![
                    ("seed", self.seed.to_string()),
                    ("out", self.out.display().to_string()),
                    ("checkpoint", self.checkpoint.display().to_string()),
                    ("dataset", self.dataset.display().to_string()),
                ],
            ),
            (
                "data",
                vec![
                    ("canvas", self.data.canvas.to_string()),
                    ("count", self.data.count.to_string()),
                    ("held_out", self.data.held_out.to_string()),
                    ("texture", self.data.texture.to_string()),
                    ("cells", self.data.inventory.cells.to_string()),
                    ("patch", self.patch.to_string()),
                    ("pixel_channels", self.pixel_channels.to_string()),
                ],
            ),
            (
                "model",
                vec![
                    ("blocks", self.model.blocks.to_string()),
                    ("heads", self.model.heads.to_string()),
                    ("head_dim", self.model.head_dim.to_string()),
                    ("mlp_hidden", self.model.mlp_hidden.to_string()),
                    ("time_features", self.model.time_features.to_string()),
                    ("adapter_branches", self.model.adapter_branches.to_string()),
                    ("injection_blocks", join(&self.model.injection_blocks)),
                ],
            ),
            (
                "train",
                vec![
                    ("epochs", self.train.epochs.to_string()),
                    ("batch_size", self.train.batch_size.to_string()),
                    ("learning_rate", self.train.learning_rate.to_string()),
                    ("cond_dropout", self.train.cond_dropout.to_string()),
                    ("adapter_prob", self.train.adapter_prob.to_string()),
                    ("warmup_steps", self.train.warmup_steps.to_string()),
                    (
                        "final_lr_fraction",
                        self.train.final_lr_fraction.to_string(),
                    ),
                    ("grad_clip", self.train.grad_clip.to_string()),
                    ("accept_loss", self.train.accept_loss.to_string()),
                    (
                        "resume",
                        self.resume
                            .as_ref()
                            .map_or("none".to_string(), |p| p.display().to_string()),
                    ),
                ],
            ),
            (
                "edit",
                vec![
                    ("steps", e.steps.to_string()),
                    ("k_front", e.k_front.to_string()),
                    ("k_tail", e.k_tail.to_string()),
                    ("tau", e.tau.to_string()),
                    ("sigma", e.sigma.to_string()),
                    ("guidance", e.guidance.to_string()),
                    ("injection_blocks", join(&e.injection_blocks)),
                    ("adapter_lo", e.adapter_interval.0.to_string()),
                    ("adapter_hi", e.adapter_interval.1.to_string()),
                    ("adapter_strengths", join(&e.adapter_strengths)),
                    ("adapter_enabled", e.adapter_enabled.to_string()),
                    (
                        "mask_override",
                        e.mask_override
                            .map_or("none", MaskOverride::name)
                            .to_string(),
                    ),
                    ("solver", e.solver.name().to_string()),
                ],
            ),
            (
                "eval",
                vec![
                    ("pairs", self.eval_pairs.to_string()),
                    ("round_trip_guidance", self.round_trip_guidance.to_string()),
                ],
            ),
        ];
        for (i, (name, keys)) in sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "[{name}]");
            for (k, v) in keys {
                if !with_out && *name == "run" && *k == "out" {
                    continue;
                }
                let _ = writeln!(out, "{k} = {v}");
            }
        }
        out
    }

    /// SHA-256 of the effective config text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
