//! The `tdm-edit` command-line front end.
//!
//! Every command resolves a [`RunConfig`] from defaults, `--config`, `--set`
//! overrides and `--seed`/`--out` (in that order), computes its results, and
//! only then writes the output directory. Each directory gets `config.txt`
//! (the effective config, minus `run.out`) and `manifest.txt`. Nothing
//! time-dependent is written, so identical inputs give identical bytes.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::codec::PatchCodec;
use crate::config::RunConfig;
use crate::edit::{round_trip, run_edit, EditRequest, EditResult, EditSchedule, MaskOverride};
use crate::error::{Error, Result};
use crate::flow::{checkpoint_bytes, parse_checkpoint, train, TrainReport, TrainSample};
use crate::imageio::{read_netpbm, read_raw_map, write_pgm, write_ppm, GrayImage};
use crate::latent::ConditionId;
use crate::metrics::{
    background_psnr, format_db, mask_iou, psnr, subject_box, upsample_mask, EvalReport, PairMetrics,
};
use crate::net::{adapter_input_from_image, VelocityNet};
use crate::solvers::save_trajectory;
use crate::synth::{make_dataset, manifest_text, parse_manifest, render, Dataset};
use crate::tdm::{minmax_normalize, EditMask, TokenMap};

#[derive(Parser, Debug)]
#[command(
    name = "tdm-edit",
    version,
    about = "Divergence-guided shape editing on a toy rectified flow"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Config file (`[section]` / `key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data, initialization and training; overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override one config key, e.g. `--set edit.k_front=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic dataset: manifest, training images, held-out pairs.
    Gen,
    /// Train the velocity network; writes a checkpoint and the loss history.
    Train,
    /// Invert an image to noise and denoise it back.
    Invert(InvertArgs),
    /// Edit one image from `c_src` to `c_tgt`.
    Edit(EditArgs),
    /// Score edit results, editing the held-out pairs first unless `--results` is given.
    Eval(EvalArgs),
    /// Render the maps of an edit output directory into one PGM montage.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug, Clone)]
pub struct SourceArgs {
    /// Index of a held-out pair of the dataset.
    #[arg(long, conflicts_with = "source")]
    pub pair: Option<usize>,
    /// Source image (binary PPM or PGM).
    #[arg(long, value_name = "PATH")]
    pub source: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct InvertArgs {
    #[command(flatten)]
    pub input: SourceArgs,
    /// Condition id, or `null`. Defaults to the pair's source condition.
    #[arg(long)]
    pub cond: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EditArgs {
    #[command(flatten)]
    pub input: SourceArgs,
    /// Source condition id or `null`; required with `--source`.
    #[arg(long = "c-src")]
    pub c_src: Option<String>,
    /// Target condition id or `null`. A pair defaults to its target.
    #[arg(long = "c-tgt")]
    pub c_tgt: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    /// Directory of edit outputs (one subdirectory per pair) to score as is.
    #[arg(long, value_name = "DIR", conflicts_with = "sweep")]
    pub results: Option<PathBuf>,
    /// Repeat the evaluation for each value, e.g. `edit.k_front=0,1,2,3,4`.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    pub sweep: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct VisualizeArgs {
    /// An edit output directory.
    #[arg(long, value_name = "DIR")]
    pub input: PathBuf,
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Invert(a) => cmd_invert(&cfg, a),
        Command::Edit(a) => cmd_edit(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Visualize(a) => cmd_visualize(&cfg, a),
    }
}

pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &g.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &g.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = g.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_cond(text: &str) -> Result<ConditionId> {
    if text == "null" {
        return Ok(ConditionId::NULL);
    }
    text.parse()
        .map(ConditionId)
        .map_err(|_| Error::config(format!("condition {text:?} is neither an id nor `null`")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.txt"), &cfg.portable_text())
}

/// The dataset at `run.dataset` if it holds a manifest, else the one the
/// data section describes.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset.join("manifest.txt");
    if !path.exists() {
        return make_dataset(&cfg.data);
    }
    let ds = parse_manifest(&fs::read_to_string(&path)?)?;
    let canvases = ds
        .train
        .iter()
        .map(|t| t.spec.canvas)
        .chain(ds.pairs.iter().map(|p| p.pair.source.canvas));
    if let Some(c) = canvases.into_iter().find(|&c| c != cfg.data.canvas) {
        return Err(Error::config(format!(
            "{} has canvas {c}, config says {}",
            path.display(),
            cfg.data.canvas
        )));
    }
    Ok(ds)
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let ds = make_dataset(&cfg.data)?;
    let train_imgs = ds
        .train
        .iter()
        .map(|t| render(&t.spec, t.seed))
        .collect::<Result<Vec<_>>>()?;
    let out = &cfg.out;
    fs::create_dir_all(out.join("train"))?;
    fs::create_dir_all(out.join("pairs"))?;
    write_text(&out.join("manifest.txt"), &manifest_text(&ds))?;
    write_config(out, cfg)?;
    for (i, img) in train_imgs.iter().enumerate() {
        write_ppm(&out.join("train").join(format!("{i:05}.ppm")), img)?;
    }
    for (i, p) in ds.pairs.iter().enumerate() {
        let dir = out.join("pairs");
        write_ppm(
            &dir.join(format!("{i:03}_source.ppm")),
            &p.pair.render_source()?,
        )?;
        write_ppm(
            &dir.join(format!("{i:03}_target.ppm")),
            &p.pair.render_target()?,
        )?;
        let n = p.pair.source.canvas;
        write_pgm(
            &dir.join(format!("{i:03}_mask.pgm")),
            n,
            n,
            &bool_pixels(&p.pair.change_mask()),
        )?;
    }
    println!(
        "wrote {} training images and {} held-out pairs to {}",
        ds.train.len(),
        ds.pairs.len(),
        out.display()
    );
    Ok(())
}

fn bool_pixels(mask: &[bool]) -> Vec<f32> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// Training samples for every item of the dataset's training split.
pub fn training_samples(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<TrainSample>> {
    let codec = cfg.codec()?;
    ds.train
        .iter()
        .map(|t| {
            let img = render(&t.spec, t.seed)?;
            Ok(TrainSample {
                latent: codec.encode(&img)?,
                cond: t.cond,
                adapter_map: adapter_input_from_image(&img, cfg.patch)?,
            })
        })
        .collect()
}

/// Fresh network for `cfg`, trained as `train` does it.
pub fn train_fresh(cfg: &RunConfig, ds: &Dataset) -> Result<(VelocityNet, TrainReport)> {
    let samples = training_samples(cfg, ds)?;
    let mut net = VelocityNet::new(cfg.model.clone(), cfg.seed)?;
    let report = train(&mut net, &samples, &cfg.train)?;
    Ok((net, report))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let samples = training_samples(cfg, &ds)?;
    let (mut net, resumed) = match &cfg.resume {
        Some(path) => {
            let bytes = fs::read(path)?;
            (parse_checkpoint(&bytes)?, Some((path, sha256_hex(&bytes))))
        }
        None => (VelocityNet::new(cfg.model.clone(), cfg.seed)?, None),
    };
    let report = train(&mut net, &samples, &cfg.train)?;
    let bytes = checkpoint_bytes(&net);

    let mut history = String::from("step loss\n");
    for (i, l) in report.history.iter().enumerate() {
        let _ = writeln!(history, "{i} {l}");
    }
    let mut m = Manifest::new("train", cfg);
    m.push("dataset_sha256", sha256_hex(manifest_text(&ds).as_bytes()));
    m.push("samples", samples.len());
    if let Some((path, digest)) = &resumed {
        m.push("resumed_from", path.display());
        m.push("resumed_sha256", digest);
    }
    m.push("epochs", cfg.train.epochs);
    m.push("batches_per_epoch", report.batches_per_epoch);
    m.push("steps", report.history.len());
    m.push("final_running_loss", report.final_running_loss);
    m.push("accept_loss", cfg.train.accept_loss);
    m.push("accepted", report.accepted);
    m.push("model_parameters", net.params().count());
    m.push("checkpoint_sha256", sha256_hex(&bytes));

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    fs::write(out.join("model.ckpt"), &bytes)?;
    write_text(&out.join("loss_history.txt"), &history)?;
    write_config(out, cfg)?;
    m.write(out)?;
    for (e, chunk) in report
        .history
        .chunks(report.batches_per_epoch.max(1))
        .enumerate()
    {
        eprintln!(
            "epoch {e} loss {:.5}",
            chunk.iter().sum::<f64>() / chunk.len() as f64
        );
    }
    if cfg.train.epochs > 0 && !report.accepted {
        eprintln!(
            "warning: final running loss {:.5} is not below train.accept_loss {}",
            report.final_running_loss, cfg.train.accept_loss
        );
    }
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

/// `key=value` manifest lines, starting with the command and config digest.
struct Manifest(Vec<(String, String)>);

impl Manifest {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        let mut m = Manifest(Vec::new());
        m.push("command", command);
        m.push("config_sha256", sha256_hex(cfg.portable_text().as_bytes()));
        m
    }

    fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    fn text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join("manifest.txt"), &self.text())
    }
}

struct Loaded {
    net: VelocityNet,
    digest: String,
}

fn load_model(cfg: &RunConfig) -> Result<Loaded> {
    let bytes = fs::read(&cfg.checkpoint).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("checkpoint {}: {e}", cfg.checkpoint.display()),
        ))
    })?;
    let net = parse_checkpoint(&bytes)?;
    Ok(Loaded {
        net,
        digest: sha256_hex(&bytes),
    })
}

/// One editing job: the source and, for held-out pairs, the ground truth.
struct Job {
    label: String,
    source: GrayImage,
    c_src: ConditionId,
    c_tgt: ConditionId,
    target: Option<GrayImage>,
    change_mask: Option<Vec<bool>>,
}

fn pair_job(ds: &Dataset, index: usize) -> Result<Job> {
    let item = ds.pairs.get(index).ok_or_else(|| {
        Error::invalid(format!(
            "pair {index} out of range; the dataset has {}",
            ds.pairs.len()
        ))
    })?;
    Ok(Job {
        label: format!("pair {index}"),
        source: item.pair.render_source()?,
        c_src: item.source_cond,
        c_tgt: item.target_cond,
        target: Some(item.pair.render_target()?),
        change_mask: Some(item.pair.change_mask()),
    })
}

fn resolve_job(
    cfg: &RunConfig,
    input: &SourceArgs,
    c_src: Option<&str>,
    c_tgt: Option<&str>,
) -> Result<Job> {
    let mut job = match (&input.source, input.pair) {
        (Some(path), _) => {
            let bytes = fs::read(path)?;
            let c_src = c_src.ok_or_else(|| Error::config("--source needs a source condition"))?;
            Job {
                label: format!("{} sha256={}", path.display(), sha256_hex(&bytes)),
                source: read_netpbm(path)?,
                c_src: parse_cond(c_src)?,
                c_tgt: ConditionId::NULL,
                target: None,
                change_mask: None,
            }
        }
        (None, Some(index)) => pair_job(&load_dataset(cfg)?, index)?,
        (None, None) => return Err(Error::config("give either --pair or --source")),
    };
    if let Some(c) = c_src {
        job.c_src = parse_cond(c)?;
    }
    match c_tgt {
        Some(c) => job.c_tgt = parse_cond(c)?,
        None if input.source.is_some() => job.c_tgt = job.c_src,
        None => {}
    }
    Ok(job)
}

fn cmd_invert(cfg: &RunConfig, args: &InvertArgs) -> Result<()> {
    let model = load_model(cfg)?;
    let job = resolve_job(cfg, &args.input, args.cond.as_deref(), None)?;
    let codec = cfg.codec()?;
    let x0 = codec.encode(&job.source)?;
    let (up, down) = round_trip(
        &model.net,
        &x0,
        job.c_src,
        cfg.edit.steps,
        cfg.edit.solver,
        cfg.round_trip_guidance,
    )?;
    let recon = codec.decode(down.end())?;
    let quality = psnr(&job.source, &recon)?;

    let mut m = Manifest::new("invert", cfg);
    m.push("input", &job.label);
    m.push("cond", job.c_src);
    m.push("checkpoint_sha256", &model.digest);
    m.push("steps", cfg.edit.steps);
    m.push("solver", cfg.edit.solver.name());
    m.push("guidance", cfg.round_trip_guidance);
    m.push("nfe_inversion", up.nfe());
    m.push("nfe_denoising", down.nfe());
    m.push("round_trip_psnr", format_db(quality));

    let out = &cfg.out;
    fs::create_dir_all(out)?;
    save_trajectory(&out.join("inversion.traj"), &up)?;
    save_trajectory(&out.join("denoising.traj"), &down)?;
    write_ppm(&out.join("source.ppm"), &job.source)?;
    write_ppm(&out.join("reconstructed.ppm"), &recon)?;
    write_config(out, cfg)?;
    m.write(out)?;
    println!("round-trip PSNR {} dB", format_db(quality));
    Ok(())
}

fn edit_request<'a>(
    job: &'a Job,
    schedule: &'a EditSchedule,
    codec: &'a PatchCodec,
    seed: u64,
) -> EditRequest<'a> {
    EditRequest {
        source: &job.source,
        c_src: job.c_src,
        c_tgt: job.c_tgt,
        schedule,
        codec,
        seed,
    }
}

/// Summary of the schedule fields that change edit results.
pub fn schedule_id(s: &EditSchedule) -> String {
    format!(
        "steps={} k_front={} k_tail={} tau={} sigma={} guidance={} adapter={} solver={} override={}",
        s.steps,
        s.k_front,
        s.k_tail,
        s.tau,
        s.sigma,
        s.guidance,
        if s.adapter_enabled { "on" } else { "off" },
        s.solver.name(),
        s.mask_override.map_or("none", MaskOverride::name),
    )
}

/// The mask actually used at the last denoising step that blended.
fn final_binary(result: &EditResult, schedule: &EditSchedule, h: usize, w: usize) -> TokenMap {
    match (result.final_mask(), schedule.mask_override) {
        (Some(m), _) => m.binary.clone(),
        (None, Some(MaskOverride::Ones)) => EditMask::constant(h, w, 1.0).binary,
        (None, _) => EditMask::constant(h, w, 0.0).binary,
    }
}

fn write_edit_dir(
    dir: &Path,
    cfg: &RunConfig,
    job: &Job,
    model_digest: &str,
    result: &EditResult,
) -> Result<()> {
    let (h, w) = (result.edited.height(), result.edited.width());
    let maps = dir.join("maps");
    fs::create_dir_all(&maps)?;
    write_ppm(&dir.join("source.ppm"), &job.source)?;
    write_ppm(&dir.join("edited.ppm"), &result.image)?;
    if let (Some(target), Some(mask)) = (&job.target, &job.change_mask) {
        write_ppm(&dir.join("target.ppm"), target)?;
        write_pgm(
            &dir.join("gt_mask.pgm"),
            target.width(),
            target.height(),
            &bool_pixels(mask),
        )?;
    }
    final_binary(result, &cfg.edit, h, w).write_pgm(&dir.join("mask.pgm"))?;
    if let Some(m) = result.final_mask() {
        m.soft.write_pgm(&dir.join("mask_soft.pgm"))?;
        m.soft.write_raw(&dir.join("mask_soft.raw"))?;
    }
    for (d, f) in result.divergence.iter().zip(&result.fused) {
        let s = d.step;
        minmax_normalize(d)
            .map
            .write_pgm(&maps.join(format!("divergence_s{s:02}.pgm")))?;
        d.map
            .write_raw(&maps.join(format!("divergence_s{s:02}.raw")))?;
        f.map.write_raw(&maps.join(format!("fused_s{s:02}.raw")))?;
    }
    let mut m = Manifest::new("edit", cfg);
    m.push("input", &job.label);
    m.push("checkpoint_sha256", model_digest);
    m.push("schedule", schedule_id(&cfg.edit));
    m.push(
        "psnr_vs_source",
        format_db(psnr(&job.source, &result.image)?),
    );
    for (k, v) in &result.manifest.entries {
        m.push(k, v);
    }
    write_config(dir, cfg)?;
    m.write(dir)
}

fn cmd_edit(cfg: &RunConfig, args: &EditArgs) -> Result<()> {
    let model = load_model(cfg)?;
    let job = resolve_job(
        cfg,
        &args.input,
        args.c_src.as_deref(),
        args.c_tgt.as_deref(),
    )?;
    let codec = cfg.codec()?;
    let result = run_edit(&model.net, &edit_request(&job, &cfg.edit, &codec, cfg.seed))?;
    write_edit_dir(&cfg.out, cfg, &job, &model.digest, &result)?;
    println!(
        "edited {} ({} -> {}), {} Stage-2 maps, {} NFE; wrote {}",
        job.label,
        job.c_src,
        job.c_tgt,
        result.divergence.len(),
        result.nfe.total(),
        cfg.out.display()
    );
    Ok(())
}

fn read_manifest_value(path: &Path, key: &str) -> Option<String> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .map(str::to_string)
}

/// Score every subdirectory of `dir` that holds an edit result.
pub fn evaluate_dir(dir: &Path) -> Result<EvalReport> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::invalid(format!("results directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("edited.ppm").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::invalid(format!(
            "no edit results under {}",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(subdirs.len());
    for sub in &subdirs {
        let name = sub
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let source = read_netpbm(&sub.join("source.ppm"))?;
        let edited = read_netpbm(&sub.join("edited.ppm"))?;
        let gt_path = sub.join("gt_mask.pgm");
        if !gt_path.is_file() {
            return Err(Error::invalid(format!(
                "{}: no gt_mask.pgm; only held-out pairs can be scored",
                sub.display()
            )));
        }
        let gt: Vec<bool> = read_netpbm(&gt_path)?
            .pixels()
            .iter()
            .map(|&v| v > 0.5)
            .collect();
        let mask_img = read_netpbm(&sub.join("mask.pgm"))?;
        let mask = TokenMap::new(
            mask_img.height(),
            mask_img.width(),
            mask_img.pixels().to_vec(),
        )?;
        if mask.width == 0 || source.width() % mask.width != 0 {
            return Err(Error::format(format!(
                "{}: mask grid does not divide the canvas",
                sub.display()
            )));
        }
        let patch = source.width() / mask.width;
        let (w, h) = (source.width(), source.height());
        let subject = subject_box(&gt, w, h, patch)
            .ok_or_else(|| Error::invalid(format!("{}: empty ground-truth mask", sub.display())))?;
        pairs.push(PairMetrics {
            name,
            psnr: psnr(&source, &edited)?,
            background_psnr: background_psnr(&source, &edited, subject)?,
            mask_iou: mask_iou(&upsample_mask(&mask, patch), &gt)?,
        });
    }
    let first = subdirs[0].join("manifest.txt");
    let model =
        read_manifest_value(&first, "checkpoint_sha256").unwrap_or_else(|| "unknown".into());
    let schedule = read_manifest_value(&first, "schedule").unwrap_or_else(|| "unknown".into());
    EvalReport::new(model, schedule, pairs)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    write_text(&dir.join("report.json"), &report.to_json())
}

/// Edit the first `eval.pairs` held-out pairs into `dir/pairs` and score them.
fn edit_and_score(cfg: &RunConfig, model: &Loaded, ds: &Dataset, dir: &Path) -> Result<EvalReport> {
    let n = cfg.eval_pairs.min(ds.pairs.len());
    if n == 0 {
        return Err(Error::invalid("no held-out pairs to evaluate"));
    }
    let codec = cfg.codec()?;
    let mut done = Vec::with_capacity(n);
    for i in 0..n {
        let job = pair_job(ds, i)?;
        let result = run_edit(&model.net, &edit_request(&job, &cfg.edit, &codec, cfg.seed))?;
        done.push((job, result));
    }
    for (i, (job, result)) in done.iter().enumerate() {
        write_edit_dir(
            &dir.join("pairs").join(format!("pair_{i:03}")),
            cfg,
            job,
            &model.digest,
            result,
        )?;
    }
    let report = evaluate_dir(&dir.join("pairs"))?;
    write_report(dir, &report)?;
    write_config(dir, cfg)?;
    Ok(report)
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    if let Some(results) = &args.results {
        let report = evaluate_dir(results)?;
        write_report(&cfg.out, &report)?;
        print!("{}", report.to_text());
        return Ok(());
    }
    let model = load_model(cfg)?;
    let ds = load_dataset(cfg)?;
    let Some(sweep) = &args.sweep else {
        let report = edit_and_score(cfg, &model, &ds, &cfg.out)?;
        print!("{}", report.to_text());
        return Ok(());
    };
    let (key, values) = sweep
        .split_once('=')
        .ok_or_else(|| Error::config(format!("sweep {sweep:?} is not key=v1,v2,...")))?;
    let values: Vec<&str> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::config("sweep has no values"));
    }
    // validate every point before editing anything
    let mut points = Vec::with_capacity(values.len());
    for v in &values {
        let mut c = cfg.clone();
        c.set(key.trim(), v)?;
        c.validate()?;
        points.push(c);
    }
    let short = key.trim().rsplit('.').next().unwrap_or(key);
    let mut summary = format!("{short} mean_psnr mean_background_psnr mean_mask_iou\n");
    for (v, c) in values.iter().zip(&points) {
        let report = edit_and_score(c, &model, &ds, &cfg.out.join(format!("{short}_{v}")))?;
        let _ = writeln!(
            summary,
            "{v} {} {} {:.4}",
            format_db(report.mean_psnr),
            format_db(report.mean_background_psnr),
            report.mean_mask_iou
        );
    }
    write_text(&cfg.out.join("sweep.txt"), &summary)?;
    write_config(&cfg.out, cfg)?;
    print!("{summary}");
    Ok(())
}

/// Nearest-neighbour upsampling of a token map to `w × h` pixels.
fn upsample(values: &[f32], gh: usize, gw: usize, w: usize, h: usize) -> Vec<f32> {
    (0..w * h)
        .map(|i| values[(i / w) * gh / h * gw + (i % w) * gw / w])
        .collect()
}

fn normalized(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

fn cmd_visualize(cfg: &RunConfig, args: &VisualizeArgs) -> Result<()> {
    let dir = &args.input;
    let source = read_netpbm(&dir.join("source.ppm"))?;
    let edited = read_netpbm(&dir.join("edited.ppm"))?;
    let (w, h) = (source.width(), source.height());
    let mut tiles: Vec<Vec<f32>> = vec![source.pixels().to_vec(), edited.pixels().to_vec()];
    let mask = read_netpbm(&dir.join("mask.pgm"))?;
    tiles.push(upsample(mask.pixels(), mask.height(), mask.width(), w, h));
    let soft = dir.join("mask_soft.raw");
    if soft.is_file() {
        let (gh, gw, v) = read_raw_map(&soft)?;
        tiles.push(upsample(&v, gh, gw, w, h));
    }
    let mut steps: Vec<PathBuf> = fs::read_dir(dir.join("maps"))
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    steps.retain(|p| {
        p.file_name()
            .is_some_and(|n| n.to_string_lossy().starts_with("divergence_"))
            && p.extension().is_some_and(|e| e == "raw")
    });
    steps.sort();
    let header = tiles.len();
    for p in &steps {
        let (gh, gw, v) = read_raw_map(p)?;
        tiles.push(upsample(&normalized(&v), gh, gw, w, h));
    }
    let cols = 6usize;
    let rows = 1 + steps.len().div_ceil(cols);
    let (mw, mh) = (cols * w, rows * h);
    let mut canvas = vec![0.0f32; mw * mh];
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = if i < header {
            (0, i)
        } else {
            (1 + (i - header) / cols, (i - header) % cols)
        };
        for y in 0..h {
            let row = (r * h + y) * mw + c * w;
            canvas[row..row + w].copy_from_slice(&tile[y * w..(y + 1) * w]);
        }
    }
    fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("montage.pgm");
    write_pgm(&path, mw, mh, &canvas)?;
    println!("wrote {} ({} step maps)", path.display(), steps.len());
    Ok(())
}
