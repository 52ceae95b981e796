//! Command-line front end. Every subcommand is a plain function over parsed
//! arguments so tests can drive it without spawning a process.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::ArrayView3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, file_hash};
use crate::config::{CodecChoice, RunConfig};
use crate::critic::load_extractor;
use crate::curator::{curate_clip, stage_counts, CurationReport, FaceFixture, NoTextOcr, OcrClient, TextRegion};
use crate::dataset::{self, read_video, validate_dataset, video_id, write_video, VideoMeta};
use crate::degrade::{codec_binary, degrade_video, flicker, sample_params, CodecMode, FlickerSpec};
use crate::error::{Error, Result};
use crate::evalkit::{aggregate, evaluate_pair, temporal_profile, CodebookUsage, MetricReport};
use crate::training::{
    enhance_long, IncrementalSchedule, Stage1Models, Stage1Trainer, Stage2Degradation, Stage2Models, Stage2Trainer,
};
use crate::video::VideoTensor;

const DTYPE: DType = DType::F32;

#[derive(Debug, Parser)]
#[command(name = "facevq", version, about = "Spatial-temporal codebook face video enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train the HQ autoencoder and both codebooks.
    TrainStage1(TrainArgs),
    /// Train the LQ encoder and lookup transformers on a frozen Stage I.
    TrainStage2(TrainArgs),
    /// Restore a video directory (or container file) with a Stage-II checkpoint.
    Enhance(EnhanceArgs),
    /// Synthesize LQ videos from an HQ dataset.
    Degrade(DegradeArgs),
    /// Run the three-stage curation filter over recorded detector outputs.
    Curate(CurateArgs),
    /// Score restored videos against references.
    Evaluate(EvaluateArgs),
    /// Write the temporal profile of one pixel column as a PNG.
    Profile(ProfileArgs),
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Validate configuration and inputs, then exit without computing.
    #[arg(long)]
    pub dry_run: bool,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the configured output root).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel workers for data-side commands.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override the configured iteration count.
    #[arg(long)]
    pub iters: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct EnhanceArgs {
    /// Stage-II checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Frame directory or container file.
    #[arg(long)]
    pub input: PathBuf,
    /// Frame directory, or a container file when it has an extension.
    #[arg(long)]
    pub output: PathBuf,
    /// De-flickering preset: same path, recorded in the run manifest.
    #[arg(long)]
    pub deflicker: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FlickerArg {
    Brightness,
    Pixel,
}

#[derive(Debug, Clone, Args)]
pub struct DegradeArgs {
    /// HQ dataset root.
    #[arg(long)]
    pub input: PathBuf,
    /// Optional run config; its `[degradation]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Add flicker on top of the degradation chain.
    #[arg(long, value_enum)]
    pub flicker: Option<FlickerArg>,
    /// Per-frame flicker probability.
    #[arg(long, default_value_t = 0.3)]
    pub p: f64,
    /// Apply only the flicker, skipping blur, resize, noise and codec.
    #[arg(long)]
    pub flicker_only: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct CurateArgs {
    /// Dataset root; each video directory holds `faces.json` and optionally `text.json`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Drop kept clips whose motion intensity is below this value.
    #[arg(long)]
    pub min_motion: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Restored dataset root.
    #[arg(long)]
    pub restored: PathBuf,
    /// Reference dataset root with the same video ids.
    #[arg(long)]
    pub reference: PathBuf,
    /// Stage-I checkpoint used to report codebook utilization.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub column: usize,
    /// Output PNG path.
    #[arg(long)]
    pub output: PathBuf,
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Checkpoint { .. } => 2,
        Error::Data(_)
        | Error::Shape(_)
        | Error::Indivisible { .. }
        | Error::SequenceLength { .. }
        | Error::IndexOutOfRange { .. }
        | Error::Io(_)
        | Error::Image(_)
        | Error::Json(_) => 3,
        Error::External(_) => 4,
        Error::Tensor(_) | Error::NonFinite(_) => 1,
    }
}

/// Parses `args`, runs the command, and returns the exit status.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::TrainStage1(a) => train_stage1(&a).map(|_| ()),
        Cmd::TrainStage2(a) => train_stage2(&a).map(|_| ()),
        Cmd::Enhance(a) => enhance_cmd(&a),
        Cmd::Degrade(a) => degrade_cmd(&a),
        Cmd::Curate(a) => curate_cmd(&a),
        Cmd::Evaluate(a) => evaluate_cmd(&a),
        Cmd::Profile(a) => profile_cmd(&a),
    }
}

/// Everything needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u64>,
    /// Input paths by role.
    pub inputs: BTreeMap<String, PathBuf>,
    /// SHA-256 of every checkpoint read or written, by path.
    pub checkpoints: BTreeMap<String, String>,
    pub flags: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: None,
            seed: None,
            iterations: None,
            inputs: BTreeMap::new(),
            checkpoints: BTreeMap::new(),
            flags: BTreeMap::new(),
        }
    }

    fn hash_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoints.insert(path.display().to_string(), file_hash(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("run_manifest.json"), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_config(path: &Path, common: &Common, iters: Option<u64>, stage2: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = iters {
        if stage2 {
            cfg.stage2.iterations = n;
        } else {
            cfg.stage1.iterations = n;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(common: &Common, fallback: PathBuf) -> PathBuf {
    common.out.clone().unwrap_or(fallback)
}

/// Deterministic epoch-shuffled batches over `n` clips.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn jsonl(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// What a training command leaves behind.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub metrics: Vec<MetricReport>,
}

fn dataset_summary(cfg: &RunConfig) -> Result<()> {
    let videos = validate_dataset(&cfg.data.root)?;
    if videos.len() <= cfg.data.held_out {
        return Err(Error::Data(format!(
            "{}: {} videos cannot leave {} held out",
            cfg.data.root.display(),
            videos.len(),
            cfg.data.held_out
        )));
    }
    if let Some(v) = videos.iter().find(|v| v.frames < cfg.data.clip_frames) {
        return Err(Error::Data(format!(
            "video {} has {} frames, fewer than one {}-frame clip",
            v.id, v.frames, cfg.data.clip_frames
        )));
    }
    log::info!("dataset ok: {} videos", videos.len());
    Ok(())
}

pub fn train_stage1(args: &TrainArgs) -> Result<Option<TrainOutcome>> {
    let cfg = load_config(&args.config, &args.common, args.iters, false)?;
    dataset_summary(&cfg)?;
    if args.common.dry_run {
        println!("dry run: config and dataset are valid");
        return Ok(None);
    }
    let dir = output_dir(&args.common, cfg.output.join("stage1"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let split = dataset::load_split(&cfg.data.root, cfg.data.clip_frames, cfg.stage1.resolution, cfg.data.held_out)?;

    let dev = Device::Cpu;
    let extractor = load_extractor(&cfg.extractor, &dev, DTYPE)?;
    let models = Stage1Models::new(&cfg.model, &extractor.channels(), cfg.seed, &dev, DTYPE)?;
    let mut trainer = Stage1Trainer::new(models, extractor, cfg.loss, cfg.optim, cfg.seed)?;
    let mut batches = Batcher::new(split.train.len(), cfg.seed);

    let log_path = dir.join("train_log.jsonl");
    let mut log = jsonl(&log_path)?;
    let mut manifest = RunManifest::new("train-stage1");
    manifest.config_hash = Some(cfg.hash()?);
    manifest.seed = Some(cfg.seed);
    manifest.iterations = Some(cfg.stage1.iterations);
    manifest.inputs.insert("data".into(), cfg.data.root.clone());
    manifest.inputs.insert("config".into(), args.config.clone());

    let save = |trainer: &Stage1Trainer, path: &Path| -> Result<()> {
        let extra = trainer.optimizer_state()?;
        checkpoint::save_stage1(path, &trainer.models, trainer.state.iteration, cfg.seed, extra)
    };
    for it in 0..cfg.stage1.iterations {
        let batch: Vec<VideoTensor> = batches.next(cfg.stage1.batch).into_iter().map(|i| split.train[i].clone()).collect();
        let report = trainer.step(&batch)?;
        serde_json::to_writer(&mut log, &report)?;
        log.write_all(b"\n")?;
        let done = it + 1;
        if cfg.stage1.checkpoint_every > 0 && done % cfg.stage1.checkpoint_every == 0 && done < cfg.stage1.iterations {
            let p = dir.join(format!("stage1_{done:08}.safetensors"));
            save(&trainer, &p)?;
            manifest.hash_checkpoint(&p)?;
        }
    }
    log.flush()?;
    let ckpt = dir.join("stage1.safetensors");
    save(&trainer, &ckpt)?;
    manifest.hash_checkpoint(&ckpt)?;

    let m = &trainer.models;
    let mut metrics = Vec::new();
    let mut usage = CodebookUsage::new(m.config.codebook_spatial, m.config.codebook_temporal);
    for clip in &split.held_out {
        let mut r = evaluate_pair(&m.autoencode(clip)?, clip, None, &[])?;
        let (s, t) = m.indices(clip)?;
        usage.add(&s, &t)?;
        let single = crate::evalkit::codebook_report(&s, &t, m.config.codebook_spatial, m.config.codebook_temporal)?;
        let (us, ut) = single.utilization();
        r.utilization_spatial = Some(us);
        r.utilization_temporal = Some(ut);
        metrics.push(r);
    }
    write_final_metrics(&dir, &metrics, Some(usage.utilization()))?;
    manifest.write(&dir)?;
    Ok(Some(TrainOutcome {
        dir,
        checkpoint: ckpt,
        log: log_path,
        metrics,
    }))
}

#[derive(Serialize)]
struct FinalMetrics<'a> {
    clips: &'a [MetricReport],
    aggregate: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    utilization: Option<[f64; 2]>,
}

fn write_final_metrics(dir: &Path, clips: &[MetricReport], utilization: Option<(f64, f64)>) -> Result<()> {
    write_json(
        &dir.join("final_metrics.json"),
        &FinalMetrics {
            clips,
            aggregate: aggregate(clips),
            utilization: utilization.map(|(a, b)| [a, b]),
        },
    )
}

fn codec_mode(choice: CodecChoice) -> CodecMode {
    match choice {
        CodecChoice::Proxy => CodecMode::Proxy,
        CodecChoice::External => CodecMode::External { binary: None },
    }
}

pub fn train_stage2(args: &TrainArgs) -> Result<Option<TrainOutcome>> {
    let cfg = load_config(&args.config, &args.common, args.iters, true)?;
    let s1_path = cfg.validate_stage2()?.to_path_buf();
    dataset_summary(&cfg)?;
    if args.common.dry_run {
        println!("dry run: config, stage I checkpoint and dataset are valid");
        return Ok(None);
    }
    let dir = output_dir(&args.common, cfg.output.join("stage2"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let res = cfg.stage2.resolution;
    let split = dataset::load_split(&cfg.data.root, cfg.data.clip_frames, res, cfg.data.held_out)?;

    let dev = Device::Cpu;
    let (_, s1) = checkpoint::load_stage1(&s1_path, Some(&cfg.model), &[], &dev, DTYPE)?;
    let models = Stage2Models::from_stage1(s1, [cfg.data.clip_frames, res, res], cfg.seed)?;
    let degradation = Stage2Degradation::Synthetic {
        ranges: cfg.degradation.ranges,
        codec: codec_mode(cfg.degradation.codec),
        flicker: cfg.degradation.flicker.clone(),
    };
    let schedule = IncrementalSchedule {
        total_iterations: cfg.stage2.iterations,
        noise_free_fraction: cfg.stage2.noise_free_fraction,
    };
    let mut optim = cfg.optim.generator;
    optim.lr = cfg.stage2.lr;
    let mut trainer = Stage2Trainer::new(models, cfg.loss, optim, degradation, schedule, cfg.seed)?;
    trainer.workers = args.common.workers.max(1);
    let mut batches = Batcher::new(split.train.len(), cfg.seed);

    let log_path = dir.join("train_log.jsonl");
    let mut log = jsonl(&log_path)?;
    let mut manifest = RunManifest::new("train-stage2");
    manifest.config_hash = Some(cfg.hash()?);
    manifest.seed = Some(cfg.seed);
    manifest.iterations = Some(cfg.stage2.iterations);
    manifest.inputs.insert("data".into(), cfg.data.root.clone());
    manifest.inputs.insert("config".into(), args.config.clone());
    manifest.hash_checkpoint(&s1_path)?;

    let save = |trainer: &Stage2Trainer, path: &Path| -> Result<()> {
        checkpoint::save_stage2(path, &trainer.models, trainer.state.iteration, cfg.seed, trainer.optimizer_state()?)
    };
    for it in 0..cfg.stage2.iterations {
        let batch: Vec<VideoTensor> = batches.next(cfg.stage2.batch).into_iter().map(|i| split.train[i].clone()).collect();
        let report = trainer.step(&batch)?;
        serde_json::to_writer(&mut log, &report)?;
        log.write_all(b"\n")?;
        let done = it + 1;
        if cfg.stage2.checkpoint_every > 0 && done % cfg.stage2.checkpoint_every == 0 && done < cfg.stage2.iterations {
            let p = dir.join(format!("stage2_{done:08}.safetensors"));
            save(&trainer, &p)?;
            manifest.hash_checkpoint(&p)?;
        }
    }
    log.flush()?;
    let ckpt = dir.join("stage2.safetensors");
    save(&trainer, &ckpt)?;
    manifest.hash_checkpoint(&ckpt)?;

    // Held-out clips get fixed per-clip degradations drawn from the full ranges.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4e1d_0u64);
    let codec = codec_mode(cfg.degradation.codec);
    let mut metrics = Vec::new();
    for clip in &split.held_out {
        let params = sample_params(&mut rng, &cfg.degradation.ranges)?;
        let lq = degrade_video(clip, &params, &codec)?.video;
        metrics.push(evaluate_pair(&enhance_long(&lq, &trainer.models)?, clip, None, &[])?);
    }
    write_final_metrics(&dir, &metrics, None)?;
    manifest.write(&dir)?;
    Ok(Some(TrainOutcome {
        dir,
        checkpoint: ckpt,
        log: log_path,
        metrics,
    }))
}

fn is_container(path: &Path) -> bool {
    path.extension().is_some() && !path.is_dir()
}

/// Decodes a container file into `%06d.png` frames with the external codec binary.
pub fn decode_container(input: &Path, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let bin = codec_binary(&None);
    let out = Command::new(&bin)
        .args(["-y", "-loglevel", "error", "-i"])
        .arg(input)
        .args(["-start_number", "0"])
        .arg(dir.join("%06d.png"))
        .stderr(Stdio::piped())
        .output()
        .map_err(|e| Error::External(format!("cannot start {}: {e}", bin.display())))?;
    if !out.status.success() {
        return Err(Error::External(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    Ok(())
}

/// Encodes `%06d.png` frames into a lossless H.264 container.
pub fn encode_container(dir: &Path, output: &Path, fps: f32) -> Result<()> {
    let bin = codec_binary(&None);
    let out = Command::new(&bin)
        .args(["-y", "-loglevel", "error", "-framerate", &fps.to_string(), "-start_number", "0", "-i"])
        .arg(dir.join("%06d.png"))
        .args(["-c:v", "libx264", "-qp", "0", "-pix_fmt", "yuv444p"])
        .arg(output)
        .stderr(Stdio::piped())
        .output()
        .map_err(|e| Error::External(format!("cannot start {}: {e}", bin.display())))?;
    if !out.status.success() {
        return Err(Error::External(String::from_utf8_lossy(&out.stderr).into_owned()));
    }
    Ok(())
}

fn enhance_cmd(args: &EnhanceArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(Error::Checkpoint {
            path: args.checkpoint.clone(),
            msg: "no such checkpoint file".into(),
        });
    }
    if !args.input.exists() {
        return Err(Error::Data(format!("input {} does not exist", args.input.display())));
    }
    if args.input.is_dir() {
        dataset::validate_video(&args.input)?;
    }
    let manifest_ck = checkpoint::read_manifest(&std::fs::read(&args.checkpoint)?, &args.checkpoint)?;
    if args.common.dry_run {
        println!("dry run: checkpoint (stage {:?}, iteration {}) and input are valid", manifest_ck.stage, manifest_ck.iteration);
        return Ok(());
    }
    let scratch = tempfile_dir("enhance")?;
    let frames_dir = if is_container(&args.input) {
        let d = scratch.join("input");
        decode_container(&args.input, &d)?;
        d
    } else {
        args.input.clone()
    };
    let (lq, meta) = read_video(&frames_dir)?;
    let (_, models) = checkpoint::load_stage2(&args.checkpoint, None, &Device::Cpu, DTYPE)?;
    let out = enhance_long(&lq, &models)?;

    let mut meta_out = VideoMeta::for_video(&out, format!("enhance:{}", args.input.display()));
    if let Some(m) = meta {
        meta_out.frame_rate = m.frame_rate;
    }
    let (frames_out, run_dir) = if is_container(&args.output) {
        (scratch.join("output"), args.output.parent().map(Path::to_path_buf).unwrap_or_default())
    } else {
        (args.output.clone(), args.output.clone())
    };
    write_video(&frames_out, &out, &meta_out)?;
    if is_container(&args.output) {
        encode_container(&frames_out, &args.output, out.frame_rate)?;
    }
    let _ = std::fs::remove_dir_all(&scratch);

    let mut manifest = RunManifest::new("enhance");
    manifest.inputs.insert("input".into(), args.input.clone());
    manifest.hash_checkpoint(&args.checkpoint)?;
    manifest.flags.insert("deflicker".into(), args.deflicker.to_string());
    let mdir = args.common.out.clone().unwrap_or(run_dir);
    manifest.write(&mdir)
}

fn tempfile_dir(tag: &str) -> Result<PathBuf> {
    let d = std::env::temp_dir().join(format!("facevq-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&d)?;
    Ok(d)
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Result<Vec<U>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, Serialize)]
struct DegradeEntry {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    degradation: Option<crate::degrade::DegradationRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flicker_fraction: Option<f64>,
}

fn degrade_cmd(args: &DegradeArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => load_config(p, &args.common, None, false)?,
        None => {
            let mut c = RunConfig::default();
            if let Some(s) = args.common.seed {
                c.seed = s;
            }
            c
        }
    };
    if args.flicker_only && args.flicker.is_none() {
        return Err(Error::Config("--flicker-only needs --flicker".into()));
    }
    let spec = args.flicker.map(|k| match k {
        FlickerArg::Brightness => FlickerSpec::brightness(args.p, cfg.seed),
        FlickerArg::Pixel => FlickerSpec::pixel(args.p, cfg.seed),
    });
    let spec = spec.or_else(|| cfg.degradation.flicker.clone());
    if let Some(s) = &spec {
        s.validate()?;
    }
    let videos = dataset::list_videos(&args.input)?;
    for v in &videos {
        dataset::validate_video(v)?;
    }
    if args.common.dry_run {
        println!("dry run: {} videos, config valid", videos.len());
        return Ok(());
    }
    let out_root = output_dir(&args.common, cfg.output.join("degraded"));
    let codec = codec_mode(cfg.degradation.codec);
    let entries = parallel_map(&videos, args.common.workers, |i, dir| {
        let id = video_id(dir);
        let (hq, _) = read_video(dir).map_err(|e| tag(&id, e))?;
        // One generator per video index keeps results independent of worker count.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut meta = VideoMeta::for_video(&hq, format!("degrade:{}", dir.display()));
        let mut video = hq;
        let mut entry = DegradeEntry {
            id: id.clone(),
            degradation: None,
            flicker_fraction: None,
        };
        if !args.flicker_only {
            let params = sample_params(&mut rng, &cfg.degradation.ranges)?;
            let d = degrade_video(&video, &params, &codec).map_err(|e| tag(&id, e))?;
            video = d.video;
            entry.degradation = Some(d.record.clone());
            meta.degradation = Some(d.record);
        }
        if let Some(s) = &spec {
            let s = FlickerSpec {
                seed: s.seed ^ rng.random::<u64>(),
                ..s.clone()
            };
            let f = flicker(&video, &s).map_err(|e| tag(&id, e))?;
            let sel = &f.record.selected;
            entry.flicker_fraction = Some(sel.iter().filter(|&&b| b).count() as f64 / sel.len() as f64);
            video = f.video;
            meta.flicker = Some(f.record);
        }
        write_video(&out_root.join(&id), &video, &meta)?;
        Ok(entry)
    })?;
    let selected: f64 = entries.iter().filter_map(|e| e.flicker_fraction).sum();
    let mut manifest = RunManifest::new("degrade");
    manifest.config_hash = Some(cfg.hash()?);
    manifest.seed = Some(cfg.seed);
    manifest.inputs.insert("input".into(), args.input.clone());
    if let Some(s) = &spec {
        manifest.flags.insert("flicker".into(), format!("{:?}", s.kind).to_lowercase());
        manifest.flags.insert("p".into(), s.p.to_string());
    }
    manifest.flags.insert("flicker_only".into(), args.flicker_only.to_string());
    write_json(&out_root.join("degrade_report.json"), &entries)?;
    if spec.is_some() {
        log::info!("mean flicker fraction {:.3}", selected / entries.len() as f64);
    }
    manifest.write(&out_root)
}

fn tag(id: &str, e: Error) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("video {id}: {m}")),
        Error::External(m) => Error::External(format!("video {id}: {m}")),
        Error::Shape(m) => Error::Shape(format!("video {id}: {m}")),
        other => other,
    }
}

/// Text detections recorded per frame in `text.json`.
#[derive(Debug, Clone, Default, Deserialize)]
struct RecordedOcr {
    frames: Vec<Vec<TextRegion>>,
    #[serde(skip)]
    lookup: Vec<(Vec<f32>, usize)>,
}

impl RecordedOcr {
    /// Frames are matched by content, since the filter sees cropped frames only.
    fn bind(mut self, cropped: &VideoTensor) -> Self {
        self.lookup = (0..cropped.len())
            .map(|t| (cropped.frame(t).iter().copied().collect(), t))
            .collect();
        self
    }
}

impl OcrClient for RecordedOcr {
    fn detect(&self, frame: ArrayView3<'_, f32>) -> Result<Vec<TextRegion>> {
        let key: Vec<f32> = frame.iter().copied().collect();
        let t = self
            .lookup
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, t)| *t)
            .ok_or_else(|| Error::External("frame not found in recorded text detections".into()))?;
        Ok(self.frames.get(t).cloned().unwrap_or_default())
    }
}

fn curate_cmd(args: &CurateArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p, &args.common, None, false)?,
        None => RunConfig::default(),
    };
    if args.min_motion.is_some() {
        cfg.curation.min_motion = args.min_motion;
    }
    let videos = dataset::list_videos(&args.input)?;
    for v in &videos {
        dataset::validate_video(v)?;
        if !v.join("faces.json").is_file() {
            return Err(Error::Data(format!("video {}: missing faces.json", video_id(v))));
        }
    }
    if args.common.dry_run {
        println!("dry run: {} videos with face records", videos.len());
        return Ok(());
    }
    let out_root = output_dir(&args.common, cfg.output.join("curated"));
    let reports: Vec<CurationReport> = parallel_map(&videos, args.common.workers, |_, dir| {
        let id = video_id(dir);
        let (video, meta) = read_video(dir).map_err(|e| tag(&id, e))?;
        let faces: FaceFixture = serde_json::from_str(&std::fs::read_to_string(dir.join("faces.json"))?)
            .map_err(|e| Error::Data(format!("video {id}: faces.json: {e}")))?;
        if faces.boxes.len() != video.len() || faces.landmarks.len() != video.len() {
            return Err(Error::Data(format!(
                "video {id}: faces.json covers {}/{} frames, video has {}",
                faces.boxes.len(),
                faces.landmarks.len(),
                video.len()
            )));
        }
        let text_path = dir.join("text.json");
        let (report, kept) = if text_path.is_file() {
            let rec: RecordedOcr = serde_json::from_str(&std::fs::read_to_string(&text_path)?)
                .map_err(|e| Error::Data(format!("video {id}: text.json: {e}")))?;
            // The text stage runs on the crop, so bind the detections to cropped frames.
            let crop = crate::curator::face_crop(&video, &faces.boxes, cfg.curation.crop_margin, cfg.curation.target_size);
            let ocr = match &crop {
                Ok(c) => rec.bind(&c.video),
                Err(_) => rec,
            };
            curate_clip(&id, &video, &faces, &ocr, &cfg.curation)
        } else {
            curate_clip(&id, &video, &faces, &NoTextOcr, &cfg.curation)
        };
        if let Some(clip) = kept {
            let mut m = VideoMeta::for_video(&clip, format!("curate:{}", dir.display()));
            if let Some(src) = meta {
                m.frame_rate = src.frame_rate;
            }
            write_video(&out_root.join(&id), &clip, &m)?;
        }
        Ok(report)
    })?;
    #[derive(Serialize)]
    struct Out<'a> {
        counts: crate::curator::StageCounts,
        clips: &'a [CurationReport],
    }
    let counts = stage_counts(&reports);
    write_json(&out_root.join("curation_report.json"), &Out { counts, clips: &reports })?;
    println!(
        "input {} -> A {} -> B {} -> C {} -> kept {}",
        counts.input, counts.after_a, counts.after_b, counts.after_c, counts.kept
    );
    let mut manifest = RunManifest::new("curate");
    manifest.config_hash = Some(cfg.hash()?);
    manifest.inputs.insert("input".into(), args.input.clone());
    if let Some(m) = cfg.curation.min_motion {
        manifest.flags.insert("min_motion".into(), m.to_string());
    }
    manifest.write(&out_root)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub clips: BTreeMap<String, MetricReport>,
    pub aggregate: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub utilization: Option<[f64; 2]>,
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let restored = dataset::list_videos(&args.restored)?;
    let mut pairs = Vec::new();
    for r in &restored {
        let id = video_id(r);
        let reference = args.reference.join(&id);
        if !reference.is_dir() {
            return Err(Error::Data(format!("video {id}: no reference under {}", args.reference.display())));
        }
        dataset::validate_video(r)?;
        dataset::validate_video(&reference)?;
        pairs.push((id, r.clone(), reference));
    }
    if let Some(p) = &args.stage1 {
        checkpoint::read_manifest(&std::fs::read(p).map_err(|_| Error::Checkpoint {
            path: p.clone(),
            msg: "no such checkpoint file".into(),
        })?, p)?;
    }
    if args.common.dry_run {
        println!("dry run: {} restored/reference pairs", pairs.len());
        return Ok(());
    }
    let stage1 = match &args.stage1 {
        Some(p) => Some(checkpoint::load_stage1(p, None, &[], &Device::Cpu, DTYPE)?.1),
        None => None,
    };
    let reports = parallel_map(&pairs, args.common.workers, |_, (id, r, reference)| {
        let (a, _) = read_video(r).map_err(|e| tag(id, e))?;
        let (b, _) = read_video(reference).map_err(|e| tag(id, e))?;
        Ok(evaluate_pair(&a, &b, None, &[]).map_err(|e| tag(id, e))?)
    })?;
    let mut clips = BTreeMap::new();
    let mut usage = None;
    for ((id, r, _), mut rep) in pairs.iter().zip(reports) {
        if let Some(m) = &stage1 {
            let (v, _) = read_video(r)?;
            let (s, t) = m.indices(&v).map_err(|e| tag(id, e))?;
            let u = usage.get_or_insert_with(|| CodebookUsage::new(m.config.codebook_spatial, m.config.codebook_temporal));
            u.add(&s, &t)?;
            let (us, ut) = crate::evalkit::codebook_report(&s, &t, m.config.codebook_spatial, m.config.codebook_temporal)?
                .utilization();
            rep.utilization_spatial = Some(us);
            rep.utilization_temporal = Some(ut);
        }
        clips.insert(id.clone(), rep);
    }
    let all: Vec<MetricReport> = clips.values().cloned().collect();
    let out = EvaluationOutput {
        aggregate: aggregate(&all),
        clips,
        utilization: usage.map(|u| {
            let (a, b) = u.utilization();
            [a, b]
        }),
    };
    let dir = output_dir(&args.common, PathBuf::from("runs/evaluate"));
    write_json(&dir.join("metrics.json"), &out)?;
    for (k, v) in &out.aggregate {
        println!("{k}\t{v:.6}");
    }
    let mut manifest = RunManifest::new("evaluate");
    manifest.inputs.insert("restored".into(), args.restored.clone());
    manifest.inputs.insert("reference".into(), args.reference.clone());
    if let Some(p) = &args.stage1 {
        manifest.hash_checkpoint(p)?;
    }
    manifest.write(&dir)
}

fn profile_cmd(args: &ProfileArgs) -> Result<()> {
    let (video, _) = read_video(&args.input)?;
    let p = temporal_profile(&video, args.column)?;
    let (h, t, _) = p.image.dim();
    let img = image::RgbImage::from_fn(t as u32, h as u32, |x, y| {
        let px = |c| (p.image[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save(&args.output)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::External("x".into())), 4);
    }

    #[test]
    fn batcher_visits_every_clip_each_epoch() {
        let mut b = Batcher::new(5, 1);
        let mut seen: Vec<usize> = b.next(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let again: Vec<usize> = Batcher::new(5, 1).next(12);
        assert_eq!(again, Batcher::new(5, 1).next(12));
    }
}
