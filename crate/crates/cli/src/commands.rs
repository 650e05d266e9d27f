use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use notegate::deform::{deform_track, track_seed, DeformationConfig};
use notegate::grid::{FrequencyGrid, TimeGrid};
use notegate::label::{rasterize, LabelMatrix};
use notegate::ngmx::NgmxArray;
use notegate::nn::{detector_grad_check, linear_head_grad_check, ArchConfig, Checkpoint, ErrorDetector};
use notegate::notes::NoteTrack;
use notegate::pipeline::downstream::{EvalTrack, TrainingTrack};
use notegate::pipeline::training::{select_positives, track_features};
use notegate::pipeline::{
    cleanse, dataset_report, downstream_experiment, load_corpus, score_track, split_track_ids, synth_dataset, train_detector,
    write_corpus, AnnotatedTrack, CleanseResult, DetectionStats, FrameScoreTrack,
};
use notegate::select::{Profile, SalienceMatrix};
use notegate::spectral::{cqt, stack_channels, SpectrogramStack, Waveform};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::manifest::{self, files_under, ManifestInfo};
use crate::usage;

/// Error detection and cleansing for time-varying note annotations.
#[derive(Debug, Parser)]
#[command(name = "notegate", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random stage (overrides the seeds in --config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-track stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// JSON file overriding any subset of the defaults.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize a note CSV into a label matrix (NGMX uint8).
    Rasterize(RasterizeArgs),
    /// Compute the compressed CQT input stack of a WAV file (NGMX float32).
    Cqt(CqtArgs),
    /// Corrupt a note CSV with the deformation function.
    Deform(DeformArgs),
    /// Select likely-correct frames (agreement and silence).
    Select(SelectArgs),
    /// Train the error detector on a corpus.
    Train(TrainArgs),
    /// Score every frame with a trained detector.
    Score(ScoreArgs),
    /// Score and cleanse: filtered index, weights and error rates.
    Filter(FilterArgs),
    /// Aggregate cleanse results into a dataset report.
    Report(ReportArgs),
    /// Generate a planted-error corpus.
    Synth(SynthArgs),
    /// Planted-error detection and the downstream experiment on a corpus.
    Eval(EvalArgs),
    /// Finite-difference check of the detector's gradients.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    pub notes: PathBuf,
    /// Frame count; alternatively taken from --audio.
    #[arg(long)]
    pub n_frames: Option<usize>,
    #[arg(long)]
    pub audio: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CqtArgs {
    pub audio: PathBuf,
    /// Separated vocal stem; the mixture is duplicated when absent.
    #[arg(long)]
    pub vocal: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeformArgs {
    pub notes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the deformation records (JSON).
    #[arg(long)]
    pub records: Option<PathBuf>,
}

/// A corpus directory, or one track given as feature and label arrays.
#[derive(Debug, Args)]
pub struct TrackSource {
    #[arg(long, conflicts_with_all = ["features", "labels"])]
    pub corpus: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value = "track")]
    pub track_id: String,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub source: TrackSource,
    /// External salience matrix (single-track mode).
    #[arg(long, requires = "features")]
    pub salience: Option<PathBuf>,
    /// Restrict agreement selection to one profile.
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProfileArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub source: TrackSource,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub source: TrackSource,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory of `filter`.
    #[arg(long)]
    pub cleanse: PathBuf,
    /// JSON object mapping track id to an external per-track score.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub tracks: Option<usize>,
    /// Track length in seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Keep the annotations clean (a control corpus).
    #[arg(long)]
    pub no_corruption: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Parameters sampled per layer family.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: PathBuf,
}

struct Ctx {
    cfg: PipelineConfig,
    seed: Option<u64>,
    threads: Option<usize>,
    format: Format,
}

struct Outcome {
    summary: Value,
    text: String,
}

impl Outcome {
    fn new(summary: Value, text: impl Into<String>) -> Self {
        Self { summary, text: text.into() }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.apply_seed(seed);
    }
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        cfg,
        seed: cli.global.seed,
        threads: cli.global.threads,
        format: cli.global.format,
    };
    let outcome = match &cli.command {
        Command::Rasterize(a) => rasterize_cmd(&ctx, a),
        Command::Cqt(a) => cqt_cmd(&ctx, a),
        Command::Deform(a) => deform_cmd(&ctx, a),
        Command::Select(a) => select_cmd(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Score(a) => score_cmd(&ctx, a),
        Command::Filter(a) => filter_cmd(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
        Command::Synth(a) => synth_cmd(&ctx, a),
        Command::Eval(a) => eval_cmd(&ctx, a),
        Command::GradCheck(a) => grad_check_cmd(&ctx, a),
    }?;
    match ctx.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&outcome.summary)?),
        Format::Text => println!("{}", outcome.text.trim_end()),
    }
    Ok(())
}

impl Ctx {
    fn manifest(&self, command: &str, dir: &Path, inputs: &[&Path], outputs: &[PathBuf]) -> anyhow::Result<()> {
        let info = ManifestInfo {
            command,
            seed: self.seed,
            threads: self.threads,
            config: &self.cfg,
        };
        manifest::write(dir, &info, inputs, outputs)?;
        Ok(())
    }
}

/// Parent directory of an output file, created if needed.
fn file_dir(out: &Path) -> anyhow::Result<PathBuf> {
    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "track".into());
    name.split('.').next().unwrap_or("track").to_string()
}

fn read_notes(path: &Path) -> anyhow::Result<NoteTrack> {
    NoteTrack::read_csv(stem(path), path).with_context(|| format!("reading notes {}", path.display()))
}

fn rasterize_cmd(ctx: &Ctx, a: &RasterizeArgs) -> anyhow::Result<Outcome> {
    let (tg, fg) = (ctx.cfg.time_grid, ctx.cfg.frequency_grid);
    let n_frames = match (a.n_frames, &a.audio) {
        (Some(n), None) => n,
        (None, Some(audio)) => tg.frames_for_samples(Waveform::read_wav(audio)?.samples.len()),
        (Some(_), Some(_)) => return Err(usage("give either --n-frames or --audio, not both")),
        (None, None) => return Err(usage("rasterize needs --n-frames or --audio to size the label matrix")),
    };
    let track = read_notes(&a.notes)?;
    let r = rasterize(&track, &tg, &fg, n_frames)?;
    NgmxArray::from(&r.labels).write(&a.out)?;
    let dir = file_dir(&a.out)?;
    let mut inputs = vec![a.notes.as_path()];
    inputs.extend(a.audio.as_deref());
    ctx.manifest("rasterize", &dir, &inputs, std::slice::from_ref(&a.out))?;
    let voiced = (0..n_frames).filter(|&i| r.labels.is_voiced(i)).count();
    Ok(Outcome::new(
        json!({"n_frames": n_frames, "voiced_frames": voiced, "skipped_notes": r.skipped.len()}),
        format!("{n_frames} frames, {voiced} voiced, {} note(s) outside the grid", r.skipped.len()),
    ))
}

fn cqt_cmd(ctx: &Ctx, a: &CqtArgs) -> anyhow::Result<Outcome> {
    let (tg, fg) = (ctx.cfg.time_grid, ctx.cfg.frequency_grid);
    let mix = cqt(&Waveform::read_wav(&a.audio)?, &fg, &tg)?;
    let vocal = a.vocal.as_ref().map(|v| Waveform::read_wav(v).map_err(anyhow::Error::from).and_then(|w| Ok(cqt(&w, &fg, &tg)?))).transpose()?;
    let stack = stack_channels(&mix, vocal.as_ref())?;
    NgmxArray::from(&stack).write(&a.out)?;
    let dir = file_dir(&a.out)?;
    let mut inputs = vec![a.audio.as_path()];
    inputs.extend(a.vocal.as_deref());
    ctx.manifest("cqt", &dir, &inputs, std::slice::from_ref(&a.out))?;
    Ok(Outcome::new(
        json!({"n_frames": stack.n_frames(), "n_bins": stack.n_bins(), "vocal_is_proxy": stack.vocal_is_proxy}),
        format!(
            "{} frames x {} bins{}",
            stack.n_frames(),
            stack.n_bins(),
            if stack.vocal_is_proxy { " (no vocal stem: mixture duplicated)" } else { "" }
        ),
    ))
}

fn deform_cmd(ctx: &Ctx, a: &DeformArgs) -> anyhow::Result<Outcome> {
    let track = read_notes(&a.notes)?;
    let cfg: DeformationConfig = ctx.cfg.deformation.clone();
    let d = deform_track(&track, &cfg.clone().with_seed(track_seed(cfg.rng_seed, &track.track_id)))?;
    let dir = file_dir(&a.out)?;
    d.track.write_csv(&a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(r) = &a.records {
        write_json(r, &d.records)?;
        outputs.push(r.clone());
    }
    ctx.manifest("deform", &dir, &[a.notes.as_path()], &outputs)?;
    Ok(Outcome::new(
        json!({"notes_in": track.len(), "notes_out": d.track.len(), "deformations": d.records.len()}),
        format!("{} note(s) in, {} out, {} deformation(s)", track.len(), d.track.len(), d.records.len()),
    ))
}

/// One track with its features and annotation as loaded from disk.
struct TrackInput {
    track: AnnotatedTrack,
    clean: Option<NoteTrack>,
    mask: Option<Vec<usize>>,
}

struct Loaded {
    tracks: Vec<TrackInput>,
    tg: TimeGrid,
    fg: FrequencyGrid,
    inputs: Vec<PathBuf>,
}

fn load_source(ctx: &Ctx, src: &TrackSource) -> anyhow::Result<Loaded> {
    if let Some(dir) = &src.corpus {
        let (index, loaded) = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
        let (tg, fg) = (index.time_grid, index.frequency_grid);
        let tracks = loaded
            .into_par_iter()
            .map(|t| {
                let stack = track_features(&t.waveform, &tg, &fg)?;
                Ok(TrackInput {
                    track: AnnotatedTrack::new(stack, t.notes, &tg, &fg)?,
                    clean: t.clean,
                    mask: t.mask,
                })
            })
            .collect::<notegate::Result<Vec<_>>>()?;
        return Ok(Loaded {
            tracks,
            tg,
            fg,
            inputs: vec![dir.clone()],
        });
    }
    let (Some(features), Some(labels)) = (&src.features, &src.labels) else {
        return Err(usage("give --corpus, or --features together with --labels"));
    };
    let stack = SpectrogramStack::from_ngmx(NgmxArray::read(features)?, false)?;
    let label_matrix = LabelMatrix::try_from(NgmxArray::read(labels)?)?;
    let track = AnnotatedTrack {
        track_id: src.track_id.clone(),
        stack,
        notes: NoteTrack::new(src.track_id.clone(), Vec::new()),
        labels: label_matrix,
        salience: None,
    };
    Ok(Loaded {
        tracks: vec![TrackInput {
            track,
            clean: None,
            mask: None,
        }],
        tg: ctx.cfg.time_grid,
        fg: ctx.cfg.frequency_grid,
        inputs: vec![features.clone(), labels.clone()],
    })
}

fn input_refs(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}

fn out_dir(out: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.to_path_buf())
}

#[derive(Serialize)]
struct TrackSelection<'a> {
    track_id: &'a str,
    agreement: Vec<usize>,
    silence: Vec<usize>,
}

fn select_cmd(ctx: &Ctx, a: &SelectArgs) -> anyhow::Result<Outcome> {
    let mut loaded = load_source(ctx, &a.source)?;
    if let Some(s) = &a.salience {
        let sal = SalienceMatrix::from_ngmx(NgmxArray::read(s)?)?;
        loaded.tracks[0].track.salience = Some(sal);
        loaded.inputs.push(s.clone());
    }
    let mut ex = ctx.cfg.detector.examples.clone();
    if let Some(p) = a.profile {
        ex.profiles = vec![match p {
            ProfileArg::Train => Profile::Train,
            ProfileArg::Test => Profile::Test,
        }];
    }
    let picks = loaded.tracks.par_iter().map(|t| select_positives(&t.track, &ex)).collect::<notegate::Result<Vec<_>>>()?;
    let selections: Vec<TrackSelection> = loaded
        .tracks
        .iter()
        .zip(picks)
        .map(|(t, (agreement, silence))| TrackSelection {
            track_id: &t.track.track_id,
            agreement,
            silence,
        })
        .collect();
    let dir = out_dir(&a.out)?;
    let path = dir.join("selection.json");
    write_json(&path, &selections)?;
    ctx.manifest("select", &dir, &input_refs(&loaded.inputs), &[path])?;
    let n_agree: usize = selections.iter().map(|s| s.agreement.len()).sum();
    let n_silence: usize = selections.iter().map(|s| s.silence.len()).sum();
    Ok(Outcome::new(
        json!({"tracks": selections.len(), "agreement_frames": n_agree, "silence_frames": n_silence}),
        format!("{} track(s): {n_agree} agreement and {n_silence} silence frame(s) selected", selections.len()),
    ))
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<Outcome> {
    let loaded = load_source(
        ctx,
        &TrackSource {
            corpus: Some(a.corpus.clone()),
            features: None,
            labels: None,
            track_id: String::new(),
        },
    )?;
    let tracks: Vec<AnnotatedTrack> = loaded.tracks.into_iter().map(|t| t.track).collect();
    let run = train_detector(&tracks, &ctx.cfg.detector, &loaded.tg, &loaded.fg)?;
    let dir = out_dir(&a.out)?;
    let model = dir.join("model.ngck");
    run.outcome.checkpoint.write(&model)?;
    let report = dir.join("training.json");
    let best = &run.outcome.history[run.outcome.best_epoch];
    write_json(
        &report,
        &json!({
            "best_epoch": run.outcome.best_epoch,
            "history": run.outcome.history,
            "holdout_tracks": run.holdout_tracks,
            "n_train": run.n_train,
            "n_holdout": run.n_holdout,
            "examples": run.counts,
        }),
    )?;
    ctx.manifest("train", &dir, &input_refs(&loaded.inputs), &[model, report])?;
    Ok(Outcome::new(
        json!({"best_epoch": run.outcome.best_epoch, "holdout_accuracy": best.holdout_accuracy, "holdout_balanced_accuracy": best.holdout_balanced_accuracy}),
        format!(
            "trained on {} examples; best epoch {} with holdout accuracy {:.4} (balanced {:.4})",
            run.n_train, run.outcome.best_epoch, best.holdout_accuracy, best.holdout_balanced_accuracy
        ),
    ))
}

fn load_model(path: &Path) -> anyhow::Result<ErrorDetector<f32>> {
    Ok(Checkpoint::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?.to_detector()?)
}

fn context_of(model: &ErrorDetector<f32>) -> anyhow::Result<usize> {
    if model.arch.width.is_multiple_of(2) {
        bail!("checkpoint patch width {} is not odd", model.arch.width);
    }
    Ok(model.arch.width / 2)
}

fn score_all(model: &ErrorDetector<f32>, tracks: &[TrackInput]) -> anyhow::Result<Vec<FrameScoreTrack>> {
    let context = context_of(model)?;
    Ok(tracks
        .par_iter()
        .map(|t| score_track(model, &t.track.track_id, &t.track.stack, &t.track.labels, context))
        .collect::<notegate::Result<Vec<_>>>()?)
}

fn write_vector(path: &Path, v: &[f32]) -> anyhow::Result<()> {
    NgmxArray::f32(vec![v.len()], v.to_vec())?.write(path)?;
    Ok(())
}

fn score_cmd(ctx: &Ctx, a: &ScoreArgs) -> anyhow::Result<Outcome> {
    let loaded = load_source(ctx, &a.source)?;
    let model = load_model(&a.checkpoint)?;
    let scores = score_all(&model, &loaded.tracks)?;
    let dir = out_dir(&a.out)?;
    let mut outputs = Vec::new();
    for s in &scores {
        let p = dir.join(format!("{}.scores.ngmx", s.track_id));
        write_vector(&p, &s.scores)?;
        outputs.push(p);
    }
    let mut inputs = input_refs(&loaded.inputs);
    inputs.push(&a.checkpoint);
    ctx.manifest("score", &dir, &inputs, &outputs)?;
    let frames: usize = scores.iter().map(|s| s.scores.len()).sum();
    Ok(Outcome::new(
        json!({"tracks": scores.len(), "frames": frames}),
        format!("scored {frames} frame(s) in {} track(s)", scores.len()),
    ))
}

pub const CLEANSE_FILE: &str = "cleanse.json";

fn filter_cmd(ctx: &Ctx, a: &FilterArgs) -> anyhow::Result<Outcome> {
    let threshold = a.threshold.unwrap_or(ctx.cfg.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(usage(format!("--threshold {threshold} must lie in (0, 1)")));
    }
    let loaded = load_source(ctx, &a.source)?;
    let model = load_model(&a.checkpoint)?;
    let scores = score_all(&model, &loaded.tracks)?;
    let results = scores.iter().map(|s| cleanse(s, threshold)).collect::<notegate::Result<Vec<_>>>()?;
    let dir = out_dir(&a.out)?;
    let mut outputs = Vec::new();
    for (s, r) in scores.iter().zip(&results) {
        let id = &s.track_id;
        let paths = [
            dir.join(format!("{id}.scores.ngmx")),
            dir.join(format!("{id}.weights.ngmx")),
            dir.join(format!("{id}.filtered.json")),
        ];
        write_vector(&paths[0], &s.scores)?;
        write_vector(&paths[1], &r.weights)?;
        write_json(&paths[2], &r.filtered_index)?;
        outputs.extend(paths);
    }
    let summary = dir.join(CLEANSE_FILE);
    write_json(&summary, &results)?;
    outputs.push(summary);
    let mut inputs = input_refs(&loaded.inputs);
    inputs.push(&a.checkpoint);
    ctx.manifest("filter", &dir, &inputs, &outputs)?;
    let mean = results.iter().map(|r| r.error_rate).sum::<f64>() / results.len() as f64;
    Ok(Outcome::new(
        json!({"tracks": results.len(), "threshold": threshold, "mean_error_rate": mean}),
        format!("{} track(s) cleansed at threshold {threshold}; mean error rate {:.2}%", results.len(), 100.0 * mean),
    ))
}

fn report_cmd(ctx: &Ctx, a: &ReportArgs) -> anyhow::Result<Outcome> {
    let path = a.cleanse.join(CLEANSE_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let results: Vec<CleanseResult> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let external = match &a.external {
        None => None,
        Some(p) => {
            let map: BTreeMap<String, f64> = serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?;
            let v = results
                .iter()
                .map(|r| map.get(&r.track_id).copied().with_context(|| format!("no external score for track `{}`", r.track_id)))
                .collect::<anyhow::Result<Vec<f64>>>()?;
            Some(v)
        }
    };
    let report = dataset_report(&results, external.as_deref())?;
    let dir = out_dir(&a.out)?;
    let out = dir.join("report.json");
    write_json(&out, &report)?;
    let mut inputs = vec![path.as_path()];
    inputs.extend(a.external.as_deref());
    ctx.manifest("report", &dir, &inputs, &[out])?;

    let mut text = format!(
        "{} track(s); error rate mean {:.2}% std {:.2}%\n",
        report.per_track.len(),
        100.0 * report.mean,
        100.0 * report.std
    );
    for b in report.histogram.iter().filter(|b| b.count > 0) {
        text.push_str(&format!("  {:>5.1}-{:<5.1}% {:>4} {}\n", b.lo, b.hi, b.count, "#".repeat(b.count.min(60))));
    }
    if let Some(r) = report.pearson_r {
        text.push_str(&format!("Pearson r with external scores: {r:.4}\n"));
    }
    if !report.high_error_tracks.is_empty() {
        text.push_str(&format!("high-error tracks: {}\n", report.high_error_tracks.join(", ")));
    }
    Ok(Outcome::new(serde_json::to_value(&report)?, text))
}

fn synth_cmd(ctx: &Ctx, a: &SynthArgs) -> anyhow::Result<Outcome> {
    let mut cfg = ctx.cfg.synth.clone();
    if let Some(n) = a.tracks {
        cfg.n_tracks = n;
    }
    if let Some(d) = a.duration {
        cfg.track_sec = d;
    }
    if a.no_corruption {
        cfg.deformation = DeformationConfig {
            rng_seed: cfg.deformation.rng_seed,
            ..DeformationConfig::identity()
        };
    }
    if cfg.n_tracks == 0 {
        return Err(usage("--tracks must be positive"));
    }
    let (tg, fg) = (ctx.cfg.time_grid, ctx.cfg.frequency_grid);
    let corpus = synth_dataset(&cfg, &tg, &fg)?;
    let dir = out_dir(&a.out)?;
    write_corpus(&dir, &corpus, &cfg, &tg, &fg)?;
    let outputs = files_under(&dir)?;
    ctx.manifest("synth", &dir, &[], &outputs)?;
    let errors: usize = corpus.iter().map(|t| t.mask.len()).sum();
    let frames: usize = corpus.iter().map(|t| t.n_frames).sum();
    Ok(Outcome::new(
        json!({"tracks": corpus.len(), "frames": frames, "error_frames": errors}),
        format!("{} track(s), {frames} frames, {errors} planted error frame(s)", corpus.len()),
    ))
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs) -> anyhow::Result<Outcome> {
    let loaded = load_source(
        ctx,
        &TrackSource {
            corpus: Some(a.corpus.clone()),
            features: None,
            labels: None,
            track_id: String::new(),
        },
    )?;
    let model = load_model(&a.checkpoint)?;
    let scores = score_all(&model, &loaded.tracks)?;
    let threshold = ctx.cfg.threshold;

    let mut detection = None;
    if loaded.tracks.iter().all(|t| t.mask.is_some()) {
        let mut stats = DetectionStats::default();
        for (t, s) in loaded.tracks.iter().zip(&scores) {
            stats.add(s, t.mask.as_deref().unwrap_or_default(), threshold)?;
        }
        detection = Some(json!({"threshold": threshold, "counts": stats, "balanced_accuracy": stats.balanced_accuracy()}));
    }

    let references = loaded
        .tracks
        .iter()
        .map(|t| {
            let clean = t.clean.as_ref().with_context(|| format!("track `{}` has no clean reference notes", t.track.track_id))?;
            Ok(rasterize(clean, &loaded.tg, &loaded.fg, t.track.stack.n_frames())?.labels)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let ids: Vec<String> = loaded.tracks.iter().map(|t| t.track.track_id.clone()).collect();
    let (_, test_ids) = split_track_ids(&ids, ctx.cfg.eval_test_fraction, ctx.cfg.downstream.seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (k, t) in loaded.tracks.iter().enumerate() {
        if test_ids.contains(&t.track.track_id) {
            test.push(EvalTrack {
                track_id: &t.track.track_id,
                stack: &t.track.stack,
                reference: &references[k],
            });
        } else {
            train.push(TrainingTrack {
                stack: &t.track.stack,
                labels: &t.track.labels,
                scores: &scores[k].scores,
            });
        }
    }
    let downstream = downstream_experiment(&train, &test, &loaded.fg, &ctx.cfg.downstream)?;

    let dir = out_dir(&a.out)?;
    let mut outputs = Vec::new();
    let dpath = dir.join("downstream.json");
    write_json(&dpath, &downstream)?;
    outputs.push(dpath);
    if let Some(d) = &detection {
        let p = dir.join("detection.json");
        write_json(&p, d)?;
        outputs.push(p);
    }
    let mut inputs = input_refs(&loaded.inputs);
    inputs.push(&a.checkpoint);
    ctx.manifest("eval", &dir, &inputs, &outputs)?;

    let mut text = String::new();
    if let Some(d) = &detection {
        text.push_str(&format!("planted-error balanced accuracy: {:.4}\n", d["balanced_accuracy"].as_f64().unwrap_or(f64::NAN)));
    }
    for c in &downstream.conditions {
        match &c.failure {
            Some(f) => text.push_str(&format!("{:<9} failed: {f}\n", c.condition.name())),
            None => text.push_str(&format!(
                "{:<9} RPA {:.4}  OA {:.4}  ({} training frames)\n",
                c.condition.name(),
                c.mean_rpa.unwrap_or(f64::NAN),
                c.mean_oa.unwrap_or(f64::NAN),
                c.train_frames
            )),
        }
    }
    for c in &downstream.comparisons {
        let p = c.rpa.as_ref().and_then(|t| t.p);
        text.push_str(&format!(
            "{} vs {}: paired t p = {}\n",
            c.a.name(),
            c.b.name(),
            p.map_or_else(|| "n/a".to_string(), |p| format!("{p:.3e}"))
        ));
    }
    Ok(Outcome::new(json!({"detection": detection, "downstream": downstream}), text))
}

fn grad_check_cmd(ctx: &Ctx, a: &GradCheckArgs) -> anyhow::Result<Outcome> {
    let mut cfg = ctx.cfg.grad_check.clone();
    if let Some(s) = a.samples {
        cfg.samples_per_family = s;
    }
    if let Some(h) = a.step {
        cfg.step = h;
    }
    if cfg.step.is_nan() || cfg.step <= 0.0 || cfg.samples_per_family == 0 || a.batch == 0 {
        return Err(usage("--step, --samples and --batch must be positive"));
    }
    let arch = ArchConfig {
        n_bins: ctx.cfg.frequency_grid.n_bins,
        width: 2 * ctx.cfg.detector.examples.context + 1,
        ..ctx.cfg.detector.arch.clone()
    };
    let full = detector_grad_check(&arch, a.batch, &cfg)?;
    let head = linear_head_grad_check(&cfg)?;
    let passes = full.passes(a.tolerance);
    let dir = out_dir(&a.out)?;
    let path = dir.join("gradcheck.json");
    write_json(&path, &json!({"tolerance": a.tolerance, "passes": passes, "detector": full, "linear_head": head}))?;
    ctx.manifest("grad-check", &dir, &[], &[path])?;
    let mut text = String::new();
    for f in &full.families {
        text.push_str(&format!(
            "{:<10} checked {:>4}  kinks skipped {:>3}  max rel error {:.3e} ({})\n",
            f.family, f.checked, f.excluded_kinks, f.max_rel_error, f.worst_param
        ));
    }
    text.push_str(&format!("linear head max rel error {:.3e}\n", head.max_rel_error));
    text.push_str(&format!("{} (max {:.3e} vs tolerance {:.0e})\n", if passes { "PASS" } else { "FAIL" }, full.max_rel_error, a.tolerance));
    Ok(Outcome::new(json!({"passes": passes, "max_rel_error": full.max_rel_error}), text))
}
