use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use super::checkpoint::Checkpoint;
use super::config::{parse_config, RunConfig};
use crate::error::{FameError, Result};
use crate::evaluation::{ablate, evaluate_clips, grad_cam, standard_variants};
use crate::model::{attribute, estimate_flops, model_gradcheck, FameConfig, FameModel, ModelGradCheck};
use crate::synthdata::{
    generate_dataset, read_clip_dir, render_clip, write_bytes, Clip, DatasetManifest, FamilyRegistry, Split, MANIFEST_FILE,
};
use crate::tensor::{Precision, Scalar};
use crate::training::{class_weights, clip_logits, train};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Parser, Debug)]
#[command(name = "fame", version, about = "Deepfake model attribution with spatio-temporal attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Write metrics and ROC curves for a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Print the predicted class and probabilities for one clip.
    Attribute(AttributeArgs),
    /// Write Grad-CAM heatmaps for one clip.
    Gradcam(GradcamArgs),
    /// Train the standard ablation variants and tabulate their accuracy.
    Ablate(AblateArgs),
    /// Finite-difference check of the full model on the toy config.
    Gradcheck(GradcheckArgs),
    /// Parameter count, FLOPs estimate and per-clip inference time.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// Fractions at none,hq,lq compression.
    #[arg(long)]
    mix: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttributeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frame_000.ppm, frame_001.ppm, ...
    #[arg(long)]
    clip: PathBuf,
}

#[derive(Args, Debug)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip: PathBuf,
    #[arg(long = "class")]
    target: usize,
    #[arg(long)]
    out: PathBuf,
    /// Resample heatmaps to the model input size.
    #[arg(long)]
    upscale: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to time on; without it, clips are synthesized to match the model.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    clips: usize,
}

macro_rules! by_precision {
    ($p:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $p {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// Runs the CLI and returns the process exit code: 0 success, 1 usage,
/// 2 config, 3 data, 4 numerical failure.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Attribute(a) => attribute_cmd(a, out),
        Command::Gradcam(a) => gradcam_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| FameError::io(Path::new("<stdout>"), e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| FameError::io(p, e))?),
    }
}

fn require(path: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    path.ok_or_else(|| FameError::Config(format!("missing --{flag} (or {key} in the config)")))
}

fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    DatasetManifest::read(&root.join(MANIFEST_FILE))
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    let overrides = [
        ("data.classes", a.classes.map(|v| v.to_string())),
        ("data.per_class", a.per_class.map(|v| v.to_string())),
        ("data.frames", a.frames.map(|v| v.to_string())),
        ("data.size", a.size.map(|v| v.to_string())),
        ("data.mix", a.mix),
        ("data.train_fraction", a.train_fraction.map(|v| v.to_string())),
        ("data.strength", a.strength.map(|v| v.to_string())),
        ("data.seed", a.seed.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.assign(key, &v)?;
        }
    }
    let root = require(a.out.or(cfg.paths.data.clone()), "out", "paths.data")?;
    let manifest = generate_dataset(&cfg.data)?;
    manifest.materialize(&root)?;
    emit(
        out,
        &format!(
            "wrote {} clips to {}\nseed = {}\nconfig = {}\n",
            manifest.records.len(),
            root.display(),
            cfg.data.seed,
            manifest.config_hash()
        ),
    )
}

fn artifact_header(seed: u64, config: &str, data: &str) -> Vec<String> {
    vec![format!("seed={seed}"), format!("config={config}"), format!("data={data}")]
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.assign("seed", &s.to_string())?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let data = require(a.data.or(cfg.paths.data.clone()), "data", "paths.data")?;
    let dest = require(a.out.or(cfg.paths.out.clone()), "out", "paths.out")?;
    let manifest = read_manifest(&data)?;
    cfg.data = manifest.spec.clone();
    cfg.validate()?;
    by_precision!(cfg.model.precision, train_run(&cfg, &manifest, &data, &dest, out))
}

fn train_run<S: Scalar>(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    data: &Path,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let train_clips = manifest.load_split(data, Split::Train)?;
    let test_clips = manifest.load_split(data, Split::Test)?;
    let weights = class_weights(manifest)?;
    let mut model = FameModel::<S>::build(&cfg.model, cfg.seed)?;
    let outcome = train(&mut model, &train_clips, &test_clips, &weights, &cfg.train)?;
    let hash = cfg.config_hash();
    let header = artifact_header(cfg.seed, &hash, &manifest.config_hash());
    Checkpoint::from_model(&model, cfg.seed, cfg.train.epochs, &hash, Some(&outcome.optim))
        .save(&dest.join(CHECKPOINT_FILE))?;
    write_bytes(&dest.join(HISTORY_FILE), outcome.history.to_tsv(&header).as_bytes())?;
    let run_cfg: String = header.iter().map(|h| format!("# {h}\n")).collect::<String>() + &cfg.to_text();
    write_bytes(&dest.join("run.cfg"), run_cfg.as_bytes())?;
    let last = outcome.history.epochs.last().expect("at least one epoch");
    emit(
        out,
        &format!(
            "trained {} epochs: train_loss = {:.4}, train_acc = {:.4}, test_acc = {}\ncheckpoint = {}\n",
            cfg.train.epochs,
            last.train_loss,
            last.train_acc,
            last.eval_acc.map_or("-".into(), |v| format!("{v:.4}")),
            dest.join(CHECKPOINT_FILE).display()
        ),
    )
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = read_manifest(&a.data)?;
    let split = Split::parse(&a.split).map_err(|e| FameError::Config(e.to_string()))?;
    by_precision!(ckpt.model.precision, eval_run(&ckpt, &manifest, &a.data, split, &a.out, out))
}

fn eval_run<S: Scalar>(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    data: &Path,
    split: Split,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let model = ckpt.to_model::<S>()?;
    check_data_matches(&model.config, manifest)?;
    let report = evaluate_clips(&model, &manifest.load_split(data, split)?)?;
    let mut header = artifact_header(ckpt.seed, &ckpt.config_hash, &manifest.config_hash());
    header.push(format!("split={}", split.as_str()));
    write_bytes(&dest.join(METRICS_FILE), report.to_text(&header).as_bytes())?;
    for (k, curve) in report.roc.curves.iter().enumerate() {
        if let Some(c) = curve {
            let mut h = header.clone();
            h.push(format!("class={k}"));
            write_bytes(&dest.join(format!("roc_class{k}.tsv")), c.to_tsv(&h).as_bytes())?;
        }
    }
    emit(
        out,
        &format!(
            "accuracy = {}\nmacro.f1 = {}\nmacro.auc = {}\nreport = {}\n",
            report.accuracy,
            report.macro_f1,
            report.macro_auc.map_or("undefined".into(), |v| v.to_string()),
            dest.join(METRICS_FILE).display()
        ),
    )
}

fn check_data_matches(model: &FameConfig, manifest: &DatasetManifest) -> Result<()> {
    if manifest.spec.classes != model.classes || manifest.spec.frames < model.frames {
        return Err(FameError::Data(format!(
            "dataset has {} classes and {} frames; model needs {} classes and {} frames",
            manifest.spec.classes, manifest.spec.frames, model.classes, model.frames
        )));
    }
    Ok(())
}

fn attribute_cmd(a: AttributeArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let clip = read_clip_dir(&a.clip)?;
    let logits = by_precision!(ckpt.model.precision, single_logits(&ckpt, &clip))?;
    let (class, probs) = attribute(&logits);
    let names = FamilyRegistry::default().names();
    let mut text = format!("class = {class}\n");
    if ckpt.model.classes == names.len() {
        text.push_str(&format!("family = {}\n", names[class]));
    }
    for (k, p) in probs.iter().enumerate() {
        text.push_str(&format!("prob.{k} = {p:.6}\n"));
    }
    emit(out, &text)
}

fn single_logits<S: Scalar>(ckpt: &Checkpoint, clip: &Clip) -> Result<Vec<f64>> {
    let model = ckpt.to_model::<S>()?;
    Ok(clip_logits(&model, std::slice::from_ref(clip), 1)?.remove(0))
}

fn gradcam_cmd(a: GradcamArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let clip = read_clip_dir(&a.clip)?;
    let maps = by_precision!(ckpt.model.precision, gradcam_maps(&ckpt, &clip, a.target))?;
    for (t, m) in maps.iter().enumerate() {
        let m = if a.upscale { m.upscale(ckpt.model.input_size) } else { m.clone() };
        write_bytes(&a.out.join(format!("heatmap_{t:03}.pgm")), &m.to_pgm())?;
    }
    let mut info: String = artifact_header(ckpt.seed, &ckpt.config_hash, "-").iter().map(|h| format!("# {h}\n")).collect();
    info.push_str(&format!("class = {}\nframes = {}\n", a.target, maps.len()));
    write_bytes(&a.out.join("gradcam.txt"), info.as_bytes())?;
    emit(out, &format!("wrote {} heatmaps to {}\n", maps.len(), a.out.display()))
}

fn gradcam_maps<S: Scalar>(
    ckpt: &Checkpoint,
    clip: &Clip,
    target: usize,
) -> Result<Vec<crate::evaluation::Heatmap>> {
    grad_cam(&ckpt.to_model::<S>()?, clip, target)
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.assign("seed", &s.to_string())?;
    }
    let data = require(a.data.or(cfg.paths.data.clone()), "data", "paths.data")?;
    let dest = require(a.out.or(cfg.paths.out.clone()), "out", "paths.out")?;
    let manifest = read_manifest(&data)?;
    cfg.data = manifest.spec.clone();
    cfg.validate()?;
    by_precision!(cfg.model.precision, ablate_run(&cfg, &manifest, &data, &dest, out))
}

fn ablate_run<S: Scalar>(
    cfg: &RunConfig,
    manifest: &DatasetManifest,
    data: &Path,
    dest: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let table = ablate::<S>(
        &standard_variants(&cfg.model),
        &manifest.load_split(data, Split::Train)?,
        &manifest.load_split(data, Split::Test)?,
        &class_weights(manifest)?,
        &cfg.train,
        cfg.seed,
    )?;
    let text = table.to_text(&artifact_header(cfg.seed, &cfg.config_hash(), &manifest.config_hash()));
    write_bytes(&dest.join("ablation.txt"), text.as_bytes())?;
    emit(out, &text)
}

fn gradcheck_cmd(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let mut worst: f64 = 0.0;
    for temporal in ["gate", "softmax"] {
        let cfg = FameConfig { temporal: temporal.into(), ..FameConfig::toy() };
        let started = Instant::now();
        let r = model_gradcheck(&cfg, &ModelGradCheck { seed: a.seed, ..Default::default() })?;
        emit(
            out,
            &format!(
                "gradcheck {temporal}: max_rel_error = {:.3e} over {} coordinates ({} skipped at kinks){}\n\
                 timing.{temporal}.seconds = {:.2}\n",
                r.max_rel_error,
                r.coords_checked,
                r.nonsmooth_skipped,
                r.worst.map_or(String::new(), |(t, i)| format!(", worst at tensor {t} index {i}")),
                started.elapsed().as_secs_f64()
            ),
        )?;
        worst = worst.max(r.max_rel_error);
    }
    let pass = worst <= GRADCHECK_TOLERANCE;
    emit(out, &format!("{} (tolerance {GRADCHECK_TOLERANCE:e})\n", if pass { "PASS" } else { "FAIL" }))?;
    if pass {
        Ok(())
    } else {
        Err(FameError::Oracle(format!("max relative error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}")))
    }
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let clips = match &a.data {
        Some(root) => {
            let m = read_manifest(root)?;
            check_data_matches(&ckpt.model, &m)?;
            m.records.iter().take(a.clips).map(|r| m.load_clip(root, r)).collect::<Result<Vec<_>>>()?
        }
        None => {
            let spec = crate::synthdata::DatasetSpec {
                classes: ckpt.model.classes,
                per_class: a.clips.div_ceil(ckpt.model.classes).max(2),
                frames: ckpt.model.frames,
                size: ckpt.model.input_size,
                ..Default::default()
            };
            let m = generate_dataset(&spec)?;
            let registry = FamilyRegistry::default();
            m.records.iter().take(a.clips).map(|r| render_clip(&spec, r, &registry)).collect::<Result<Vec<_>>>()?
        }
    };
    if clips.len() < a.clips {
        return Err(FameError::Data(format!("bench needs {} clips, found {}", a.clips, clips.len())));
    }
    let (params, times) = by_precision!(ckpt.model.precision, time_clips(&ckpt, &clips))?;
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let std = (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = times.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    emit(
        out,
        &format!(
            "# seed={}\n# config={}\nparams = {params}\nflops = {}\ninput = {}x{}, frames = {}\nclips = {}\n\
             timing.mean_seconds = {mean:.6}\ntiming.median_seconds = {median:.6}\ntiming.std_seconds = {std:.6}\n\
             timing.machine = {} {} {} cores, {}\n",
            ckpt.seed,
            ckpt.config_hash,
            estimate_flops(&ckpt.model, ckpt.model.frames),
            ckpt.model.input_size,
            ckpt.model.input_size,
            ckpt.model.frames,
            times.len(),
            std::env::consts::OS,
            std::env::consts::ARCH,
            cores,
            ckpt.model.precision.as_str(),
        ),
    )
}

fn time_clips<S: Scalar>(ckpt: &Checkpoint, clips: &[Clip]) -> Result<(usize, Vec<f64>)> {
    let model = ckpt.to_model::<S>()?;
    let mut times = Vec::with_capacity(clips.len());
    for c in clips {
        let started = Instant::now();
        clip_logits(&model, std::slice::from_ref(c), 1)?;
        times.push(started.elapsed().as_secs_f64());
    }
    Ok((model.count_params(), times))
}
