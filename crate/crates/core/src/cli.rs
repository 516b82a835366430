//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. Failures print one JSON line `{"error": class, "message": text}`
//! on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use crate::dms::{background_mask, run_edit, InstanceEdit, RunReport};
use crate::error::{Error, ErrorClass, Result};
use crate::io::{
    frames_to_latents, latents_to_frames, load_control, load_frame, load_frames, load_manifest,
    load_masks, save_frame, save_latents, Frame, PixelMask, RunConfig, VideoManifest,
};
use crate::metrics::{
    evaluate, EmbeddingProvider, EvalInstance, FileEmbeddingProvider, ToyEmbeddingProvider,
};
use crate::predictor::{
    ControlSequence, GaussianTarget, Predictor, TinyAttentionPredictor, ToyGaussianPredictor,
};
use crate::schedule::{invert_sequence, LatentSequence, LatentShape, NoiseSchedule};

#[derive(Debug, Parser)]
#[command(
    name = "multiedit",
    version,
    about = "Multi-instance video editing with a toy diffusion sampler"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ipr.lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Invert the manifest's frames and store the trajectory.
    Invert,
    /// Edit every instance of the manifest.
    Edit,
    /// Score edited frames against the manifest.
    Metrics,
    /// Two-instance toy scenario with closed-form checks.
    Demo,
}

fn config_help() -> String {
    let mut s = String::from("Config keys (CLI > --config file > default):\n");
    for (key, default) in RunConfig::keys() {
        s.push_str(&format!("  {key:<22} {default}\n"));
    }
    s
}

fn command() -> clap::Command {
    let help = config_help();
    let mut cmd = Cli::command().after_help(help.clone());
    for name in ["invert", "edit", "metrics", "demo"] {
        let h = help.clone();
        cmd = cmd.mut_subcommand(name, move |c| c.after_help(h));
    }
    cmd
}

fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn report_error(class: ErrorClass, message: &str) -> i32 {
    let name = match class {
        ErrorClass::Config => "config",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    };
    let line = serde_json::json!({ "error": name, "message": message });
    eprintln!("{line}");
    exit_code(class)
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return 0;
            }
            let msg = e.kind().to_string();
            let _ = e.print();
            return report_error(ErrorClass::Config, &msg);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return report_error(ErrorClass::Config, &e.to_string()),
    };
    match execute(cli) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => report_error(e.class(), &e.to_string()),
    }
}

fn resolve_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for assignment in &global.set {
        cfg.set(assignment)?;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(o) = &global.out {
        cfg.out = o.clone();
    }
    cfg.plan().validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<PathBuf> {
    let cfg = resolve_config(&cli.global)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Invert => cmd_invert(&cfg),
        Command::Edit => cmd_edit(&cfg),
        Command::Metrics => cmd_metrics(&cfg),
        Command::Demo => cmd_demo(&cfg),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule> {
    match &cfg.alpha_bar_table {
        Some(p) => NoiseSchedule::load_alpha_table(p),
        None => Ok(NoiseSchedule::default()),
    }
}

fn manifest(cfg: &RunConfig) -> Result<VideoManifest> {
    let path = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("`manifest` is required for this command".into()))?;
    load_manifest(path)
}

fn predictor(cfg: &RunConfig, channels: usize) -> Result<Box<dyn Predictor>> {
    match cfg.predictor.as_str() {
        "tiny-attention" => Ok(Box::new(TinyAttentionPredictor::new(cfg.seed, channels))),
        "gaussian" => {
            let path = cfg.gaussian_registry.as_deref().ok_or_else(|| {
                Error::Config("predictor `gaussian` needs `gaussian_registry`".into())
            })?;
            Ok(Box::new(ToyGaussianPredictor::load(path)?))
        }
        other => Err(Error::Config(format!(
            "unknown predictor {other:?} (expected tiny-attention or gaussian)"
        ))),
    }
}

struct Inputs {
    manifest: VideoManifest,
    latents: LatentSequence,
    control: Option<ControlSequence>,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    let manifest = manifest(cfg)?;
    let frames = load_frames(&manifest.frames)?;
    let latents = frames_to_latents(&frames)?;
    let control = manifest.control.as_deref().map(load_control).transpose()?;
    Ok(Inputs {
        manifest,
        latents,
        control,
    })
}

fn load_edits(manifest: &VideoManifest) -> Result<Vec<InstanceEdit>> {
    manifest
        .instances
        .iter()
        .map(|i| {
            Ok(InstanceEdit::new(
                i.id.clone(),
                &i.caption,
                load_masks(&i.masks)?,
            ))
        })
        .collect()
}

#[derive(Serialize)]
struct TrajectoryEntry {
    position: usize,
    timestep: usize,
    file: String,
}

fn cmd_invert(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = load_inputs(cfg)?;
    let sched = schedule(cfg)?;
    let model = predictor(cfg, inputs.latents.shape().channels)?;
    let steps = invert_sequence(
        &inputs.latents,
        model.as_ref(),
        &sched,
        cfg.inversion_steps,
        inputs.control.as_ref(),
    )?;
    let dir = cfg.out.join("trajectory");
    create_dir(&dir)?;
    let mut index = Vec::with_capacity(steps.len());
    for (position, z) in steps.iter().enumerate() {
        let file = format!("step_{position:04}.f32");
        save_latents(&dir.join(&file), z)?;
        index.push(TrajectoryEntry {
            position,
            timestep: z.timestep(),
            file,
        });
    }
    let path = dir.join("index.json");
    write_json(&path, &index)?;
    Ok(path)
}

fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    create_dir(dir)?;
    for (k, f) in frames.iter().enumerate() {
        save_frame(&dir.join(format!("frame_{k:04}.png")), f)?;
    }
    Ok(())
}

/// Writes latents, frames, the reproducible report and the timings.
fn write_run(out: &Path, latents: &LatentSequence, report: &RunReport) -> Result<PathBuf> {
    create_dir(out)?;
    save_latents(&out.join("latents.f32"), latents)?;
    write_frames(&out.join("frames"), &latents_to_frames(latents)?)?;
    write_json(&out.join("timings.json"), &report.timings_ms)?;
    let path = out.join("report.json");
    write_json(&path, &report.without_timings())?;
    Ok(path)
}

fn cmd_edit(cfg: &RunConfig) -> Result<PathBuf> {
    let inputs = load_inputs(cfg)?;
    let edits = load_edits(&inputs.manifest)?;
    let sched = schedule(cfg)?;
    let model = predictor(cfg, inputs.latents.shape().channels)?;
    let out = run_edit(
        &inputs.latents,
        &edits,
        &cfg.plan(),
        model.as_ref(),
        &sched,
        inputs.control.as_ref(),
    )?;
    write_run(&cfg.out, &out.latents, &out.report)
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

fn cmd_metrics(cfg: &RunConfig) -> Result<PathBuf> {
    let manifest = manifest(cfg)?;
    let source = load_frames(&manifest.frames)?;
    let edited_dir = cfg
        .edited_frames
        .clone()
        .unwrap_or_else(|| cfg.out.join("frames"));
    let edited = list_frames(&edited_dir)?
        .iter()
        .map(|p| load_frame(p))
        .collect::<Result<Vec<_>>>()?;
    let instances = manifest
        .instances
        .iter()
        .map(|i| {
            Ok(EvalInstance {
                id: i.id.clone(),
                caption: i.caption.clone(),
                source_caption: i.source_caption.clone(),
                masks: load_masks(&i.masks)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let provider: Box<dyn EmbeddingProvider> = match &cfg.embeddings {
        Some(p) => Box::new(FileEmbeddingProvider::load(p)?),
        None => Box::new(ToyEmbeddingProvider::default()),
    };
    let report = evaluate(
        &source,
        &edited,
        &instances,
        manifest.global_source_caption.as_deref(),
        manifest.global_target_caption.as_deref(),
        provider.as_ref(),
        None,
    )?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("metrics.json");
    write_json(&path, &report)?;
    Ok(path)
}

/// Fixed layout of the demo: two side-by-side boxes on a small RGB clip.
pub const DEMO_SHAPE: LatentShape = LatentShape::new(4, 16, 16, 3);
pub const DEMO_SOURCE_MEAN: f64 = -0.2;
pub const DEMO_INSTANCES: [(&str, &str, f64); 2] =
    [("left", "a red car", 0.6), ("right", "a blue bird", -0.7)];
const DEMO_BACKGROUND_TOLERANCE: f64 = 1e-5;
const DEMO_REGION_TOLERANCE: f64 = 1e-3;

/// Masks of the demo instances, in the order of [`DEMO_INSTANCES`].
pub fn demo_masks() -> [Vec<PixelMask>; 2] {
    let s = DEMO_SHAPE;
    let boxes = [(3, 13, 1, 7), (4, 12, 9, 15)];
    boxes.map(|(y0, y1, x0, x1)| vec![PixelMask::rect(s.height, s.width, y0, y1, x0, x1); s.frames])
}

#[derive(Debug, Serialize)]
struct DemoRegion {
    id: String,
    caption: String,
    target: f64,
    mean: f64,
    max_abs_error: f64,
}

#[derive(Debug, Serialize)]
struct DemoCheck {
    /// Against the reconstruction run without edits.
    background_max_abs_deviation: f64,
    /// Against the source latents; the DDIM reconstruction error.
    background_source_deviation: f64,
    regions: Vec<DemoRegion>,
    passed: bool,
}

fn region_values<'a>(
    z: &'a LatentSequence,
    masks: &'a [PixelMask],
) -> impl Iterator<Item = f64> + 'a {
    let c = z.shape().channels;
    masks.iter().enumerate().flat_map(move |(k, m)| {
        let frame = z.frame(k);
        m.bits()
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .flat_map(move |(px, _)| frame[px * c..(px + 1) * c].iter().copied())
    })
}

fn cmd_demo(cfg: &RunConfig) -> Result<PathBuf> {
    let shape = DEMO_SHAPE;
    let mut model = ToyGaussianPredictor::new()
        .with_target("", GaussianTarget::constant(shape, DEMO_SOURCE_MEAN, 0.0))?;
    for (_, caption, mu) in DEMO_INSTANCES {
        model = model.with_target(caption, GaussianTarget::constant(shape, mu, 0.0))?;
    }
    let masks = demo_masks();
    let edits: Vec<InstanceEdit> = DEMO_INSTANCES
        .iter()
        .zip(masks.iter())
        .map(|((id, caption, _), m)| InstanceEdit::new(*id, caption, m.clone()))
        .collect();
    let z0 = LatentSequence::filled(shape, DEMO_SOURCE_MEAN, 0)?;
    let sched = schedule(cfg)?;
    let plan = cfg.plan();
    let out = run_edit(&z0, &edits, &plan, &model, &sched, None)?;

    let reconstruction = run_edit(&z0, &[], &plan, &model, &sched, None)?;

    let background = background_mask(&edits, shape.frames, shape.height, shape.width)?;
    let deviation = region_values(&out.latents, &background)
        .zip(region_values(&reconstruction.latents, &background))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let source_deviation = region_values(&out.latents, &background)
        .map(|v| (v - DEMO_SOURCE_MEAN).abs())
        .fold(0.0, f64::max);
    let mut regions = Vec::new();
    for ((id, caption, mu), m) in DEMO_INSTANCES.iter().zip(masks.iter()) {
        let target = DEMO_SOURCE_MEAN + plan.cfg_scale * (mu - DEMO_SOURCE_MEAN);
        let values: Vec<f64> = region_values(&out.latents, m).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        regions.push(DemoRegion {
            id: (*id).into(),
            caption: (*caption).into(),
            target,
            mean,
            max_abs_error: values
                .iter()
                .map(|v| (v - target).abs())
                .fold(0.0, f64::max),
        });
    }
    let passed = deviation < DEMO_BACKGROUND_TOLERANCE
        && regions
            .iter()
            .all(|r| (r.mean - r.target).abs() < DEMO_REGION_TOLERANCE);
    let check = DemoCheck {
        background_max_abs_deviation: deviation,
        background_source_deviation: source_deviation,
        regions,
        passed,
    };
    let path = write_run(&cfg.out, &out.latents, &out.report)?;
    write_json(&cfg.out.join("demo.json"), &check)?;
    if !passed {
        return Err(Error::Numerical(format!(
            "demo checks failed: background deviation {deviation:.3e}, see demo.json"
        )));
    }
    Ok(path)
}
