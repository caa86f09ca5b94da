//! Command-line driver: `gendata`, `train`, `eval`, `stats`, `infer`.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or config), 2 runtime
//! failure.

mod config;

use anyhow::{anyhow, bail, Context, Result};
use bpn_core::cascade::{format_detection_record, infer, InferConfig};
use bpn_core::data::{
    generate_synthetic_scene, load_dataset, read_ppm, write_dataset, write_ppm, Scene,
    SynthConfig, SHAPE_CLASS_NAMES,
};
use bpn_core::eval::{detect_scenes, map_at_iou, match_statistics, pr_curve_csv, render_metrics};
use bpn_core::network::Bpn;
use bpn_core::rng::RngState;
use bpn_core::tensor::{save_checkpoint_file, Shape4, Tensor};
use bpn_core::train::run_training;
use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "bpn", about = "Single-shot shape detector with a bidirectional feature pyramid and cascaded anchor refinement", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-detection dataset.
    Gendata(GendataArgs),
    /// Train a detector on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: mAP at several IoU thresholds.
    Eval(EvalArgs),
    /// Matched-anchor statistics per refinement stage.
    Stats(StatsArgs),
    /// Run inference on one image.
    Infer(InferArgs),
}

#[derive(Args)]
struct GendataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long)]
    count: usize,
    /// Foreground class count (2..=8).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square image edge in pixels.
    #[arg(long, default_value_t = 128)]
    size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (containing manifest.txt) or a manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, logs, and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Config file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint (its .meta sidecar provides the iteration).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    /// Comma-separated IoU thresholds, one per stage.
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    input_size: Option<usize>,
    #[arg(long)]
    pyramid_channels: Option<usize>,
    #[arg(long)]
    augment: Option<bool>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated measuring IoU thresholds.
    #[arg(long, default_value = "0.5,0.6,0.7")]
    iou: String,
    /// Config file (default: config.resolved next to the checkpoint).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for per-class PR-curve CSVs.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    /// Without a checkpoint only the predefined column is reported.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9")]
    thresholds: String,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (binary PPM).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.4)]
    min_score: f64,
    /// Write detection records here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a copy of the image with boxes burned in.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

/// Usage failures exit 1, runtime failures exit 2.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = std::result::Result<(), Failure>;

fn usage(e: anyhow::Error) -> Failure {
    Failure::Usage(e)
}

fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successes, not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Gendata(args) => cmd_gendata(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Infer(args) => cmd_infer(args),
    };
    match result {
        Ok(()) => {}
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad threshold {s:?}"))
        })
        .collect()
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.txt")
    } else {
        data.to_path_buf()
    }
}

/// Reads the run config next to a checkpoint unless one was given.
fn sibling_config(checkpoint: &Path, explicit: Option<&PathBuf>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => p.clone(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("config.resolved"),
    };
    let cfg = RunConfig::load(&path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_net(cfg: &RunConfig, checkpoint: &Path) -> Result<Bpn<f32>> {
    Bpn::from_checkpoint(cfg.net_config(), checkpoint)
        .map_err(|e| anyhow!("loading {}: {e}", checkpoint.display()))
}

fn cmd_gendata(args: GendataArgs) -> CmdResult {
    if args.count == 0 {
        return Err(usage(anyhow!("--count must be >= 1")));
    }
    let synth = SynthConfig::new(args.size, args.classes);
    synth.validate().map_err(|e| usage(anyhow!("{e}")))?;

    let root = RngState::new(args.seed);
    let scenes: Vec<Scene> = (0..args.count)
        .map(|i| {
            let mut rng = root.split(i as u64);
            generate_synthetic_scene(&mut rng, &synth, format!("scene_{i:05}"))
        })
        .collect();
    write_dataset(&args.out, &scenes, args.classes)
        .map_err(|e| runtime(anyhow!("writing dataset: {e}")))?;
    println!(
        "wrote {} scenes (K={}, size {}) to {}",
        scenes.len(),
        args.classes,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn resolve_train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.iterations {
        cfg.total_iterations = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = args.stages {
        cfg.stages = v;
        cfg.iou_thresholds = bpn_core::cascade::DEFAULT_THRESHOLDS[..v.min(3)].to_vec();
    }
    if let Some(t) = &args.thresholds {
        cfg.iou_thresholds = parse_thresholds(t)?;
        if args.stages.is_none() {
            cfg.stages = cfg.iou_thresholds.len();
        }
    }
    if let Some(v) = args.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = args.pyramid_channels {
        cfg.pyramid_channels = v;
    }
    if let Some(v) = args.augment {
        cfg.augment = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = resolve_train_config(&args).map_err(usage)?;

    let manifest = load_dataset(&manifest_path(&args.data))
        .map_err(|e| runtime(anyhow!("loading dataset: {e}")))?;
    if manifest.num_classes != cfg.num_classes {
        // The dataset is authoritative for K.
        cfg.num_classes = manifest.num_classes;
        cfg.validate().map_err(usage)?;
    }
    let scenes = manifest
        .load_all()
        .map_err(|e| runtime(anyhow!("loading scenes: {e}")))?;
    if let Some(s) = scenes.first() {
        if s.width != cfg.input_size || s.height != cfg.input_size {
            return Err(usage(anyhow!(
                "dataset images are {}x{} but input_size is {}",
                s.width,
                s.height,
                cfg.input_size
            )));
        }
    }

    std::fs::create_dir_all(&args.out).map_err(|e| runtime(e.into()))?;
    std::fs::write(args.out.join("config.resolved"), cfg.render())
        .map_err(|e| runtime(e.into()))?;

    let (mut net, start_iteration) = match &args.resume {
        Some(ckpt) => {
            let net = load_net(&cfg, ckpt).map_err(runtime)?;
            let meta = read_meta(&meta_path(ckpt)).map_err(runtime)?;
            println!("resuming from {} at iteration {}", ckpt.display(), meta);
            (net, meta)
        }
        None => (
            Bpn::<f32>::new(cfg.net_config(), &RngState::new(cfg.seed))
                .map_err(|e| runtime(anyhow!("{e}")))?,
            0,
        ),
    };

    let log_path = args.out.join("train.log");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(args.resume.is_some())
            .truncate(args.resume.is_none())
            .write(true)
            .open(&log_path)
            .map_err(|e| runtime(e.into()))?,
    );

    let settings = cfg.train_settings(start_iteration);
    let ckpt_every = cfg.checkpoint_every;
    let out_dir = args.out.clone();
    let total = cfg.total_iterations;
    let result = run_training(&mut net, &scenes, &settings, |iter, report, net| {
        writeln!(log, "{}", report.log_line(iter)).map_err(bpn_core::Error::Io)?;
        if iter == 1 || iter == total || iter % 100 == 0 {
            println!("{}", report.log_line(iter));
        }
        if ckpt_every > 0 && iter % ckpt_every == 0 && iter != total {
            let path = out_dir.join(format!("checkpoint_{iter:06}.bpn"));
            save_checkpoint_file(&net.store, &path)?;
            write_meta(&meta_path(&path), iter)
                .map_err(|e| bpn_core::Error::Invalid(format!("{e:#}")))?;
        }
        Ok(())
    });
    match result {
        Ok(()) => {}
        Err(e) => {
            let _ = log.flush();
            return Err(runtime(anyhow!("training failed: {e}")));
        }
    }
    log.flush().map_err(|e| runtime(e.into()))?;

    let final_path = args.out.join("checkpoint_final.bpn");
    save_checkpoint_file(&net.store, &final_path)
        .map_err(|e| runtime(anyhow!("writing checkpoint: {e}")))?;
    write_meta(&meta_path(&final_path), cfg.total_iterations).map_err(runtime)?;
    println!("wrote {}", final_path.display());
    Ok(())
}


fn meta_path(ckpt: &Path) -> PathBuf {
    let mut p = ckpt.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

fn write_meta(path: &Path, iteration: usize) -> Result<()> {
    std::fs::write(path, format!("iteration = {iteration}\n"))
        .with_context(|| format!("writing {}", path.display()))
}

fn read_meta(path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {} (needed to resume)", path.display()))?;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("iteration =") {
            return v
                .trim()
                .parse()
                .map_err(|_| anyhow!("{}: bad iteration {v:?}", path.display()));
        }
    }
    bail!("{}: missing `iteration =` line", path.display())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let thresholds = parse_thresholds(&args.iou).map_err(usage)?;
    if thresholds.is_empty() {
        return Err(usage(anyhow!("--iou needs at least one threshold")));
    }
    let cfg = sibling_config(&args.checkpoint, args.config.as_ref()).map_err(runtime)?;
    let net = load_net(&cfg, &args.checkpoint).map_err(runtime)?;
    let manifest = load_dataset(&manifest_path(&args.data))
        .map_err(|e| runtime(anyhow!("loading dataset: {e}")))?;
    let scenes = manifest.load_all().map_err(|e| runtime(anyhow!("{e}")))?;

    let (detections, gts) = detect_scenes(&net, &scenes, &InferConfig::default())
        .map_err(|e| runtime(anyhow!("{e}")))?;
    let evals = map_at_iou(&detections, &gts, &thresholds);
    print!("{}", render_metrics(&evals, &manifest.class_names));

    if let Some(dir) = &args.pr_csv {
        std::fs::create_dir_all(dir).map_err(|e| runtime(e.into()))?;
        for e in &evals {
            for (class, curve) in &e.curves {
                let name = manifest
                    .class_names
                    .get(*class as usize - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("class{class}"));
                let path = dir.join(format!("pr_{name}_iou{:.2}.csv", e.iou_threshold));
                std::fs::write(path, pr_curve_csv(curve)).map_err(|e| runtime(e.into()))?;
            }
        }
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> CmdResult {
    let thresholds = parse_thresholds(&args.thresholds).map_err(usage)?;
    let manifest = load_dataset(&manifest_path(&args.data))
        .map_err(|e| runtime(anyhow!("loading dataset: {e}")))?;
    let scenes = manifest.load_all().map_err(|e| runtime(anyhow!("{e}")))?;

    let stats = match &args.checkpoint {
        Some(ckpt) => {
            let cfg = sibling_config(ckpt, args.config.as_ref()).map_err(runtime)?;
            let net = load_net(&cfg, ckpt).map_err(runtime)?;
            match_statistics(Some(&net), &scenes, &thresholds)
        }
        None => match_statistics::<f32>(None, &scenes, &thresholds),
    }
    .map_err(|e| runtime(anyhow!("{e}")))?;
    print!("{}", stats.render());
    Ok(())
}

/// Fixed drawing palette, one color per class id.
const PALETTE: [[u8; 3]; 8] = [
    [255, 64, 64],
    [64, 255, 64],
    [64, 64, 255],
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 255],
    [255, 160, 0],
    [255, 255, 255],
];

fn draw_box(rgb: &mut [u8], w: usize, h: usize, d: &bpn_core::boxes::BBox, color: [u8; 3]) {
    let x0 = d.xmin.round().clamp(0.0, (w - 1) as f64) as usize;
    let x1 = d.xmax.round().clamp(0.0, (w - 1) as f64) as usize;
    let y0 = d.ymin.round().clamp(0.0, (h - 1) as f64) as usize;
    let y1 = d.ymax.round().clamp(0.0, (h - 1) as f64) as usize;
    let mut put = |x: usize, y: usize| {
        let p = (y * w + x) * 3;
        rgb[p..p + 3].copy_from_slice(&color);
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

fn cmd_infer(args: InferArgs) -> CmdResult {
    if !args.min_score.is_finite() {
        return Err(usage(anyhow!("--min-score must be finite")));
    }
    let cfg = sibling_config(&args.checkpoint, args.config.as_ref()).map_err(runtime)?;
    let net = load_net(&cfg, &args.checkpoint).map_err(runtime)?;

    let mut file = std::fs::File::open(&args.image)
        .with_context(|| format!("opening {}", args.image.display()))
        .map_err(runtime)?;
    let (w, h, rgb) =
        read_ppm(&mut file, &args.image.to_string_lossy()).map_err(|e| runtime(anyhow!("{e}")))?;
    let image_id = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());

    let mut tensor = Tensor::<f32>::zeros(Shape4::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                *tensor.at_mut(0, c, y, x) = rgb[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }

    let detections = infer(&net, &tensor, &image_id, &InferConfig::default())
        .map_err(|e| runtime(anyhow!("{e}")))?;
    let kept: Vec<_> = detections
        .into_iter()
        .filter(|d| d.score >= args.min_score)
        .collect();

    let records: String = kept
        .iter()
        .map(|d| format_detection_record(d) + "\n")
        .collect();
    match &args.out {
        Some(path) => std::fs::write(path, records).map_err(|e| runtime(e.into()))?,
        None => print!("{records}"),
    }

    if let Some(path) = &args.overlay {
        let mut painted = rgb.clone();
        for d in &kept {
            let color = PALETTE[(d.class as usize - 1) % PALETTE.len()];
            draw_box(&mut painted, w, h, &d.bbox, color);
        }
        let mut out = std::fs::File::create(path).map_err(|e| runtime(e.into()))?;
        write_ppm(&painted, w, h, &mut out).map_err(|e| runtime(anyhow!("{e}")))?;
    }

    eprintln!(
        "{} detections at min score {} ({} classes: {})",
        kept.len(),
        args.min_score,
        cfg.num_classes,
        SHAPE_CLASS_NAMES[..cfg.num_classes].join(", ")
    );
    Ok(())
}
