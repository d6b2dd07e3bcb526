use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use crossgan_core::baselines::detect_with_mode;
use crossgan_core::checkpoint::{load_checkpoint, save_checkpoint};
use crossgan_core::config::{FlowSource, Overrides, RunConfig};
use crossgan_core::data::{AbnormalityMap, Direction, GroundTruth};
use crossgan_core::dataset::{
    list_videos, load_frame, frame_path, load_video, map_path, read_maps, save_rgb_png, training_pairs,
    truth_for_maps, write_dataset, write_maps,
};
use crossgan_core::detection::DetectionMode;
use crossgan_core::evaluation::{evaluate, Protocol};
use crossgan_core::render::render_heatmap;
use crossgan_core::synthetic::DatasetSpec;
use crossgan_core::training::{save_loss_csv, Task};
use crossgan_nn::OptimizerKind;
use log::info;

#[derive(Parser)]
#[command(name = "crossgan", version, about = "Cross-channel adversarial anomaly detection for video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crowd dataset with a normal train split and an abnormal test split.
    Synth(SynthArgs),
    /// Train one cross-channel task on normal videos.
    Train(TrainArgs),
    /// Write abnormality maps for every video of a dataset.
    Detect(DetectArgs),
    /// Score abnormality maps against ground truth.
    Eval(EvalArgs),
    /// Overlay abnormality maps on their frames.
    Render(RenderArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec (TOML); defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown optimizer {s:?} (use momentum or adaptive-moments)"))
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Where flow comes from: computed or precomputed.
    #[arg(long)]
    flow: Option<FlowSource>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    direction: Direction,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the L1 term.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Base filter count of both networks.
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    /// Loss history CSV; defaults to the checkpoint path with `.loss.csv` appended.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    ckpt_f2o: Option<PathBuf>,
    #[arg(long)]
    ckpt_o2f: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Directory for the maps and their index.
    #[arg(long)]
    out: PathBuf,
    /// discriminator, generator, disc-f or disc-o.
    #[arg(long)]
    mode: Option<DetectionMode>,
    #[command(flatten)]
    common: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    maps: PathBuf,
    /// Dataset root holding `<video>/gt`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value = "frame")]
    protocol: Protocol,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    maps: PathBuf,
    /// Dataset root holding the frames.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

impl ConfigArgs {
    fn resolve(&self, extra: Overrides) -> Result<RunConfig> {
        let overrides = Overrides {
            resolution: self.resolution,
            flow_source: self.flow,
            ..extra
        };
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        if self.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            DatasetSpec::from_toml(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => DatasetSpec::default(),
    };
    write_dataset(&args.out, &spec)?;
    info!("wrote {} training and {} test videos to {}", spec.train_videos, spec.test_anomalies.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = args.common.resolve(Overrides {
        epochs: args.epochs,
        learning_rate: args.lr,
        l1_weight: args.lambda,
        seed: args.seed,
        filters: args.filters,
        optimizer: args.optimizer,
        ..Overrides::default()
    })?;
    let pool = args.common.pool()?;
    let pairs = pool.install(|| training_pairs(&args.data, args.direction, cfg.flow_source, &cfg.flow, cfg.resolution))?;
    info!("{} training pairs for {}", pairs.len(), args.direction);
    let mut task = Task::new(args.direction, cfg.resolution, &cfg.model, &cfg.train)?;
    let total = pairs.len() * cfg.train.epochs;
    let every = (total / 20).max(1);
    task.train(&pairs, |r| {
        if (r.iter + 1) % every == 0 {
            info!("step {}/{total}: l1 {:.4} d {:.4} g {:.4}", r.iter + 1, r.l1, r.d_loss, r.g_adv);
        }
    })?;
    save_checkpoint(&args.out, &task)?;
    let log_path = args.loss_log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    save_loss_csv(&log_path, &task.history)?;
    info!("wrote {} and {}", args.out.display(), log_path.display());
    Ok(())
}

fn load_task(path: Option<&Path>, resolution: Option<usize>, direction: Direction) -> Result<Option<Task>> {
    path.map(|p| load_checkpoint(p, resolution, Some(direction)).with_context(|| format!("loading {}", p.display())))
        .transpose()
}

fn detect(args: DetectArgs) -> Result<()> {
    let mut cfg = args.common.resolve(Overrides { mode: args.mode, ..Overrides::default() })?;
    let fo = load_task(args.ckpt_f2o.as_deref(), args.common.resolution, Direction::FrameToFlow)?;
    let of = load_task(args.ckpt_o2f.as_deref(), args.common.resolution, Direction::FlowToFrame)?;
    match (&fo, &of) {
        (Some(a), Some(b)) if a.resolution() != b.resolution() => {
            bail!("checkpoints disagree on resolution ({} vs {})", a.resolution(), b.resolution())
        }
        (Some(t), _) | (None, Some(t)) => cfg.resolution = t.resolution(),
        (None, None) => bail!("no checkpoint given (use --ckpt-f2o and/or --ckpt-o2f)"),
    }
    let pool = args.common.pool()?;
    let mut maps: Vec<AbnormalityMap> = Vec::new();
    for video in list_videos(&args.data)? {
        let video_maps = pool.install(|| -> Result<_> {
            let data = load_video(&args.data, &video, cfg.flow_source, &cfg.flow, cfg.resolution)?;
            Ok(detect_with_mode(
                cfg.detection.mode,
                fo.as_ref(),
                of.as_ref(),
                &data.frames,
                &data.flows,
                cfg.flow.motion_epsilon,
            )?)
        })?;
        info!("{video}: {} maps", video_maps.len());
        maps.extend(video_maps);
    }
    pool.install(|| write_maps(&args.out, &maps))?;
    info!("wrote {} maps to {}", maps.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let maps = read_maps(&args.maps)?;
    let truth: Vec<GroundTruth> = truth_for_maps(&args.gt, &maps)?;
    let report = evaluate(args.protocol, &maps, &truth)?;
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&args.out, json + "\n").with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{} level: AUC {:.4}, EER {:.2}% over {} frames ({} abnormal)",
        match args.protocol {
            Protocol::Frame => "frame",
            Protocol::Pixel => "pixel",
        },
        report.auc,
        report.eer * 100.0,
        report.frames,
        report.abnormal_frames
    );
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    for map in read_maps(&args.maps)? {
        let frame = load_frame(&frame_path(&args.data, &map.video_id, map.index), &map.video_id, map.index, map.width)?;
        let overlay = render_heatmap(&map, &frame)?;
        save_rgb_png(&map_path(&args.out, &map.video_id, map.index), &overlay)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
