//! Command-line front end: scene generation, atlas baking, vocabulary
//! construction, training, animation, mesh extraction and evaluation.

mod ops;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "texvocab", version, about = "Pose-conditioned avatar pipeline")]
struct Cli {
    /// Worker threads (falls back to TEXVOCAB_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view scene directory.
    GenerateScene(GenerateSceneArgs),
    /// Back-project training views into per-frame UV texture maps.
    BuildAtlas(BuildAtlasArgs),
    /// Sample key body parts and write the vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Train the SDF+color field on the training split.
    Train(TrainArgs),
    /// Render a pose sequence with the trained field.
    Animate(AnimateArgs),
    /// Extract the posed surface mesh of one frame.
    ExtractMesh(ExtractMeshArgs),
    /// Render views and report PSNR/SSIM against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateSceneArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 12)]
    views: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Training split size; defaults to all frames.
    #[arg(long)]
    train_frames: Option<usize>,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    atlas_res: usize,
}

#[derive(Args)]
struct BuildAtlasArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Run directory receiving atlas/.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 512)]
    resolution: usize,
}

#[derive(Args)]
struct BuildVocabArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0.3)]
    key_fraction: f64,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// key=value file overriding training defaults (CLI flags win).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rays_per_step: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    stage1_end: Option<usize>,
    #[arg(long)]
    stage2_end: Option<usize>,
    #[arg(long)]
    stratified_samples: Option<usize>,
    #[arg(long)]
    guided_samples: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    depth_grid_res: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trunk_width: Option<usize>,
    #[arg(long)]
    trunk_depth: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Use |d| for the mask loss instead of d^2.
    #[arg(long)]
    mask_loss_absolute: bool,
    /// Feed the raw pose vector to the field trunk as well.
    #[arg(long)]
    feed_pose_vector: bool,
    /// Fixed-order gradient reduction (always on; recorded in manifest).
    #[arg(long, default_value_t = true)]
    deterministic: bool,
}

#[derive(Args)]
struct AnimateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Camera index to render.
    #[arg(long, default_value_t = 0)]
    camera: usize,
    /// Pose sequence file (poses.json schema); defaults to the scene's
    /// test split, or the training poses when there is no test split.
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Temporal smoothing window (odd).
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 128)]
    grid_res: usize,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExtractMeshArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    /// Also write a binary PLY next to the OBJ.
    #[arg(long)]
    ply: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Which poses to evaluate: train or test.
    #[arg(long, default_value = "train")]
    split: String,
    /// Cameras to evaluate (defaults to all).
    #[arg(long, value_delimiter = ',')]
    cameras: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    grid_res: usize,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .or_else(|| std::env::var("TEXVOCAB_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateScene(args) => {
            let spec = texvocab_core::synthetic_scene::SceneSpec {
                seed: args.seed,
                views: args.views,
                frames: args.frames,
                train_frames: args.train_frames.unwrap_or(args.frames),
                image_width: args.width,
                image_height: args.height,
                atlas_res: args.atlas_res,
            };
            ops::generate_scene(&spec, &args.out)
        }
        Command::BuildAtlas(args) => ops::build_atlas(&args.scene, &args.run, args.resolution),
        Command::BuildVocab(args) => ops::build_vocab(
            &args.scene,
            &args.run,
            args.k,
            args.key_fraction,
            args.channels,
            args.seed,
        ),
        Command::Train(args) => {
            let mut cfg = texvocab_core::trainer::TrainConfig::default();
            let mut field_cfg = texvocab_core::neural_field::FieldConfig::default();
            if let Some(path) = &args.config {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ops::apply_config_file(&text, &mut cfg, &mut field_cfg)?;
            }
            macro_rules! over {
                ($field:ident) => {
                    if let Some(v) = args.$field {
                        cfg.$field = v;
                    }
                };
            }
            over!(epochs);
            over!(batch);
            over!(lr);
            over!(rays_per_step);
            over!(stage1_end);
            over!(stage2_end);
            over!(stratified_samples);
            over!(guided_samples);
            over!(patch_size);
            over!(depth_grid_res);
            over!(seed);
            over!(checkpoint_every);
            over!(eval_every);
            if args.steps_per_epoch.is_some() {
                cfg.steps_per_epoch = args.steps_per_epoch;
            }
            if args.mask_loss_absolute {
                cfg.mask_loss_absolute = true;
            }
            cfg.deterministic = args.deterministic;
            if let Some(v) = args.trunk_width {
                field_cfg.trunk_width = v;
                field_cfg.color_width = v;
            }
            if let Some(v) = args.trunk_depth {
                field_cfg.trunk_depth = v;
            }
            if args.feed_pose_vector {
                field_cfg.feed_pose_vector = true;
            }
            ops::train(&args.scene, &args.run, cfg, field_cfg)
        }
        Command::Animate(args) => {
            if args.window == 0 || args.window % 2 == 0 {
                bail!("--window must be odd and >= 1");
            }
            ops::animate(
                &args.scene,
                &args.run,
                args.camera,
                args.poses.as_deref(),
                args.window,
                args.grid_res,
                args.seed,
            )
        }
        Command::ExtractMesh(args) => {
            ops::extract_mesh(&args.scene, &args.run, args.frame, args.resolution, args.ply)
        }
        Command::Eval(args) => {
            let split = match args.split.as_str() {
                "train" => ops::EvalSplit::Train,
                "test" => ops::EvalSplit::Test,
                other => bail!("unknown split '{}' (expected train or test)", other),
            };
            ops::eval(&args.scene, &args.run, split, &args.cameras, args.grid_res, args.seed)
        }
    }
}
