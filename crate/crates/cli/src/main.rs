//! `sags`: synthetic scenes, densification, training, rendering and analysis.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sags_core::eval::{displacement_stats, evaluate_views, mean_psnr, render_depth, tracked_displacements};
use sags_core::geometry::{Aabb, ThresholdPolicy};
use sags_core::io::ply::{scalar_ply, write_curvature_ply, write_displacement_ply, write_gaussians_ply};
use sags_core::io::{
    load_checkpoint, parse_colmap_scene_with, save_checkpoint, synth_scene, write_bundle, SceneBundle, SynthConfig,
    TestSplit,
};
use sags_core::model::{densify, ModelConfig};
use sags_core::trainer::{train_with_progress, TrainConfig};
use sags_core::{Result, SagsError};

#[derive(Parser)]
#[command(name = "sags", version, about = "Structure-aware Gaussian splatting on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene as a COLMAP text export with images.
    Synth(SynthArgs),
    /// Estimate curvature and write the densified cloud.
    Densify(DensifyArgs),
    /// Train a model on a scene.
    Train(TrainArgs),
    /// Render views (and optionally depth maps) from a checkpoint.
    Render(RenderArgs),
    /// PSNR and SSIM of a checkpoint on a scene's views.
    Eval(EvalArgs),
    /// Displacement statistics of the original points.
    Displacements(DisplacementArgs),
}

#[derive(Args)]
struct SceneArgs {
    /// COLMAP text export (cameras.txt, images.txt, points3D.txt) with images.
    #[arg(long)]
    scene: PathBuf,
    /// Hold out every n-th view for testing; 0 trains on all views.
    #[arg(long, default_value_t = 8)]
    test_every: usize,
}

impl SceneArgs {
    fn load(&self) -> Result<SceneBundle> {
        let split = if self.test_every == 0 {
            TestSplit::None
        } else {
            TestSplit::EveryNth(self.test_every)
        };
        parse_colmap_scene_with(&self.scene, split)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    focal: Option<f32>,
}

#[derive(Args)]
struct DensifyArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out: PathBuf,
    /// Fraction of lowest-curvature points that receive midpoints.
    #[arg(long, default_value_t = 0.5)]
    percentile: f64,
    #[arg(long)]
    curvature_k: Option<usize>,
    #[arg(long)]
    densify_k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scene: SceneArgs,
    /// Output directory for the checkpoint, metrics and effective config.
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the short desk-scale schedule instead of the full one.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    psnr_every: Option<usize>,
    #[arg(long)]
    grow_start: Option<usize>,
    #[arg(long)]
    grow_end: Option<usize>,
    #[arg(long)]
    grow_interval: Option<usize>,
    #[arg(long)]
    grad_threshold: Option<f64>,
    #[arg(long)]
    prune_opacity: Option<f64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long)]
    lr_features: Option<f64>,
    #[arg(long)]
    lr_mlp: Option<f64>,
    #[arg(long)]
    lr_hash: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Store features for keypoints only and interpolate midpoints.
    #[arg(long)]
    lite: bool,
    /// Disable a pipeline component (repeatable): densification, gnn,
    /// positional_encoding, global_feature, view_dependent_positions.
    #[arg(long = "ablate", value_name = "FLAG")]
    ablate: Vec<String>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, self.toy) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, true) => TrainConfig::toy(),
            (None, false) => TrainConfig::default(),
        };
        set(&mut cfg.iterations, self.iterations);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.psnr_every, self.psnr_every);
        set(&mut cfg.grow.start, self.grow_start);
        set(&mut cfg.grow.end, self.grow_end);
        set(&mut cfg.grow.interval, self.grow_interval);
        set(&mut cfg.grow.grad_threshold, self.grad_threshold);
        set(&mut cfg.grow.prune_opacity, self.prune_opacity);
        set(&mut cfg.grow.max_points, self.max_points);
        set(&mut cfg.lr.features, self.lr_features);
        set(&mut cfg.lr.mlp, self.lr_mlp);
        set(&mut cfg.lr.hash, self.lr_hash);
        set(&mut cfg.model.feature_dim, self.feature_dim);
        set(&mut cfg.model.hidden, self.hidden);
        if self.lite {
            cfg.model.lite = true;
        }
        for flag in &self.ablate {
            cfg.ablations.disable(flag)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Views {
    Train,
    Test,
    All,
}

impl Views {
    fn indices(self, bundle: &SceneBundle) -> Vec<usize> {
        match self {
            Views::Train => bundle.train.clone(),
            Views::Test => bundle.test.clone(),
            Views::All => (0..bundle.cameras.len()).collect(),
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Views::All)]
    views: Views,
    /// Also write expected-depth maps.
    #[arg(long)]
    depth: bool,
    /// Background color as r,g,b in [0, 1].
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f32>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_enum, default_value_t = Views::Test)]
    views: Views,
    /// Also write the table to this CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Background color as r,g,b in [0, 1].
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.0, 0.0, 0.0])]
    background: Vec<f32>,
}

#[derive(Args)]
struct DisplacementArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn rgb(v: &[f32]) -> [f32; 3] {
    [v[0], v[1], v[2]]
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SagsError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SagsError::io(path, e))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    set(&mut cfg.points, args.points);
    set(&mut cfg.cameras, args.cameras);
    set(&mut cfg.width, args.width);
    set(&mut cfg.height, args.height);
    set(&mut cfg.focal, args.focal);
    let scene = synth_scene(args.seed, &cfg)?;
    create_dir(&args.out)?;
    write_bundle(&scene.bundle, &args.out)?;
    write_gaussians_ply(&args.out.join("ground_truth.ply"), &scene.ground_truth)?;
    println!(
        "wrote {} views and {} points to {}",
        scene.bundle.cameras.len(),
        scene.bundle.points.len(),
        args.out.display()
    );
    Ok(())
}

fn densify_cmd(args: &DensifyArgs) -> Result<()> {
    let bundle = args.scene.load()?;
    let mut cfg = ModelConfig {
        threshold: ThresholdPolicy::Percentile(args.percentile),
        ..ModelConfig::default()
    };
    set(&mut cfg.curvature_k, args.curvature_k);
    set(&mut cfg.densify_k, args.densify_k);
    cfg.validate()?;
    let points = bundle.points.positions();
    let (cloud, curvature) = densify(points, &cfg)?;
    create_dir(&args.out)?;
    write_curvature_ply(&args.out.join("curvature.ply"), points, &curvature)?;
    let generated: Vec<f32> = (0..cloud.points.len()).map(|i| if i < cloud.keypoints { 0.0 } else { 1.0 }).collect();
    write_text(&args.out.join("densified.ply"), &scalar_ply(&cloud.points, "generated", &generated)?)?;
    println!(
        "{} keypoints, {} midpoints written to {}",
        cloud.keypoints,
        cloud.parents.len(),
        args.out.display()
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let bundle = args.scene.load()?;
    let (cams, imgs) = bundle.train_views();
    create_dir(&args.out)?;
    cfg.save(&args.out.join("config.toml"))?;
    let start = Instant::now();
    let out = train_with_progress(bundle.points.positions(), &cams, &imgs, &cfg, |row| {
        if let Some(p) = row.psnr {
            log::info!(
                "iteration {} loss {:.5} psnr {:.2} points {} ({:.0}s)",
                row.iteration,
                row.loss,
                p,
                row.n_points,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    out.log.write_csv(&args.out.join("metrics.csv"))?;
    let bytes = save_checkpoint(&out.state.model, &args.out.join("model.sags"))?;
    let scores = evaluate_views(&out.state.model, &cams, &imgs, cfg.background)?;
    println!(
        "trained {} iterations in {:.1}s: training PSNR {:.3} dB, {} Gaussians, checkpoint {} bytes",
        cfg.iterations,
        start.elapsed().as_secs_f64(),
        mean_psnr(&scores),
        out.state.model.rendered_points(),
        bytes
    );
    Ok(())
}

fn render_cmd(args: &RenderArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let bundle = args.scene.load()?;
    create_dir(&args.out)?;
    let views = args.views.indices(&bundle);
    for &i in &views {
        let cam = &bundle.cameras[i];
        let start = Instant::now();
        let out = model.render(cam, rgb(&args.background))?;
        log::info!("view {i} rendered in {:.3}s", start.elapsed().as_secs_f64());
        let name = &bundle.names[i];
        out.color.save_png(&args.out.join(name))?;
        if args.depth {
            let stem = Path::new(name).file_stem().map_or_else(|| format!("view_{i}"), |s| s.to_string_lossy().into_owned());
            render_depth(&model, cam)?.save(&args.out, &format!("{stem}_depth"))?;
        }
    }
    println!("rendered {} views to {}", views.len(), args.out.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let bundle = args.scene.load()?;
    let views = args.views.indices(&bundle);
    if views.is_empty() {
        return Err(SagsError::Argument("no views selected (is the test split empty?)".into()));
    }
    let (cams, imgs) = bundle.views(&views);
    let scores = evaluate_views(&model, &cams, &imgs, rgb(&args.background))?;
    let mut table = String::from("view,name,psnr,ssim\n");
    for s in &scores {
        let i = views[s.view];
        table.push_str(&format!("{i},{},{:.6},{:.6}\n", bundle.names[i], s.psnr, s.ssim));
    }
    let mean_ssim = scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len() as f64;
    table.push_str(&format!("mean,,{:.6},{:.6}\n", mean_psnr(&scores), mean_ssim));
    print!("{table}");
    if let Some(path) = &args.csv {
        write_text(path, &table)?;
    }
    Ok(())
}

fn displacements_cmd(args: &DisplacementArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (init, fin) = tracked_displacements(&model)?;
    let diagonal = Aabb::of(&init).map_or(0.0, |b| b.diagonal() as f64);
    let stats = displacement_stats(&init, &fin, diagonal)?;
    create_dir(&args.out)?;
    write_text(&args.out.join("histogram.csv"), &stats.histogram_csv())?;
    let norms: Vec<f32> = stats.norms.iter().map(|&v| v as f32).collect();
    write_displacement_ply(&args.out.join("displacements.ply"), &init, &norms)?;
    let summary = stats.summary();
    write_text(&args.out.join("summary.txt"), &format!("{summary}\n"))?;
    println!("{summary}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Densify(a) => densify_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Displacements(a) => displacements_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
