//! End-to-end optimization: objective, learning-rate schedule, growing and
//! pruning, and the metrics log.

mod config;
mod ssim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sags_tensor::{Adam, ParamId, Tensor, TensorError};

pub use config::{exp_decay, GrowPruneConfig, LearningRates, TrainConfig};
pub use ssim::{combine_loss, l1, loss, ssim, ssim_with_grad, LossOutput, C1, C2, SIGMA, WINDOW};

use crate::eval::psnr;
use crate::geometry::Point3;
use crate::imaging::Image;
use crate::model::SagsModel;
use crate::raster::{self, Camera, GaussianGrads, RenderState};
use crate::{Result, SagsError};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub n_points: usize,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str = "iteration,loss,l1,ssim,n_points,psnr";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let psnr = r.psnr.map(|p| p.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{},{},{},{}", r.iteration, r.loss, r.l1, r.ssim, r.n_points, psnr).expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| SagsError::io(path, e))
    }

    /// Trailing moving average of the loss column.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut out = Vec::with_capacity(self.rows.len());
        let mut acc = 0.0;
        for (i, r) in self.rows.iter().enumerate() {
            acc += r.loss;
            if i >= w {
                acc -= self.rows[i - w].loss;
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }
}

/// Per-Gaussian statistics collected between grow/prune steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Accumulators {
    pub grad_sum: Vec<f64>,
    pub grad_count: Vec<u32>,
    pub alpha_sum: Vec<f64>,
    pub passes: u32,
}

impl Accumulators {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            grad_count: vec![0; n],
            alpha_sum: vec![0.0; n],
            passes: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.grad_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad_sum.is_empty()
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.grad_count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.grad_count[i] as f64
        }
    }

    pub fn mean_alpha(&self, i: usize) -> Option<f64> {
        (self.passes > 0).then(|| self.alpha_sum[i] / self.passes as f64)
    }

    fn record(&mut self, state: &RenderState, grads: &GaussianGrads, opacities: &[f32]) {
        let cam = state.camera();
        let (hw, hh) = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
        for (i, splat) in state.splats().iter().enumerate() {
            if let Some(s) = splat {
                let inside = s.mean[0] + s.radius >= 0.0
                    && s.mean[0] - s.radius <= cam.width as f32
                    && s.mean[1] + s.radius >= 0.0
                    && s.mean[1] - s.radius <= cam.height as f32;
                if inside {
                    let [gx, gy] = grads.screen[i];
                    self.grad_sum[i] += ((gx as f64 * hw).powi(2) + (gy as f64 * hh).powi(2)).sqrt();
                    self.grad_count[i] += 1;
                }
            }
            self.alpha_sum[i] += opacities[i] as f64;
        }
        self.passes += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GrowPruneReport {
    pub cloned: usize,
    pub pruned: usize,
    pub pairs_pruned: usize,
}

/// Model, optimizer and bookkeeping for one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: SagsModel,
    pub adam: Adam,
    pub acc: Accumulators,
    pub iteration: usize,
    rng: ChaCha8Rng,
}

fn flat<const K: usize>(rows: &[[f32; K]]) -> Tensor {
    Tensor::new(rows.len(), K, rows.iter().flatten().copied().collect()).expect("row-major")
}

impl TrainState {
    pub fn new(model: SagsModel, config: &TrainConfig) -> Self {
        let mut adam = Adam::new(config.adam);
        let store = model.store();
        adam.register(store, model.feature_id(), config.lr.features as f32);
        if let Some(id) = model.hash_table_id() {
            adam.register(store, id, config.lr.hash as f32);
        }
        for id in model.mlp_param_ids() {
            adam.register(store, id, config.lr.mlp as f32);
        }
        let acc = Accumulators::new(model.rendered_points());
        Self {
            model,
            adam,
            acc,
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_9a0b),
        }
    }

    fn decayed_ids(&self) -> Vec<(ParamId, bool)> {
        let mut ids = vec![(self.model.feature_id(), true)];
        ids.extend(self.model.mlp_param_ids().into_iter().map(|id| (id, false)));
        ids
    }

    fn set_learning_rates(&mut self, config: &TrainConfig) {
        let progress = self.iteration as f64 / config.iterations.max(1) as f64;
        let lr_feat = exp_decay(config.lr.features, config.lr.features_final, progress) as f32;
        let lr_mlp = exp_decay(config.lr.mlp, config.lr.mlp_final, progress) as f32;
        for (id, is_feature) in self.decayed_ids() {
            self.adam.set_lr(id, if is_feature { lr_feat } else { lr_mlp });
        }
    }

    /// One optimization step on a single view.
    pub fn step(&mut self, config: &TrainConfig, camera: &Camera, target: &Image) -> Result<StepStats> {
        self.iteration += 1;
        let it = self.iteration;
        self.set_learning_rates(config);
        let Gradient {
            objective: obj,
            color,
            render_state,
            gaussians,
            raster: g,
            params: grads,
        } = objective_gradient(&self.model, camera, target, config.lambda, config.background)?;
        if !obj.loss.is_finite() {
            return Err(SagsError::Training {
                iteration: it,
                group: "loss".into(),
                message: format!("non-finite loss {}", obj.loss),
            });
        }
        self.adam.step(self.model.store_mut(), &grads).map_err(|e| match e {
            TensorError::NonFiniteGradient(group) => SagsError::Training {
                iteration: it,
                group,
                message: "non-finite gradient".into(),
            },
            other => other.into(),
        })?;
        self.acc.record(&render_state, &g, &gaussians.opacities);
        Ok(StepStats {
            loss: obj.loss,
            l1: obj.l1,
            ssim: obj.ssim,
            psnr: psnr(&color, target)?,
        })
    }
}

/// Loss of one view and its gradient with respect to every parameter.
pub struct Gradient {
    pub objective: LossOutput,
    pub color: Image,
    pub render_state: RenderState,
    pub gaussians: crate::refine::GaussianSet,
    pub raster: GaussianGrads,
    pub params: sags_tensor::Gradients,
}

pub fn objective_gradient(model: &SagsModel, camera: &Camera, target: &Image, lambda: f64, background: [f32; 3]) -> Result<Gradient> {
    let fwd = model.forward(camera.center())?;
    let mut tape = fwd.tape;
    let (out, render_state) = raster::rasterize(&fwd.gaussians, camera, background)?;
    let objective = loss(&out.color, target, lambda)?;
    let g = raster::rasterize_backward(&render_state, &fwd.gaussians, &objective.grad)?;
    let a = fwd.attrs;
    let n = fwd.gaussians.len();
    let root = tape.custom_scalar(
        &[a.means, a.scales, a.rotations, a.opacities, a.colors],
        objective.loss as f32,
        vec![
            flat(&g.means),
            flat(&g.scales),
            flat(&g.rotations),
            Tensor::new(n, 1, g.opacities.clone())?,
            flat(&g.colors),
        ],
    )?;
    let params = tape.backward(root)?;
    Ok(Gradient {
        objective,
        color: out.color,
        render_state,
        gaussians: fwd.gaussians,
        raster: g,
        params,
    })
}

/// Clones high-gradient points, removes low-opacity ones and resets the
/// accumulators.
pub fn grow_prune_step(state: &mut TrainState, config: &GrowPruneConfig) -> Result<GrowPruneReport> {
    let model = &state.model;
    let n = model.stored_points();
    let m = model.pairs().len();
    if state.acc.len() != n + m {
        return Err(SagsError::Contract(format!(
            "accumulators track {} Gaussians, model renders {}",
            state.acc.len(),
            n + m
        )));
    }
    let low = |i: usize| state.acc.mean_alpha(i).is_some_and(|a| a < config.prune_opacity);
    let keep: Vec<bool> = (0..n).map(|i| !low(i)).collect();
    let keep_pairs: Vec<bool> = (0..m).map(|p| !low(n + p)).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Err(SagsError::Training {
            iteration: state.iteration,
            group: "grow_prune".into(),
            message: "pruning would remove every point (degenerate scene)".into(),
        });
    }
    let kept_pairs = model
        .pairs()
        .iter()
        .zip(&keep_pairs)
        .filter(|&(&(a, b), &k)| k && keep[a as usize] && keep[b as usize])
        .count();
    let budget = config.max_points.saturating_sub(kept + kept_pairs);
    let mut clones = Vec::new();
    for i in (0..n).filter(|&i| keep[i] && state.acc.mean_grad(i) > config.grad_threshold) {
        if clones.len() >= budget {
            break;
        }
        let s0 = model.base_scales()[i] as f64 * config.jitter;
        let normal = Normal::new(0.0, s0.max(1e-12)).expect("positive std");
        let p = model.anchors()[i];
        let offset: [f64; 3] = std::array::from_fn(|_| normal.sample(&mut state.rng));
        let anchor: Point3 = std::array::from_fn(|a| p[a] + offset[a] as f32);
        clones.push((i, anchor));
    }
    let pairs_pruned = keep_pairs.iter().filter(|&&k| !k).count();
    let report = GrowPruneReport {
        cloned: clones.len(),
        pruned: n - kept,
        pairs_pruned,
    };
    if report.cloned > 0 || report.pruned > 0 || pairs_pruned > 0 {
        let sources = state.model.update_points(&keep, &keep_pairs, &clones)?;
        state.adam.remap_rows(state.model.feature_id(), &sources);
    }
    state.acc = Accumulators::new(state.model.rendered_points());
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: TrainState,
    pub log: MetricsLog,
}

/// Trains a model from `points` on the given views.
pub fn train(points: &[Point3], cameras: &[Camera], images: &[Image], config: &TrainConfig) -> Result<TrainOutput> {
    train_with_progress(points, cameras, images, config, |_| {})
}

pub fn train_with_progress(
    points: &[Point3],
    cameras: &[Camera],
    images: &[Image],
    config: &TrainConfig,
    mut progress: impl FnMut(&MetricRow),
) -> Result<TrainOutput> {
    config.validate()?;
    if cameras.is_empty() || cameras.len() != images.len() {
        return Err(SagsError::Argument(format!(
            "training needs at least one view with an image ({} cameras, {} images)",
            cameras.len(),
            images.len()
        )));
    }
    for (c, img) in cameras.iter().zip(images) {
        if c.width != img.width() || c.height != img.height() {
            return Err(SagsError::Argument("camera and image sizes differ".into()));
        }
    }
    let model = SagsModel::from_points(points, &config.model, config.ablations, config.seed)?;
    train_model(model, cameras, images, config, &mut progress)
}

/// Continues training an existing model.
pub fn train_model(
    model: SagsModel,
    cameras: &[Camera],
    images: &[Image],
    config: &TrainConfig,
    progress: &mut dyn FnMut(&MetricRow),
) -> Result<TrainOutput> {
    let mut state = TrainState::new(model, config);
    let mut view_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut log = MetricsLog::default();
    for _ in 0..config.iterations {
        if order.is_empty() {
            order = (0..cameras.len()).collect();
            order.shuffle(&mut view_rng);
        }
        let v = order.pop().expect("refilled");
        let stats = state.step(config, &cameras[v], &images[v])?;
        let it = state.iteration;
        if config.grow_prune_due(it) {
            let report = grow_prune_step(&mut state, &config.grow)?;
            log::debug!(
                "iteration {it}: cloned {}, pruned {}, pairs pruned {}",
                report.cloned,
                report.pruned,
                report.pairs_pruned
            );
        }
        let row = MetricRow {
            iteration: it,
            loss: stats.loss,
            l1: stats.l1,
            ssim: stats.ssim,
            n_points: state.model.rendered_points(),
            psnr: (it % config.psnr_every == 0 || it == config.iterations).then_some(stats.psnr),
        };
        progress(&row);
        log.rows.push(row);
    }
    Ok(TrainOutput { state, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let log = MetricsLog {
            rows: vec![
                MetricRow {
                    iteration: 1,
                    loss: 0.5,
                    l1: 0.25,
                    ssim: 0.75,
                    n_points: 10,
                    psnr: None,
                },
                MetricRow {
                    iteration: 2,
                    loss: 0.4,
                    l1: 0.2,
                    ssim: 0.8,
                    n_points: 11,
                    psnr: Some(20.0),
                },
            ],
        };
        assert_eq!(
            log.to_csv(),
            "iteration,loss,l1,ssim,n_points,psnr\n1,0.5,0.25,0.75,10,\n2,0.4,0.2,0.8,11,20\n"
        );
        let s = log.smoothed_loss(2);
        assert_eq!(s, vec![0.5, 0.45]);
    }

    #[test]
    fn accumulator_means() {
        let mut acc = Accumulators::new(2);
        assert_eq!(acc.mean_alpha(0), None);
        acc.alpha_sum = vec![0.002, 0.4];
        acc.passes = 2;
        acc.grad_sum = vec![4e-4, 0.0];
        acc.grad_count = vec![1, 0];
        assert_eq!(acc.mean_alpha(0), Some(0.001));
        assert_eq!(acc.mean_grad(0), 4e-4);
        assert_eq!(acc.mean_grad(1), 0.0);
    }
}
