//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sags_core::encoder::HashEncodingConfig;
use sags_core::geometry::Point3;
use sags_core::imaging::Image;
use sags_core::io::{synth_scene, SynthConfig};
use sags_core::model::{ModelConfig, SagsModel};
use sags_core::raster::{self, Camera, GaussianGrads};
use sags_core::refine::{DecoderConfig, GaussianSet};
use sags_core::trainer::{self, TrainConfig, TrainState};
use sags_tensor::{Mlp, ParamStore};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(n: usize, seed: u64, extent: f32) -> Vec<Point3> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| std::array::from_fn(|_| r.random_range(-extent..extent)))
        .collect()
}

pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    (0..3).map(|c| (a[c] as f64 - b[c] as f64).powi(2)).sum()
}

/// All-pairs k-NN, ordered by `(squared distance, index)`, self excluded.
pub fn brute_knn(points: &[Point3], k: usize) -> Vec<Vec<(f64, usize)>> {
    (0..points.len())
        .map(|i| {
            let mut all: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| (dist2(&points[i], &points[j]), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all.truncate(k);
            all
        })
        .collect()
}

/// Smallest-eigenvalue share of the neighborhood covariance, by Jacobi
/// rotations in f64.
pub fn curvature_oracle(points: &[Point3]) -> f64 {
    let n = points.len() as f64;
    let mean: [f64; 3] = std::array::from_fn(|c| points.iter().map(|p| p[c] as f64).sum::<f64>() / n);
    let mut a = [[0.0f64; 3]; 3];
    for p in points {
        let d: [f64; 3] = std::array::from_fn(|c| p[c] as f64 - mean[c]);
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += d[i] * d[j] / n;
            }
        }
    }
    for _ in 0..100 {
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q].abs() < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut j = [[0.0; 3]; 3];
            for (i, row) in j.iter_mut().enumerate() {
                row[i] = 1.0;
            }
            j[p][p] = c;
            j[q][q] = c;
            j[p][q] = s;
            j[q][p] = -s;
            let mut tmp = [[0.0; 3]; 3];
            for i in 0..3 {
                for k in 0..3 {
                    tmp[i][k] = (0..3).map(|m| j[m][i] * a[m][k]).sum();
                }
            }
            for i in 0..3 {
                for k in 0..3 {
                    a[i][k] = (0..3).map(|m| tmp[i][m] * j[m][k]).sum();
                }
            }
        }
    }
    let ev = [a[0][0], a[1][1], a[2][2]];
    let sum: f64 = ev.iter().sum();
    if sum <= 0.0 {
        return 0.0;
    }
    ev.iter().cloned().fold(f64::INFINITY, f64::min) / sum
}

/// Ground plane on a jittered grid plus a sphere well above it. Returns the
/// cloud and whether each point lies on the plane.
pub fn plane_sphere_cloud(seed: u64) -> (Vec<Point3>, Vec<bool>) {
    let mut r = rng(seed);
    let mut pts = Vec::new();
    let mut planar = Vec::new();
    for i in 0..20 {
        for j in 0..20 {
            pts.push([
                -1.0 + 0.1 * i as f32 + r.random_range(-0.02..0.02),
                -1.0 + 0.1 * j as f32 + r.random_range(-0.02..0.02),
                0.0,
            ]);
            planar.push(true);
        }
    }
    let n = 300;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let rad = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        pts.push([
            (0.25 * rad * th.cos()) as f32,
            (0.25 * rad * th.sin()) as f32,
            (1.5 + 0.25 * z) as f32,
        ]);
        planar.push(false);
    }
    (pts, planar)
}

/// Dense f64 evaluation of a stored MLP (ReLU between layers, linear last).
pub struct DenseMlp {
    pub layers: Vec<(Vec<f64>, Vec<f64>, usize, usize, bool)>,
}

impl DenseMlp {
    pub fn from_store(store: &ParamStore, mlp: &Mlp) -> Self {
        let layers = mlp
            .layers()
            .iter()
            .map(|l| {
                let w = store.get(l.weight).data().iter().map(|&v| v as f64).collect();
                let b = store.get(l.bias).data().iter().map(|&v| v as f64).collect();
                (w, b, l.in_dim, l.out_dim, l.activation == sags_tensor::Activation::Relu)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (w, b, i, o, relu) in &self.layers {
            assert_eq!(cur.len(), *i);
            let mut next = b.clone();
            for r in 0..*i {
                for c in 0..*o {
                    next[c] += cur[r] * w[r * o + c];
                }
            }
            if *relu {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = next;
        }
        cur
    }
}

/// Softmax of inverse distances, computed in f64.
pub fn softmax_inverse(d: &[f64]) -> Vec<f64> {
    let inv: Vec<f64> = d.iter().map(|x| 1.0 / x.max(1e-8)).collect();
    let m = inv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = inv.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn test_camera(width: usize, height: usize, focal: f32) -> Camera {
    Camera::look_at([0.3, -2.5, 1.2], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], focal, focal, width, height).unwrap()
}

/// Random anisotropic Gaussians around the origin, visible from [`test_camera`].
pub fn random_gaussians(n: usize, seed: u64) -> GaussianSet {
    let mut r = rng(seed);
    let mut set = GaussianSet::default();
    for _ in 0..n {
        set.means.push(std::array::from_fn(|_| r.random_range(-0.8..0.8)));
        set.scales.push(std::array::from_fn(|_| r.random_range(0.03..0.2)));
        let q: [f32; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let n = q.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
        set.rotations.push(q.map(|v| v / n));
        set.opacities.push(r.random_range(0.1..0.95));
        set.colors.push(std::array::from_fn(|_| r.random_range(0.0..1.0)));
    }
    set
}

/// Symmetric relative error with a per-group absolute floor.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Default)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    /// Checked entries whose gradient exceeds the group floor.
    pub significant: usize,
    pub max_rel: f64,
}

impl GroupCheck {
    pub fn merge(&mut self, other: &GroupCheck) {
        self.checked += other.checked;
        self.significant += other.significant;
        self.max_rel = self.max_rel.max(other.max_rel);
    }
}

/// Fraction of the group's largest gradient below which entries are compared
/// in absolute terms.
pub const FLOOR_FRACTION: f64 = 2e-1;
/// Step sizes swept for each entry. Small steps are dominated by f32
/// round-off and large ones by curvature, so an entry passes when some step
/// in the sweep agrees with the analytic value.
pub const STEPS: [f64; 8] = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6];

/// Smallest relative error between `analytic` and the central, forward and
/// backward differences over [`STEPS`]; the one-sided quotients cover entries
/// that sit next to an activation kink. `eval(delta)` returns the loss and the
/// offset actually applied after rounding to f32.
pub fn sweep_error(analytic: f64, mut eval: impl FnMut(f64) -> (f64, f64), floor: f64) -> f64 {
    let (base, _) = eval(0.0);
    STEPS
        .iter()
        .map(|&h| {
            let (up, du) = eval(h);
            let (down, dd) = eval(-h);
            [(up - down) / (du - dd), (up - base) / du, (base - down) / -dd]
                .into_iter()
                .map(|fd| rel_err(analytic, fd, floor))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Compares `analytic[i]` with finite differences for the largest entries
/// plus a few random ones. `eval(i, delta)` returns the loss with entry `i`
/// offset by `delta`, and the offset actually applied.
pub fn check_entries(
    group: &str,
    analytic: &[f64],
    per_group: usize,
    seed: u64,
    mut eval: impl FnMut(usize, f64) -> (f64, f64),
) -> GroupCheck {
    let max_abs = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (FLOOR_FRACTION * max_abs).max(1e-7);
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let mut picks: Vec<usize> = order.iter().take(per_group).copied().collect();
    let mut r = rng(seed);
    for _ in 0..per_group / 2 {
        if !analytic.is_empty() {
            picks.push(r.random_range(0..analytic.len()));
        }
    }
    picks.sort_unstable();
    picks.dedup();
    let mut out = GroupCheck {
        group: group.to_string(),
        ..Default::default()
    };
    for i in picks {
        out.checked += 1;
        if analytic[i].abs() > floor {
            out.significant += 1;
        }
        let e = sweep_error(analytic[i], |d| eval(i, d), floor);
        out.max_rel = out.max_rel.max(e);
    }
    out
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 8,
        hidden: 16,
        gnn_k: 4,
        hash: HashEncodingConfig {
            levels: 4,
            table_size: 1 << 10,
            features_per_level: 2,
            base_resolution: 4,
            growth: 1.5,
        },
        decoder: DecoderConfig {
            hidden: 16,
            ..DecoderConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        plane_gaussians: 60,
        sphere_gaussians: 40,
        clutter_gaussians: 10,
        points: 40,
        width: 24,
        height: 24,
        focal: 26.0,
        cameras: 4,
        ..SynthConfig::default()
    }
}

/// A small model after a few optimization steps, so that every head carries
/// non-zero weights, together with one view to differentiate against.
pub fn warmed_model(seed: u64, steps: usize, model_config: ModelConfig) -> (SagsModel, Camera, Image, TrainConfig) {
    let scene = synth_scene(seed, &tiny_synth()).unwrap();
    let (cams, imgs) = scene.bundle.train_views();
    let mut cfg = TrainConfig::toy();
    cfg.seed = seed;
    cfg.model = model_config;
    cfg.lr.mlp = 1e-2;
    cfg.lr.features = 1e-2;
    let model = SagsModel::from_points(scene.bundle.points.positions(), &cfg.model, cfg.ablations, seed).unwrap();
    let mut state = TrainState::new(model, &cfg);
    for s in 0..steps {
        let v = s % cams.len();
        state.step(&cfg, &cams[v], &imgs[v]).unwrap();
    }
    (state.model, cams[0].clone(), imgs[0].clone(), cfg)
}

pub fn model_loss(model: &SagsModel, cam: &Camera, target: &Image, lambda: f64) -> f64 {
    let img = model.render(cam, [0.0; 3]).unwrap().color;
    trainer::loss(&img, target, lambda).unwrap().loss
}

/// Groups of stored parameters: the feature bank, the hash table and one group per MLP.
pub fn parameter_groups(model: &SagsModel) -> Vec<(String, Vec<sags_tensor::ParamId>)> {
    let store = model.store();
    let mut groups: Vec<(String, Vec<sags_tensor::ParamId>)> = Vec::new();
    for (id, p) in store.iter() {
        let g = p.name.split('.').next().unwrap_or(&p.name);
        let g = if p.name == "hash.table" { "hash.table" } else { g };
        match groups.iter_mut().find(|(n, _)| n == g) {
            Some((_, ids)) => ids.push(id),
            None => groups.push((g.to_string(), vec![id])),
        }
    }
    groups
}

/// Attribute cotangents dotted with the Gaussians `model` produces for `cam`.
pub fn attribute_pairing(model: &SagsModel, cam: &Camera, g: &GaussianGrads) -> f64 {
    let set = model.gaussians(cam).unwrap();
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>();
    dot(set.means.as_flattened(), g.means.as_flattened())
        + dot(set.scales.as_flattened(), g.scales.as_flattened())
        + dot(set.rotations.as_flattened(), g.rotations.as_flattened())
        + dot(&set.opacities, &g.opacities)
        + dot(set.colors.as_flattened(), g.colors.as_flattened())
}

/// Gradient check of every parameter group on one seed. The rendered loss
/// jumps where Gaussians cross the opacity and footprint cutoffs, so the
/// parameters are differentiated through the pairing of the rasterizer's
/// attribute cotangents with the model output; the rasterizer itself is
/// covered by [`raster_gradient_check`].
pub fn pipeline_gradient_check(seed: u64, per_group: usize) -> Vec<GroupCheck> {
    let (model, cam, target, cfg) = warmed_model(seed, 30, small_model_config());
    let grad = trainer::objective_gradient(&model, &cam, &target, cfg.lambda, [0.0; 3]).unwrap();
    let mut reports = Vec::new();
    for (g, ids) in parameter_groups(&model) {
        let mut report = GroupCheck {
            group: g.clone(),
            ..Default::default()
        };
        for (k, &id) in ids.iter().enumerate() {
            let analytic: Vec<f64> = match grad.params.param(id) {
                Some(t) => t.data().iter().map(|&v| v as f64).collect(),
                None => vec![0.0; model.store().get(id).len()],
            };
            let mut probe = model.clone();
            let r = check_entries(&g, &analytic, per_group, seed * 31 + k as u64, |i, d| {
                let orig = probe.store().get(id).data()[i];
                let moved = orig + d as f32;
                probe.store_mut().get_mut(id).data_mut()[i] = moved;
                let l = attribute_pairing(&probe, &cam, &grad.raster);
                probe.store_mut().get_mut(id).data_mut()[i] = orig;
                (l, moved as f64 - orig as f64)
            });
            report.merge(&r);
        }
        reports.push(report);
    }
    reports
}

/// Gradient check of the rasterizer plus loss with respect to Gaussian attributes.
pub fn raster_gradient_check(seed: u64, n: usize, per_group: usize) -> Vec<GroupCheck> {
    let cam = test_camera(24, 24, 28.0);
    let set = random_gaussians(n, seed);
    let target = raster::render_reference(&random_gaussians(n, seed + 1000), &cam, [0.0; 3]).unwrap().color;
    let lambda = 0.2;
    let (out, state) = raster::rasterize(&set, &cam, [0.0; 3]).unwrap();
    let obj = trainer::loss(&out.color, &target, lambda).unwrap();
    let g = raster::rasterize_backward(&state, &set, &obj.grad).unwrap();
    let loss_of = |s: &GaussianSet| {
        let img = raster::rasterize(s, &cam, [0.0; 3]).unwrap().0.color;
        trainer::loss(&img, &target, lambda).unwrap().loss
    };
    let flat3 = |v: &[[f32; 3]]| v.iter().flatten().map(|&x| x as f64).collect::<Vec<_>>();
    let mut reports = Vec::new();
    let groups: Vec<(&str, Vec<f64>)> = vec![
        ("means", flat3(&g.means)),
        ("scales", flat3(&g.scales)),
        ("rotations", g.rotations.iter().flatten().map(|&x| x as f64).collect()),
        ("opacities", g.opacities.iter().map(|&x| x as f64).collect()),
        ("colors", flat3(&g.colors)),
    ];
    for (k, (name, analytic)) in groups.into_iter().enumerate() {
        let mut probe = set.clone();
        let r = check_entries(name, &analytic, per_group, seed * 17 + k as u64, |i, d| {
            let backup = probe.clone();
            let slot = match name {
                "means" => &mut probe.means[i / 3][i % 3],
                "scales" => &mut probe.scales[i / 3][i % 3],
                "rotations" => &mut probe.rotations[i / 4][i % 4],
                "opacities" => &mut probe.opacities[i],
                _ => &mut probe.colors[i / 3][i % 3],
            };
            let orig = *slot;
            *slot = orig + d as f32;
            let applied = *slot as f64 - orig as f64;
            let l = loss_of(&probe);
            probe = backup;
            (l, applied)
        });
        reports.push(r);
    }
    reports
}
