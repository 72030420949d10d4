//! Procedural ground-truth scenes: a textured ground plane, a sphere and
//! loose clutter, rendered by the brute-force rasterizer.

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, PointCloud};
use crate::raster::{render_reference, Camera};
use crate::refine::GaussianSet;
use crate::{Result, SagsError};

use super::{SceneBundle, TestSplit};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub plane_gaussians: usize,
    pub sphere_gaussians: usize,
    pub clutter_gaussians: usize,
    /// Size of the sparse input cloud sampled from the ground-truth means.
    pub points: usize,
    /// Standard deviation of the positional jitter applied to input points.
    pub jitter: f32,
    pub width: usize,
    pub height: usize,
    pub cameras: usize,
    pub focal: f32,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub background: [f32; 3],
    pub split: TestSplit,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            plane_gaussians: 600,
            sphere_gaussians: 400,
            clutter_gaussians: 100,
            points: 500,
            jitter: 0.01,
            width: 64,
            height: 64,
            cameras: 8,
            focal: 70.0,
            ring_radius: 3.5,
            ring_height: 1.5,
            background: [0.0; 3],
            split: TestSplit::None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let total = self.plane_gaussians + self.sphere_gaussians + self.clutter_gaussians;
        if total == 0 {
            return Err(SagsError::Config("synthetic scene needs at least one Gaussian".into()));
        }
        if self.points == 0 || self.points > total {
            return Err(SagsError::Config(format!("points must be in 1..={total}, got {}", self.points)));
        }
        if self.cameras == 0 || self.width == 0 || self.height == 0 {
            return Err(SagsError::Config("need at least one camera and a non-empty image".into()));
        }
        if !(self.focal > 0.0) || !(self.ring_radius > 0.0) || !(self.jitter >= 0.0) {
            return Err(SagsError::Config("focal, ring_radius must be positive and jitter non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub bundle: SceneBundle,
    pub ground_truth: GaussianSet,
}

pub const SPHERE_CENTER: [f32; 3] = [0.1, -0.1, 0.45];
pub const SPHERE_RADIUS: f32 = 0.4;
pub const LOOK_AT: [f64; 3] = [0.0, 0.0, 0.25];

fn quat(q: UnitQuaternion<f32>) -> [f32; 4] {
    [q.w, q.i, q.j, q.k]
}

fn push(set: &mut GaussianSet, mean: Point3, scale: [f32; 3], rot: UnitQuaternion<f32>, opacity: f32, color: [f32; 3]) {
    set.means.push(mean);
    set.scales.push(scale);
    set.rotations.push(quat(rot));
    set.opacities.push(opacity);
    set.colors.push(color.map(|c| c.clamp(0.0, 1.0)));
}

/// Ground-truth Gaussians for `cfg`, generated from `rng`.
pub fn ground_truth<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> GaussianSet {
    let mut set = GaussianSet::default();
    let z = Vector3::z_axis();

    let side = (cfg.plane_gaussians as f64).sqrt().ceil().max(1.0) as usize;
    let step = 2.0 / side as f32;
    for i in 0..cfg.plane_gaussians {
        let (gx, gy) = (i % side, i / side);
        let x = -1.0 + (gx as f32 + rng.random_range(0.2..0.8)) * step;
        let y = -1.0 + (gy as f32 + rng.random_range(0.2..0.8)) * step;
        let checker = ((x + 1.0) * 2.0).floor() as i32 + ((y + 1.0) * 2.0).floor() as i32;
        let base = if checker % 2 == 0 { [0.85, 0.8, 0.65] } else { [0.25, 0.35, 0.55] };
        let color = base.map(|c: f32| c + rng.random_range(-0.05..0.05));
        let rot = UnitQuaternion::from_axis_angle(&z, rng.random_range(0.0..std::f32::consts::TAU));
        let s = 0.6 * step;
        push(&mut set, [x, y, 0.0], [s, s * rng.random_range(0.6..1.0), 0.005], rot, rng.random_range(0.8..0.95), color);
    }

    let n = cfg.sphere_gaussians.max(1) as f32;
    let golden = std::f32::consts::PI * (3.0 - 5f32.sqrt());
    let spacing = (4.0 * std::f32::consts::PI / n).sqrt() * SPHERE_RADIUS;
    for i in 0..cfg.sphere_gaussians {
        let nz = 1.0 - 2.0 * (i as f32 + 0.5) / n;
        let r = (1.0 - nz * nz).sqrt();
        let th = golden * i as f32;
        let normal = Vector3::new(r * th.cos(), r * th.sin(), nz);
        let mean = [
            SPHERE_CENTER[0] + SPHERE_RADIUS * normal.x,
            SPHERE_CENTER[1] + SPHERE_RADIUS * normal.y,
            SPHERE_CENTER[2] + SPHERE_RADIUS * normal.z,
        ];
        let align = UnitQuaternion::rotation_between(&Vector3::z(), &normal).unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f32::consts::PI));
        let rot = align * UnitQuaternion::from_axis_angle(&z, rng.random_range(0.0..std::f32::consts::TAU));
        let color = [0.75 + 0.25 * normal.x, 0.3 + 0.2 * normal.z, 0.25 + 0.2 * normal.y];
        let s = 0.6 * spacing;
        push(&mut set, mean, [s, s, 0.004], rot, rng.random_range(0.8..0.95), color);
    }

    for _ in 0..cfg.clutter_gaussians {
        let mean = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(0.02..0.6)];
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f32));
        let rot = UnitQuaternion::from_scaled_axis(axis);
        let scale = [rng.random_range(0.02..0.06), rng.random_range(0.02..0.06), rng.random_range(0.01..0.04)];
        let color = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        push(&mut set, mean, scale, rot, rng.random_range(0.6..0.9), color);
    }
    set
}

/// Look-at cameras evenly spaced on a horizontal ring.
pub fn ring_cameras(cfg: &SynthConfig) -> Result<Vec<Camera>> {
    (0..cfg.cameras)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / cfg.cameras as f64;
            let eye = [cfg.ring_radius * a.cos(), cfg.ring_radius * a.sin(), cfg.ring_height];
            Camera::look_at(eye, LOOK_AT, [0.0, 0.0, 1.0], cfg.focal, cfg.focal, cfg.width, cfg.height)
        })
        .collect()
}

pub fn synth_scene(seed: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = ground_truth(cfg, &mut rng);
    gt.validate()?;
    let cameras = ring_cameras(cfg)?;
    let images = cameras
        .iter()
        .map(|c| render_reference(&gt, c, cfg.background).map(|o| o.color))
        .collect::<Result<Vec<_>>>()?;

    let mut picked = sample(&mut rng, gt.len(), cfg.points).into_vec();
    picked.sort_unstable();
    let noise = Normal::new(0.0f32, cfg.jitter).map_err(|e| SagsError::Config(e.to_string()))?;
    let positions: Vec<Point3> = picked
        .iter()
        .map(|&i| gt.means[i].map(|v| v + noise.sample(&mut rng)))
        .collect();
    let colors = picked.iter().map(|&i| gt.colors[i]).collect();
    let points = PointCloud::new(positions)?.with_colors(colors)?;

    let names = (0..cameras.len()).map(|i| format!("view_{i:03}.png")).collect();
    let (train, test) = cfg.split.indices(cameras.len());
    Ok(SynthScene {
        bundle: SceneBundle {
            points,
            cameras,
            images,
            names,
            train,
            test,
        },
        ground_truth: gt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::psnr;

    fn small() -> SynthConfig {
        SynthConfig {
            plane_gaussians: 60,
            sphere_gaussians: 40,
            clutter_gaussians: 10,
            points: 50,
            width: 24,
            height: 24,
            focal: 26.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let a = synth_scene(3, &small()).unwrap();
        let b = synth_scene(3, &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bundle.cameras.len(), 8);
        assert_eq!(a.bundle.images.len(), 8);
        assert_eq!(a.bundle.points.len(), 50);
        assert_eq!(a.ground_truth.len(), 110);
        a.bundle.validate().unwrap();
        assert_ne!(synth_scene(4, &small()).unwrap(), a);
    }

    #[test]
    fn oracle_renders_match_themselves() {
        let s = synth_scene(1, &small()).unwrap();
        let again = render_reference(&s.ground_truth, &s.bundle.cameras[0], [0.0; 3]).unwrap();
        assert_eq!(psnr(&again.color, &s.bundle.images[0]).unwrap(), 100.0);
        let lit = s.bundle.images[0].data().iter().filter(|&&v| v > 0.05).count();
        assert!(lit > s.bundle.images[0].data().len() / 4, "scene should fill the view");
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            points: 10_000,
            ..small()
        };
        assert!(synth_scene(0, &cfg).is_err());
    }
}
