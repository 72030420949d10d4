//! Pinhole cameras, EWA projection and tile-based front-to-back alpha
//! blending with an analytic backward pass.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::imaging::Image;
use crate::refine::GaussianSet;
use crate::{Result, SagsError};

pub const TILE: usize = 16;
pub const LOW_PASS: f32 = 0.3;
pub const MIN_TRANSMITTANCE: f32 = 1e-4;
pub const MAX_ALPHA: f32 = 0.99;
/// Contributions are cut off beyond three standard deviations.
pub const MAX_MAHALANOBIS2: f32 = 9.0;
pub const DEPTH_ALPHA_FLOOR: f32 = 1e-4;

/// Pinhole camera with a world-to-camera pose (`x_cam = R x_world + t`).
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub rotation: [[f32; 3]; 3],
    pub translation: [f32; 3],
    pub width: usize,
    pub height: usize,
    pub near: f32,
}

impl Camera {
    pub const DEFAULT_NEAR: f32 = 0.01;

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f32,
        fy: f32,
        cx: f32,
        cy: f32,
        rotation: [[f32; 3]; 3],
        translation: [f32; 3],
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
            near: Self::DEFAULT_NEAR,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SagsError::Argument(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !(self.near > 0.0) {
            return Err(SagsError::Argument(format!("near plane must be positive, got {}", self.near)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SagsError::Argument("camera image must be non-empty".into()));
        }
        let r = self.rotation_matrix().cast::<f64>();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(SagsError::Argument(format!("camera rotation is not orthonormal (error {err:.2e})")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; image `y` points along `-up`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], fx: f32, fy: f32, width: usize, height: usize) -> Result<Self> {
        let eye = Vector3::from(eye);
        let f = (Vector3::from(target) - eye).normalize();
        let r = f.cross(&Vector3::from(up));
        if r.norm() < 1e-9 {
            return Err(SagsError::Argument("look-at up vector is parallel to the view direction".into()));
        }
        let r = r.normalize();
        let d = f.cross(&r);
        let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
        let t = -(rot * eye);
        let mut rotation = [[0.0f32; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = rot[(i, j)] as f32;
            }
        }
        Self::new(
            fx,
            fy,
            width as f32 / 2.0,
            height as f32 / 2.0,
            rotation,
            [t[0] as f32, t[1] as f32, t[2] as f32],
            width,
            height,
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f32> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    /// World-space center `-R^T t`.
    pub fn center(&self) -> [f32; 3] {
        let r = self.rotation_matrix().cast::<f64>();
        let t = Vector3::from(self.translation).cast::<f64>();
        let c = -(r.transpose() * t);
        [c[0] as f32, c[1] as f32, c[2] as f32]
    }

    pub fn world_to_camera(&self, p: [f32; 3]) -> [f32; 3] {
        let v = self.rotation_matrix() * Vector3::from(p) + Vector3::from(self.translation);
        [v[0], v[1], v[2]]
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// `exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))`.
pub fn density_at(x: [f32; 3], mu: [f32; 3], sigma: &Matrix3<f32>) -> Result<f32> {
    let inv = sigma
        .cast::<f64>()
        .try_inverse()
        .ok_or_else(|| SagsError::Contract("singular covariance in density evaluation".into()))?;
    let d = Vector3::new(x[0] as f64 - mu[0] as f64, x[1] as f64 - mu[1] as f64, x[2] as f64 - mu[2] as f64);
    Ok((-0.5 * (d.transpose() * inv * d)[0]).exp() as f32)
}

/// Rotation matrix of a (nominally unit) quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f32; 4]) -> Matrix3<f32> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R S S^T R^T`.
pub fn covariance(scale: [f32; 3], q: [f32; 4]) -> Matrix3<f32> {
    let m = quat_to_matrix(q) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

/// A Gaussian after projection to the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean: [f32; 2],
    /// Screen covariance `(xx, xy, yy)` including the low-pass floor.
    pub cov: [f32; 3],
    /// Inverse covariance `(xx, xy, yy)`.
    pub conic: [f32; 3],
    pub depth: f32,
    /// Pixel radius enclosing the three-sigma ellipse.
    pub radius: f32,
    pub opacity: f32,
    pub color: [f32; 3],
}

impl Splat2D {
    /// Returns `(alpha', gaussian_value)` at a pixel center, or `None` outside the cutoff.
    #[inline]
    fn eval(&self, px: f32, py: f32) -> Option<(f32, f32)> {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let power = -0.5 * (self.conic[0] * dx * dx + self.conic[2] * dy * dy) - self.conic[1] * dx * dy;
        if power > 0.0 || power < -0.5 * MAX_MAHALANOBIS2 {
            return None;
        }
        let g = power.exp();
        Some(((self.opacity * g).min(MAX_ALPHA), g))
    }
}

/// Projects Gaussian `i`; `None` when it lies on or behind the near plane.
pub fn project_gaussian(set: &GaussianSet, i: usize, cam: &Camera) -> Option<Splat2D> {
    let t = cam.world_to_camera(set.means[i]);
    if t[2] <= cam.near {
        return None;
    }
    let (x, y, z) = (t[0], t[1], t[2]);
    let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let tm = j * cam.rotation_matrix();
    let s2 = tm * covariance(set.scales[i], set.rotations[i]) * tm.transpose();
    let (a, b, c) = (s2[(0, 0)] + LOW_PASS, s2[(0, 1)], s2[(1, 1)] + LOW_PASS);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (a + c);
    let lambda = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    Some(Splat2D {
        mean: [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy],
        cov: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: z,
        radius: (MAX_MAHALANOBIS2.sqrt() * lambda.sqrt()).ceil() + 1.0,
        opacity: set.opacities[i],
        color: set.colors[i],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Vec<f32>,
    /// Alpha-normalized expected depth, `0` where alpha is negligible.
    pub depth: Vec<f32>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }
}

/// Everything the backward pass needs to replay the forward blend.
#[derive(Clone, Debug)]
pub struct RenderState {
    camera: Camera,
    background: [f32; 3],
    splats: Vec<Option<Splat2D>>,
    tiles_x: usize,
    tiles_y: usize,
    tile_lists: Vec<Vec<u32>>,
}

impl RenderState {
    pub fn splats(&self) -> &[Option<Splat2D>] {
        &self.splats
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn tile_count(&self) -> usize {
        self.tile_lists.len()
    }

    /// Tiles per row and per column.
    pub fn tile_grid(&self) -> (usize, usize) {
        (self.tiles_x, self.tiles_y)
    }
}

fn depth_order(splats: &[Option<Splat2D>]) -> Vec<u32> {
    let mut order: Vec<u32> = (0..splats.len() as u32).filter(|&i| splats[i as usize].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().map(|s| s.depth).unwrap_or(0.0);
        let db = splats[b as usize].as_ref().map(|s| s.depth).unwrap_or(0.0);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

struct PixelResult {
    color: [f32; 3],
    alpha: f32,
    depth: f32,
}

fn blend<'a>(ids: impl Iterator<Item = u32>, splats: &'a [Option<Splat2D>], px: f32, py: f32, bg: [f32; 3]) -> PixelResult {
    let mut t = 1.0f32;
    let mut c = [0.0f32; 3];
    let mut d = 0.0f32;
    for id in ids {
        let s = splats[id as usize].as_ref().expect("listed splats are projected");
        let Some((a, _)) = s.eval(px, py) else { continue };
        let next = t * (1.0 - a);
        if next < MIN_TRANSMITTANCE {
            break;
        }
        let w = a * t;
        for ch in 0..3 {
            c[ch] += w * s.color[ch];
        }
        d += w * s.depth;
        t = next;
    }
    let alpha = 1.0 - t;
    PixelResult {
        color: [c[0] + t * bg[0], c[1] + t * bg[1], c[2] + t * bg[2]],
        alpha,
        depth: if alpha > DEPTH_ALPHA_FLOOR { d / alpha } else { 0.0 },
    }
}

fn check_set(set: &GaussianSet) -> Result<()> {
    let n = set.len();
    if set.scales.len() != n || set.rotations.len() != n || set.opacities.len() != n || set.colors.len() != n {
        return Err(SagsError::Contract("Gaussian attribute arrays differ in length".into()));
    }
    Ok(())
}

fn write_pixel(out: &mut RenderOutput, x: usize, y: usize, r: &PixelResult) {
    let w = out.color.width();
    out.color.set_pixel(x, y, r.color);
    out.alpha[y * w + x] = r.alpha;
    out.depth[y * w + x] = r.depth;
}

fn empty_output(cam: &Camera) -> RenderOutput {
    RenderOutput {
        color: Image::filled(cam.width, cam.height, [0.0; 3]),
        alpha: vec![0.0; cam.pixels()],
        depth: vec![0.0; cam.pixels()],
    }
}

/// Tile-parallel forward render.
pub fn rasterize(set: &GaussianSet, cam: &Camera, background: [f32; 3]) -> Result<(RenderOutput, RenderState)> {
    check_set(set)?;
    let splats: Vec<Option<Splat2D>> = (0..set.len()).map(|i| project_gaussian(set, i, cam)).collect();
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for id in depth_order(&splats) {
        let s = splats[id as usize].as_ref().expect("ordered splats are projected");
        let x0 = (s.mean[0] - s.radius).floor().max(0.0);
        let x1 = (s.mean[0] + s.radius).ceil().min(cam.width as f32 - 1.0);
        let y0 = (s.mean[1] - s.radius).floor().max(0.0);
        let y1 = (s.mean[1] + s.radius).ceil().min(cam.height as f32 - 1.0);
        if !(x0 <= x1 && y0 <= y1) {
            continue;
        }
        for ty in (y0 as usize / TILE)..=(y1 as usize / TILE) {
            for tx in (x0 as usize / TILE)..=(x1 as usize / TILE) {
                tile_lists[ty * tiles_x + tx].push(id);
            }
        }
    }
    let tiles: Vec<Vec<(usize, usize, PixelResult)>> = (0..tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut px = Vec::with_capacity(TILE * TILE);
            for y in ty * TILE..((ty + 1) * TILE).min(cam.height) {
                for x in tx * TILE..((tx + 1) * TILE).min(cam.width) {
                    let r = blend(tile_lists[tile].iter().copied(), &splats, x as f32 + 0.5, y as f32 + 0.5, background);
                    px.push((x, y, r));
                }
            }
            px
        })
        .collect();
    let mut out = empty_output(cam);
    for (x, y, r) in tiles.iter().flatten() {
        write_pixel(&mut out, *x, *y, r);
    }
    let state = RenderState {
        camera: cam.clone(),
        background,
        splats,
        tiles_x,
        tiles_y,
        tile_lists,
    };
    Ok((out, state))
}

/// Brute-force renderer: every pixel sorts every contributing Gaussian.
pub fn render_reference(set: &GaussianSet, cam: &Camera, background: [f32; 3]) -> Result<RenderOutput> {
    check_set(set)?;
    let splats: Vec<Option<Splat2D>> = (0..set.len()).map(|i| project_gaussian(set, i, cam)).collect();
    let mut out = empty_output(cam);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let mut hits: Vec<u32> = (0..splats.len() as u32)
                .filter(|&i| splats[i as usize].is_some_and(|s| s.eval(px, py).is_some()))
                .collect();
            hits.sort_by(|&a, &b| {
                let da = splats[a as usize].unwrap().depth;
                let db = splats[b as usize].unwrap().depth;
                da.total_cmp(&db).then(a.cmp(&b))
            });
            let r = blend(hits.into_iter(), &splats, px, py, background);
            write_pixel(&mut out, x, y, &r);
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to every Gaussian attribute.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub means: Vec<[f32; 3]>,
    pub scales: Vec<[f32; 3]>,
    pub rotations: Vec<[f32; 4]>,
    pub opacities: Vec<f32>,
    pub colors: Vec<[f32; 3]>,
    /// Gradient with respect to the projected screen mean, in pixels.
    pub screen: Vec<[f32; 2]>,
}

impl GaussianGrads {
    fn zeros(n: usize) -> Self {
        Self {
            means: vec![[0.0; 3]; n],
            scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
            screen: vec![[0.0; 2]; n],
        }
    }
}

/// Screen-space partial derivatives accumulated per tile-list entry:
/// `(mean x, mean y, conic xx, conic xy, conic yy, opacity, r, g, b)`.
type Partial = [f32; 9];

fn tile_backward(state: &RenderState, tile: usize, d_color: &[f32]) -> Vec<Partial> {
    let cam = &state.camera;
    let list = &state.tile_lists[tile];
    let mut partials = vec![[0.0f32; 9]; list.len()];
    let (tx, ty) = (tile % state.tiles_x, tile / state.tiles_x);
    let mut hits: Vec<(usize, f32, f32, f32)> = Vec::new();
    for y in ty * TILE..((ty + 1) * TILE).min(cam.height) {
        for x in tx * TILE..((tx + 1) * TILE).min(cam.width) {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let o = (y * cam.width + x) * 3;
            let dc = [d_color[o], d_color[o + 1], d_color[o + 2]];
            if dc == [0.0; 3] {
                continue;
            }
            hits.clear();
            let mut t = 1.0f32;
            for (slot, &id) in list.iter().enumerate() {
                let s = state.splats[id as usize].as_ref().expect("listed splats are projected");
                let Some((a, g)) = s.eval(px, py) else { continue };
                let next = t * (1.0 - a);
                if next < MIN_TRANSMITTANCE {
                    break;
                }
                hits.push((slot, a, g, t));
                t = next;
            }
            let mut behind = state.background;
            for &(slot, a, g, t_before) in hits.iter().rev() {
                let s = state.splats[list[slot] as usize].as_ref().expect("projected");
                let p = &mut partials[slot];
                let mut d_alpha = 0.0f32;
                for ch in 0..3 {
                    p[6 + ch] += a * t_before * dc[ch];
                    d_alpha += t_before * (s.color[ch] - behind[ch]) * dc[ch];
                    behind[ch] = a * s.color[ch] + (1.0 - a) * behind[ch];
                }
                if s.opacity * g >= MAX_ALPHA {
                    continue;
                }
                p[5] += d_alpha * g;
                let d_power = d_alpha * s.opacity * g;
                let dx = px - s.mean[0];
                let dy = py - s.mean[1];
                p[0] += d_power * (s.conic[0] * dx + s.conic[1] * dy);
                p[1] += d_power * (s.conic[1] * dx + s.conic[2] * dy);
                p[2] += d_power * (-0.5 * dx * dx);
                p[3] += d_power * (-dx * dy);
                p[4] += d_power * (-0.5 * dy * dy);
            }
        }
    }
    partials
}

/// Quaternion partials `dR / d(w, x, y, z)`, contracted with `dl_dr`.
fn quat_backward(q: [f32; 4], g: &Matrix3<f32>) -> [f32; 4] {
    let [w, x, y, z] = q;
    let mut out = [0.0f32; 4];
    let terms: [(usize, usize, [f32; 4]); 9] = [
        (0, 0, [0.0, 0.0, -4.0 * y, -4.0 * z]),
        (0, 1, [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w]),
        (0, 2, [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x]),
        (1, 0, [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w]),
        (1, 1, [0.0, -4.0 * x, 0.0, -4.0 * z]),
        (1, 2, [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y]),
        (2, 0, [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x]),
        (2, 1, [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y]),
        (2, 2, [0.0, -4.0 * x, -4.0 * y, 0.0]),
    ];
    for (r, c, d) in terms {
        for k in 0..4 {
            out[k] += g[(r, c)] * d[k];
        }
    }
    out
}

/// Chains screen-space partials of Gaussian `i` back to its 3D attributes.
fn gaussian_backward(set: &GaussianSet, i: usize, cam: &Camera, s: &Splat2D, p: &Partial, out: &mut GaussianGrads) {
    let w_rot = cam.rotation_matrix();
    let t = cam.world_to_camera(set.means[i]);
    let (x, y, z) = (t[0], t[1], t[2]);
    let (fx, fy) = (cam.fx, cam.fy);
    let j = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let tm = j * w_rot;
    let rq = quat_to_matrix(set.rotations[i]);
    let m3 = rq * Matrix3::from_diagonal(&Vector3::from(set.scales[i]));
    let sigma = m3 * m3.transpose();

    let conic = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
    let g_conic = Matrix2::new(p[2], 0.5 * p[3], 0.5 * p[3], p[4]);
    let g_cov2 = -(conic * g_conic * conic);
    let g_sigma = tm.transpose() * g_cov2 * tm;
    let g_t = 2.0 * g_cov2 * tm * sigma;
    let g_j = g_t * w_rot.transpose();

    let mut g_cam = [
        p[0] * fx / z + g_j[(0, 2)] * (-fx / (z * z)),
        p[1] * fy / z + g_j[(1, 2)] * (-fy / (z * z)),
        0.0,
    ];
    g_cam[2] = -p[0] * fx * x / (z * z) - p[1] * fy * y / (z * z)
        + g_j[(0, 0)] * (-fx / (z * z))
        + g_j[(0, 2)] * (2.0 * fx * x / (z * z * z))
        + g_j[(1, 1)] * (-fy / (z * z))
        + g_j[(1, 2)] * (2.0 * fy * y / (z * z * z));
    let g_mean = w_rot.transpose() * Vector3::from(g_cam);

    let g_m3 = 2.0 * g_sigma * m3;
    let sc = set.scales[i];
    let mut g_scale = [0.0f32; 3];
    let mut g_rq = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            g_scale[c] += g_m3[(r, c)] * rq[(r, c)];
            g_rq[(r, c)] = g_m3[(r, c)] * sc[c];
        }
    }
    out.means[i] = [g_mean[0], g_mean[1], g_mean[2]];
    out.scales[i] = g_scale;
    out.rotations[i] = quat_backward(set.rotations[i], &g_rq);
    out.opacities[i] = p[5];
    out.colors[i] = [p[6], p[7], p[8]];
    out.screen[i] = [p[0], p[1]];
}

/// Backward pass for an upstream gradient on the `H x W x 3` color image.
pub fn rasterize_backward(state: &RenderState, set: &GaussianSet, d_color: &[f32]) -> Result<GaussianGrads> {
    check_set(set)?;
    if set.len() != state.splats.len() {
        return Err(SagsError::Contract(format!(
            "render state covers {} Gaussians, got {}",
            state.splats.len(),
            set.len()
        )));
    }
    if d_color.len() != state.camera.pixels() * 3 {
        return Err(SagsError::Contract(format!(
            "image gradient has {} values, expected {}",
            d_color.len(),
            state.camera.pixels() * 3
        )));
    }
    let per_tile: Vec<Vec<Partial>> = (0..state.tile_lists.len())
        .into_par_iter()
        .map(|tile| tile_backward(state, tile, d_color))
        .collect();
    let mut totals = vec![[0.0f32; 9]; set.len()];
    for (tile, partials) in per_tile.iter().enumerate() {
        for (slot, p) in partials.iter().enumerate() {
            let acc = &mut totals[state.tile_lists[tile][slot] as usize];
            for k in 0..9 {
                acc[k] += p[k];
            }
        }
    }
    let mut grads = GaussianGrads::zeros(set.len());
    for (i, splat) in state.splats.iter().enumerate() {
        if let Some(s) = splat {
            gaussian_backward(set, i, &state.camera, s, &totals[i], &mut grads);
        }
    }
    Ok(grads)
}
