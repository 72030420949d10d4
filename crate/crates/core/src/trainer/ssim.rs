//! Windowed SSIM with an analytic gradient, and the L1 + D-SSIM objective.

use crate::imaging::Image;
use crate::{Result, SagsError};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 1e-4;
pub const C2: f64 = 9e-4;

fn kernel() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.map(|v| v / total)
}

/// Separable Gaussian filter, renormalized over the in-bounds window.
struct Blur {
    k: [f64; WINDOW],
    w: usize,
    h: usize,
    norm_x: Vec<f64>,
    norm_y: Vec<f64>,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        let k = kernel();
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|p| {
                    let r = (WINDOW / 2) as isize;
                    (-r..=r)
                        .filter(|&d| (0..n as isize).contains(&(p as isize + d)))
                        .map(|d| k[(d + r) as usize])
                        .sum()
                })
                .collect()
        };
        Self {
            k,
            w,
            h,
            norm_x: norm(w),
            norm_y: norm(h),
        }
    }

    /// Zero-extended correlation along one axis.
    fn pass(&self, src: &[f64], horizontal: bool) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let r = (WINDOW / 2) as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for d in -r..=r {
                    let (sx, sy) = if horizontal { (x as isize + d, y as isize) } else { (x as isize, y as isize + d) };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += self.k[(d + r) as usize] * src[sy as usize * w + sx as usize];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut out = self.pass(&self.pass(src, true), false);
        for y in 0..self.h {
            for x in 0..self.w {
                out[y * self.w + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
        out
    }

    fn apply_transpose(&self, src: &[f64]) -> Vec<f64> {
        let mut scaled = src.to_vec();
        for y in 0..self.h {
            for x in 0..self.w {
                scaled[y * self.w + x] /= self.norm_x[x] * self.norm_y[y];
            }
        }
        // The kernel is symmetric, so the transposed correlation is the same pass.
        self.pass(&self.pass(&scaled, false), true)
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect()
}

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(SagsError::Argument(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if a.data().is_empty() {
        return Err(SagsError::Argument("images are empty".into()));
    }
    Ok(())
}

/// Mean SSIM of `a` against `b`, and optionally its gradient with respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Vec<f32>>)> {
    check(a, b)?;
    let (w, h) = (a.width(), a.height());
    let blur = Blur::new(w, h);
    let count = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0f32; w * h * 3]);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur.apply(&x), blur.apply(&y));
        let (exx, eyy, exy) = (blur.apply(&xx), blur.apply(&yy), blur.apply(&xy));
        let n = w * h;
        let mut g_m = vec![0.0; n];
        let mut g_xx = vec![0.0; n];
        let mut g_xy = vec![0.0; n];
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let a1 = 2.0 * ux * uy + C1;
            let a2 = 2.0 * (exy[p] - ux * uy) + C2;
            let b1 = ux * ux + uy * uy + C1;
            let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_a1 = a2 / (b1 * b2);
                let d_a2 = a1 / (b1 * b2);
                let d_b1 = -s / b1;
                let d_b2 = -s / b2;
                g_m[p] = d_a1 * 2.0 * uy - d_a2 * 2.0 * uy + d_b1 * 2.0 * ux - d_b2 * 2.0 * ux;
                g_xx[p] = d_b2;
                g_xy[p] = 2.0 * d_a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let tm = blur.apply_transpose(&g_m);
            let txx = blur.apply_transpose(&g_xx);
            let txy = blur.apply_transpose(&g_xy);
            for p in 0..n {
                let v = tm[p] + 2.0 * x[p] * txx[p] + y[p] * txy[p];
                g[p * 3 + c] = (v / count) as f32;
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the first image.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f32>)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum();
    Ok(sum / a.data().len() as f64)
}

/// `(1 - lambda) * l1 + lambda * (1 - ssim)`.
pub fn combine_loss(l1: f64, ssim: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * l1 + lambda * (1.0 - ssim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    /// Gradient of `loss` with respect to the rendered image.
    pub grad: Vec<f32>,
}

/// Training objective and its image gradient.
pub fn loss(rendered: &Image, target: &Image, lambda: f64) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(SagsError::Argument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let l1v = l1(rendered, target)?;
    let count = rendered.data().len() as f64;
    let (s, mut grad) = if lambda > 0.0 {
        ssim_with_grad(rendered, target)?
    } else {
        (ssim(rendered, target)?, vec![0.0; rendered.data().len()])
    };
    for ((g, &r), &t) in grad.iter_mut().zip(rendered.data()).zip(target.data()) {
        let sign = if r > t {
            1.0
        } else if r < t {
            -1.0
        } else {
            0.0
        };
        *g = ((1.0 - lambda) * sign / count - lambda * *g as f64) as f32;
    }
    Ok(LossOutput {
        loss: combine_loss(l1v, s, lambda).max(0.0),
        l1: l1v,
        ssim: s,
        grad,
    })
}
