//! Image metrics, displacement statistics and depth-map export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::Point3;
use crate::imaging::{self, Image};
use crate::raster::Camera;
use crate::model::SagsModel;
use crate::{Result, SagsError};

pub const PSNR_CAP: f64 = 100.0;

/// `20 log10(1 / RMSE)`, capped at 100 dB for near-identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(SagsError::Argument(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let n = a.data().len().max(1) as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

pub const HISTOGRAM_BINS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    pub norms: Vec<f64>,
    /// `HISTOGRAM_BINS + 1` edges spanning `[0, max]`.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub diagonal: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Summary of `|final - initial|` over index-aligned points.
pub fn displacement_stats(initial: &[Point3], finals: &[Point3], diagonal: f64) -> Result<DisplacementStats> {
    if initial.len() != finals.len() {
        return Err(SagsError::Argument(format!(
            "{} initial positions for {} final means",
            initial.len(),
            finals.len()
        )));
    }
    let norms: Vec<f64> = initial
        .iter()
        .zip(finals)
        .map(|(a, b)| (0..3).map(|c| (b[c] as f64 - a[c] as f64).powi(2)).sum::<f64>().sqrt())
        .collect();
    let n = norms.len();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let width = if max > 0.0 { max / HISTOGRAM_BINS as f64 } else { 1.0 };
    let bin_edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|i| if max > 0.0 { max * i as f64 / HISTOGRAM_BINS as f64 } else { i as f64 * width / HISTOGRAM_BINS as f64 })
        .collect();
    let mut counts = vec![0usize; HISTOGRAM_BINS];
    for &v in &norms {
        let b = if max > 0.0 { ((v / max) * HISTOGRAM_BINS as f64).floor() as usize } else { 0 };
        counts[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    let mut sorted = norms.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = if n > 0 { norms.iter().sum::<f64>() / n as f64 } else { 0.0 };
    Ok(DisplacementStats {
        mean,
        median: quantile(&sorted, 0.5),
        p95: quantile(&sorted, 0.95),
        max,
        diagonal,
        norms,
        bin_edges,
        counts,
    })
}

impl DisplacementStats {
    pub fn median_fraction_of_diagonal(&self) -> f64 {
        if self.diagonal > 0.0 {
            self.median / self.diagonal
        } else {
            0.0
        }
    }

    /// Histogram as CSV: `bin_start,bin_end,count`.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(s, "{},{},{}", self.bin_edges[i], self.bin_edges[i + 1], c).expect("string write");
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "points {}  mean {:.6}  median {:.6}  p95 {:.6}  max {:.6}  (median {:.3}% of scene diagonal {:.4})",
            self.norms.len(),
            self.mean,
            self.median,
            self.p95,
            self.max,
            100.0 * self.median_fraction_of_diagonal(),
            self.diagonal
        )
    }
}

/// Initial anchors and current means of every Gaussian that existed at
/// initialization (grown points are left out).
pub fn tracked_displacements(model: &SagsModel) -> Result<(Vec<Point3>, Vec<Point3>)> {
    let means = model.means()?;
    let original = model.rendered_is_original();
    let anchors = model.render_anchors();
    let mut init = Vec::new();
    let mut fin = Vec::new();
    for i in 0..means.len() {
        if original[i] {
            init.push(anchors[i]);
            fin.push(means[i]);
        }
    }
    Ok((init, fin))
}

const VIRIDIS: [[u8; 3]; 11] = [
    [0x44, 0x01, 0x54],
    [0x48, 0x24, 0x75],
    [0x41, 0x44, 0x87],
    [0x35, 0x5f, 0x8d],
    [0x2a, 0x78, 0x8e],
    [0x21, 0x91, 0x8c],
    [0x22, 0xa8, 0x84],
    [0x44, 0xbf, 0x70],
    [0x7a, 0xd1, 0x51],
    [0xbd, 0xdf, 0x26],
    [0xfd, 0xe7, 0x25],
];

/// Perceptual purple-to-yellow colormap for `t` in `[0, 1]`.
pub fn viridis(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    std::array::from_fn(|c| {
        let a = VIRIDIS[i][c] as f64;
        let b = VIRIDIS[i + 1][c] as f64;
        (a + (b - a) * f).round() as u8
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f32,
    pub max: f32,
    /// 16-bit value 0 marks pixels without coverage.
    pub invalid_value: u16,
}

impl DepthMap {
    pub fn valid(&self, i: usize) -> bool {
        self.alpha[i] > crate::raster::DEPTH_ALPHA_FLOOR
    }

    pub fn range(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for i in (0..self.depth.len()).filter(|&i| self.valid(i)) {
            lo = lo.min(self.depth[i]);
            hi = hi.max(self.depth[i]);
        }
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }

    /// 16-bit quantization over the valid range; invalid pixels map to 0.
    pub fn quantize16(&self) -> Vec<u16> {
        let (lo, hi) = self.range();
        let span = (hi - lo).max(1e-12);
        (0..self.depth.len())
            .map(|i| {
                if self.valid(i) {
                    1 + (((self.depth[i] - lo) / span).clamp(0.0, 1.0) * 65534.0).round() as u16
                } else {
                    0
                }
            })
            .collect()
    }

    pub fn preview8(&self) -> Vec<u8> {
        self.quantize16().iter().map(|&v| if v == 0 { 0 } else { (1 + (v as u32 - 1) * 254 / 65534) as u8 }).collect()
    }

    /// Writes `<stem>.png` (16-bit), `<stem>.json`, `<stem>.f32` and `<stem>_preview.png`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let (min, max) = self.range();
        imaging::save_gray16(&dir.join(format!("{stem}.png")), self.width, self.height, &self.quantize16())?;
        imaging::save_gray8(&dir.join(format!("{stem}_preview.png")), self.width, self.height, &self.preview8())?;
        let side = DepthSidecar {
            width: self.width,
            height: self.height,
            min,
            max,
            invalid_value: 0,
        };
        let json = serde_json::to_string_pretty(&side).map_err(|e| SagsError::Image(e.to_string()))?;
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, json).map_err(|e| SagsError::io(&path, e))?;
        let raw: Vec<u8> = self.depth.iter().flat_map(|d| d.to_le_bytes()).collect();
        let path = dir.join(format!("{stem}.f32"));
        std::fs::write(&path, raw).map_err(|e| SagsError::io(&path, e))
    }
}

/// Expected depth of a trained model as seen from `camera`.
pub fn render_depth(model: &SagsModel, camera: &Camera) -> Result<DepthMap> {
    let out = model.render(camera, [0.0; 3])?;
    Ok(DepthMap {
        width: camera.width,
        height: camera.height,
        depth: out.depth,
        alpha: out.alpha,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of a model over a set of views.
pub fn evaluate_views(model: &SagsModel, cameras: &[Camera], images: &[Image], background: [f32; 3]) -> Result<Vec<ViewScore>> {
    cameras
        .iter()
        .zip(images)
        .enumerate()
        .map(|(view, (c, img))| {
            let out = model.render(c, background)?;
            Ok(ViewScore {
                view,
                psnr: psnr(&out.color, img)?,
                ssim: crate::trainer::ssim(&out.color, img)?,
            })
        })
        .collect()
}

pub fn mean_psnr(scores: &[ViewScore]) -> f64 {
    scores.iter().map(|s| s.psnr).sum::<f64>() / scores.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(4, 4, [0.3; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert_eq!(psnr(&Image::filled(4, 4, [0.0; 3]), &Image::filled(4, 4, [1.0; 3])).unwrap(), 0.0);
        let b = Image::filled(4, 4, [0.4; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &Image::filled(2, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn zero_displacement_fills_first_bin() {
        let p = vec![[1.0, 2.0, 3.0]; 7];
        let s = displacement_stats(&p, &p, 1.0).unwrap();
        assert!(s.norms.iter().all(|&v| v == 0.0));
        assert_eq!(s.counts[0], 7);
        assert_eq!(s.counts.iter().sum::<usize>(), 7);
    }

    #[test]
    fn pythagorean_norm() {
        let s = displacement_stats(&[[0.0; 3]], &[[3.0, 4.0, 0.0]], 10.0).unwrap();
        assert_eq!(s.norms, vec![5.0]);
        assert_eq!(s.counts[HISTOGRAM_BINS - 1], 1);
        assert_eq!(s.median_fraction_of_diagonal(), 0.5);
        assert!(displacement_stats(&[[0.0; 3]], &[], 1.0).is_err());
    }

    #[test]
    fn viridis_endpoints() {
        assert_eq!(viridis(0.0), [0x44, 0x01, 0x54]);
        assert_eq!(viridis(1.0), [0xfd, 0xe7, 0x25]);
        assert_eq!(viridis(0.5), [0x21, 0x91, 0x8c]);
    }

    #[test]
    fn depth_quantization() {
        let d = DepthMap {
            width: 3,
            height: 1,
            depth: vec![2.0, 0.0, 4.0],
            alpha: vec![1.0, 0.0, 0.5],
        };
        assert_eq!(d.range(), (2.0, 4.0));
        assert_eq!(d.quantize16(), vec![1, 0, 65535]);
    }
}
