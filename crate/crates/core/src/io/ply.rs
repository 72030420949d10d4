//! ASCII PLY export for inspection in external viewers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::eval::viridis;
use crate::geometry::Point3;
use crate::refine::GaussianSet;
use crate::{Result, SagsError};

fn header(n: usize, props: &[&str]) -> String {
    let mut s = format!("ply\nformat ascii 1.0\nelement vertex {n}\n");
    for p in props {
        writeln!(s, "property {p}").expect("string write");
    }
    s.push_str("end_header\n");
    s
}

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).map_err(|e| SagsError::io(path, e))
}

/// Points with a scalar property, colored with viridis over `[min, max]` of the values.
pub fn scalar_ply(points: &[Point3], name: &str, values: &[f32]) -> Result<String> {
    if points.len() != values.len() {
        return Err(SagsError::Argument(format!("{} values for {} points", values.len(), points.len())));
    }
    let lo = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let props = [
        "float x",
        "float y",
        "float z",
        &format!("float {name}"),
        "uchar red",
        "uchar green",
        "uchar blue",
    ];
    let mut s = header(points.len(), &props);
    for (p, &v) in points.iter().zip(values) {
        let [r, g, b] = viridis(((v - lo) / span) as f64);
        writeln!(s, "{} {} {} {v} {r} {g} {b}", p[0], p[1], p[2]).expect("string write");
    }
    Ok(s)
}

pub fn write_curvature_ply(path: &Path, points: &[Point3], curvature: &[f32]) -> Result<()> {
    write(path, scalar_ply(points, "curvature", curvature)?)
}

pub fn write_displacement_ply(path: &Path, points: &[Point3], norms: &[f32]) -> Result<()> {
    write(path, scalar_ply(points, "displacement", norms)?)
}

pub fn gaussians_ply(set: &GaussianSet) -> String {
    let props = [
        "float x",
        "float y",
        "float z",
        "float scale_0",
        "float scale_1",
        "float scale_2",
        "float rot_0",
        "float rot_1",
        "float rot_2",
        "float rot_3",
        "float opacity",
        "uchar red",
        "uchar green",
        "uchar blue",
    ];
    let mut s = header(set.len(), &props);
    for i in 0..set.len() {
        let [x, y, z] = set.means[i];
        let [a, b, c] = set.scales[i];
        let [qw, qx, qy, qz] = set.rotations[i];
        let [r, g, bl] = set.colors[i].map(crate::imaging::quantize8);
        writeln!(s, "{x} {y} {z} {a} {b} {c} {qw} {qx} {qy} {qz} {} {r} {g} {bl}", set.opacities[i]).expect("string write");
    }
    s
}

pub fn write_gaussians_ply(path: &Path, set: &GaussianSet) -> Result<()> {
    write(path, gaussians_ply(set))
}
