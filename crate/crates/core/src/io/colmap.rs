//! COLMAP text exports: `cameras.txt`, `images.txt`, `points3D.txt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::geometry::PointCloud;
use crate::imaging::Image;
use crate::raster::Camera;
use crate::{Result, SagsError};

use super::{SceneBundle, TestSplit};

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    /// `(fx, fy, cx, cy)` for the supported pinhole models.
    pub fn intrinsics(&self) -> [f64; 4] {
        match self.model.as_str() {
            "SIMPLE_PINHOLE" => [self.params[0], self.params[0], self.params[1], self.params[2]],
            _ => [self.params[0], self.params[1], self.params[2], self.params[3]],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation `(w, x, y, z)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
}

impl ColmapImage {
    pub fn rotation(&self) -> Matrix3<f64> {
        let [w, x, y, z] = self.qvec;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
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

    /// `-R^T t`.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation().transpose() * Vector3::from(self.tvec));
        [c[0], c[1], c[2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapScene {
    pub cameras: Vec<ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| SagsError::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, tokens: &[&str], i: usize, what: &str) -> Result<T> {
    let tok = tokens.get(i).ok_or_else(|| SagsError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| SagsError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("invalid {what} `{tok}`"),
    })
}

fn is_skipped(line: &str) -> bool {
    let t = line.trim();
    t.is_empty() || t.starts_with('#')
}

pub fn parse_cameras(path: &Path) -> Result<Vec<ColmapCamera>> {
    let mut out = Vec::new();
    for (n, line) in read_lines(path)?.iter().enumerate() {
        if is_skipped(line) {
            continue;
        }
        let ln = n + 1;
        let t: Vec<&str> = line.split_whitespace().collect();
        let model = t.get(1).copied().unwrap_or_default().to_string();
        let n_params = match model.as_str() {
            "PINHOLE" => 4,
            "SIMPLE_PINHOLE" => 3,
            _ => return Err(SagsError::UnsupportedCameraModel(model)),
        };
        let params = (0..n_params)
            .map(|i| field::<f64>(path, ln, &t, 4 + i, "camera parameter"))
            .collect::<Result<Vec<_>>>()?;
        if t.len() != 4 + n_params {
            return Err(SagsError::Parse {
                path: path.to_path_buf(),
                line: ln,
                message: format!("{model} expects {n_params} parameters, found {}", t.len().saturating_sub(4)),
            });
        }
        out.push(ColmapCamera {
            id: field(path, ln, &t, 0, "camera id")?,
            model,
            width: field(path, ln, &t, 2, "width")?,
            height: field(path, ln, &t, 3, "height")?,
            params,
        });
    }
    Ok(out)
}

/// Every image occupies two lines; the second (2D observations) may be empty
/// and is ignored.
pub fn parse_images(path: &Path) -> Result<Vec<ColmapImage>> {
    let lines = read_lines(path)?;
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if is_skipped(&lines[i]) {
            i += 1;
            continue;
        }
        let ln = i + 1;
        let t: Vec<&str> = lines[i].split_whitespace().collect();
        if t.len() < 10 {
            return Err(SagsError::Parse {
                path: path.to_path_buf(),
                line: ln,
                message: format!("image record needs 10 fields, found {}", t.len()),
            });
        }
        let f = |k: usize, what: &str| field::<f64>(path, ln, &t, k, what);
        out.push(ColmapImage {
            id: field(path, ln, &t, 0, "image id")?,
            qvec: [f(1, "qw")?, f(2, "qx")?, f(3, "qy")?, f(4, "qz")?],
            tvec: [f(5, "tx")?, f(6, "ty")?, f(7, "tz")?],
            camera_id: field(path, ln, &t, 8, "camera id")?,
            name: t[9..].join(" "),
        });
        i += 2;
    }
    Ok(out)
}

pub fn parse_points(path: &Path) -> Result<Vec<ColmapPoint>> {
    let mut out = Vec::new();
    for (n, line) in read_lines(path)?.iter().enumerate() {
        if is_skipped(line) {
            continue;
        }
        let ln = n + 1;
        let t: Vec<&str> = line.split_whitespace().collect();
        out.push(ColmapPoint {
            id: field(path, ln, &t, 0, "point id")?,
            xyz: [
                field(path, ln, &t, 1, "x")?,
                field(path, ln, &t, 2, "y")?,
                field(path, ln, &t, 3, "z")?,
            ],
            rgb: [
                field(path, ln, &t, 4, "red")?,
                field(path, ln, &t, 5, "green")?,
                field(path, ln, &t, 6, "blue")?,
            ],
            error: field(path, ln, &t, 7, "reprojection error")?,
        });
    }
    Ok(out)
}

/// Locates the text model in `dir` or `dir/sparse/0`.
pub fn find_model_dir(dir: &Path) -> Result<PathBuf> {
    for cand in [dir.to_path_buf(), dir.join("sparse").join("0"), dir.join("sparse")] {
        if cand.join("cameras.txt").is_file() {
            return Ok(cand);
        }
    }
    Err(SagsError::io(
        dir.join("cameras.txt"),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no COLMAP text model found"),
    ))
}

pub fn read_colmap_text(dir: &Path) -> Result<ColmapScene> {
    let model = find_model_dir(dir)?;
    Ok(ColmapScene {
        cameras: parse_cameras(&model.join("cameras.txt"))?,
        images: parse_images(&model.join("images.txt"))?,
        points: parse_points(&model.join("points3D.txt"))?,
    })
}

/// Writes the three text files; `Display` for `f64` is round-trip exact.
pub fn write_colmap_text(scene: &ColmapScene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SagsError::io(dir, e))?;
    let mut cams = String::from("# CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in &scene.cameras {
        write!(cams, "{} {} {} {}", c.id, c.model, c.width, c.height).expect("string write");
        for p in &c.params {
            write!(cams, " {p}").expect("string write");
        }
        cams.push('\n');
    }
    let mut imgs = String::from("# IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n");
    for im in &scene.images {
        let [qw, qx, qy, qz] = im.qvec;
        let [tx, ty, tz] = im.tvec;
        writeln!(imgs, "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}\n", im.id, im.camera_id, im.name).expect("string write");
    }
    let mut pts = String::from("# POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n");
    for p in &scene.points {
        let [x, y, z] = p.xyz;
        let [r, g, b] = p.rgb;
        writeln!(pts, "{} {x} {y} {z} {r} {g} {b} {}", p.id, p.error).expect("string write");
    }
    for (name, body) in [("cameras.txt", cams), ("images.txt", imgs), ("points3D.txt", pts)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| SagsError::io(&path, e))?;
    }
    Ok(())
}

/// Pinhole camera for an image record, with intrinsics rescaled when the
/// image on disk has a different resolution than the calibration.
pub fn camera_for(cam: &ColmapCamera, image: &ColmapImage, width: usize, height: usize) -> Result<Camera> {
    let [fx, fy, cx, cy] = cam.intrinsics();
    let sx = width as f64 / cam.width as f64;
    let sy = height as f64 / cam.height as f64;
    let rotation = rotation_f32(image.qvec);
    Camera::new(
        (fx * sx) as f32,
        (fy * sy) as f32,
        (cx * sx) as f32,
        (cy * sy) as f32,
        rotation,
        image.tvec.map(|v| v as f32),
        width,
        height,
    )
}

fn image_path(root: &Path, name: &str) -> PathBuf {
    let under = root.join("images").join(name);
    if under.is_file() {
        under
    } else {
        root.join(name)
    }
}

/// Parses a COLMAP text scene with the default every-8th-view test split.
pub fn parse_colmap_scene(dir: &Path) -> Result<SceneBundle> {
    parse_colmap_scene_with(dir, TestSplit::default())
}

pub fn parse_colmap_scene_with(dir: &Path, split: TestSplit) -> Result<SceneBundle> {
    let scene = read_colmap_text(dir)?;
    bundle_from_colmap(&scene, dir, split)
}

/// Images are ordered by file name; images are looked up in `root/images`
/// first, then in `root`.
pub fn bundle_from_colmap(scene: &ColmapScene, root: &Path, split: TestSplit) -> Result<SceneBundle> {
    if scene.points.is_empty() {
        return Err(SagsError::Argument("points3D.txt contains no points".into()));
    }
    let positions = scene.points.iter().map(|p| p.xyz.map(|v| v as f32)).collect();
    let colors = scene.points.iter().map(|p| p.rgb.map(|c| c as f32 / 255.0)).collect();
    let points = PointCloud::new(positions)?.with_colors(colors)?;

    let mut order: Vec<&ColmapImage> = scene.images.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    let mut cameras = Vec::with_capacity(order.len());
    let mut images = Vec::with_capacity(order.len());
    let mut names = Vec::with_capacity(order.len());
    for rec in order {
        let cam = scene
            .cameras
            .iter()
            .find(|c| c.id == rec.camera_id)
            .ok_or_else(|| SagsError::Argument(format!("image `{}` references unknown camera {}", rec.name, rec.camera_id)))?;
        let img = Image::load_png(&image_path(root, &rec.name))?;
        cameras.push(camera_for(cam, rec, img.width(), img.height())?);
        images.push(img);
        names.push(rec.name.clone());
    }
    let (train, test) = split.indices(names.len());
    let bundle = SceneBundle {
        points,
        cameras,
        images,
        names,
        train,
        test,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Rotation as stored in a [`Camera`]; quaternion round-off leaves ~1e-16
/// residue where entries are exactly zero, which is snapped away.
fn rotation_f32(qvec: [f64; 4]) -> [[f32; 3]; 3] {
    let probe = ColmapImage {
        id: 0,
        qvec,
        tvec: [0.0; 3],
        camera_id: 0,
        name: String::new(),
    };
    let r = probe.rotation();
    std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let x = r[(i, j)];
            if x.abs() < 1e-9 {
                0.0
            } else {
                x as f32
            }
        })
    })
}

/// Quaternion whose parsed rotation reproduces the camera's f32 matrix
/// exactly when one exists near the direct conversion, so that writing and
/// re-reading a scene is a fixed point.
fn stable_qvec(c: &Camera) -> [f64; 4] {
    let m = c.rotation_matrix().cast::<f64>();
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m));
    let q = if q.w < 0.0 { -*q.quaternion() } else { *q.quaternion() };
    let base = [q.w, q.i, q.j, q.k];
    let eps = 2f64.powi(-26);
    let offsets = [0.0, -eps, eps, -2.0 * eps, 2.0 * eps];
    for a in offsets {
        for b in offsets {
            for d in offsets {
                for e in offsets {
                    let cand = [base[0] + a, base[1] + b, base[2] + d, base[3] + e];
                    if rotation_f32(cand) == c.rotation {
                        return cand;
                    }
                }
            }
        }
    }
    base
}

/// COLMAP records for a bundle (one PINHOLE camera per view).
pub fn colmap_from_bundle(bundle: &SceneBundle) -> ColmapScene {
    let cameras = bundle
        .cameras
        .iter()
        .enumerate()
        .map(|(i, c)| ColmapCamera {
            id: i as u32 + 1,
            model: "PINHOLE".into(),
            width: c.width,
            height: c.height,
            params: vec![c.fx as f64, c.fy as f64, c.cx as f64, c.cy as f64],
        })
        .collect();
    let images = bundle
        .cameras
        .iter()
        .zip(&bundle.names)
        .enumerate()
        .map(|(i, (c, name))| {
            ColmapImage {
                id: i as u32 + 1,
                qvec: stable_qvec(c),
                tvec: c.translation.map(|v| v as f64),
                camera_id: i as u32 + 1,
                name: name.clone(),
            }
        })
        .collect();
    let colors = bundle.points.colors().map(<[_]>::to_vec);
    let points = bundle
        .points
        .positions()
        .iter()
        .enumerate()
        .map(|(i, p)| ColmapPoint {
            id: i as u64 + 1,
            xyz: p.map(|v| v as f64),
            rgb: colors.as_ref().map_or([128; 3], |c| c[i].map(crate::imaging::quantize8)),
            error: 0.0,
        })
        .collect();
    ColmapScene { cameras, images, points }
}

/// Writes the text model and the images as PNG under `dir/images`.
pub fn write_bundle(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    write_colmap_text(&colmap_from_bundle(bundle), dir)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| SagsError::io(&img_dir, e))?;
    for (img, name) in bundle.images.iter().zip(&bundle.names) {
        img.save_png(&img_dir.join(name))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn point_line_fields() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "points3D.txt", "# header\n7 1.0 2.0 3.0 255 0 0 0.5 1 2 3 4\n");
        let p = parse_points(&dir.path().join("points3D.txt")).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].id, 7);
        assert_eq!(p[0].xyz, [1.0, 2.0, 3.0]);
        assert_eq!(p[0].rgb, [255, 0, 0]);
    }

    #[test]
    fn pinhole_fields_and_unsupported_model() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "cameras.txt", "1 PINHOLE 640 480 500 500 320 240\n2 SIMPLE_PINHOLE 100 80 90 50 40\n");
        let c = parse_cameras(&dir.path().join("cameras.txt")).unwrap();
        assert_eq!(c[0].intrinsics(), [500.0, 500.0, 320.0, 240.0]);
        assert_eq!((c[0].width, c[0].height), (640, 480));
        assert_eq!(c[1].intrinsics(), [90.0, 90.0, 50.0, 40.0]);

        write(dir.path(), "cameras.txt", "1 OPENCV 640 480 500 500 320 240 0 0 0 0\n");
        match parse_cameras(&dir.path().join("cameras.txt")) {
            Err(SagsError::UnsupportedCameraModel(m)) => assert_eq!(m, "OPENCV"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identity_pose_centers_at_origin() {
        let im = ColmapImage {
            id: 1,
            qvec: [1.0, 0.0, 0.0, 0.0],
            tvec: [0.0; 3],
            camera_id: 1,
            name: "a.png".into(),
        };
        assert_eq!(im.center(), [0.0; 3]);
        let t = ColmapImage {
            tvec: [1.0, 2.0, 3.0],
            ..im
        };
        assert_eq!(t.center(), [-1.0, -2.0, -3.0]);
    }

    #[test]
    fn images_with_empty_observation_lines() {
        let dir = tempfile::tempdir().unwrap();
        write(
            dir.path(),
            "images.txt",
            "# c\n# c\n1 1 0 0 0 0 0 0 1 a.png\n\n2 1 0 0 0 1 0 0 1 b.png\n1.0 2.0 -1\n3 1 0 0 0 2 0 0 1 c.png\n\n",
        );
        let ims = parse_images(&dir.path().join("images.txt")).unwrap();
        let names: Vec<_> = ims.iter().map(|i| i.name.as_str()).collect();
        assert_eq!(names, ["a.png", "b.png", "c.png"]);
        assert_eq!(ims[2].tvec, [2.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_number_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "points3D.txt", "\n1 0 0 0 1 2 3 0\n2 0 x 0 1 2 3 0\n");
        match parse_points(&dir.path().join("points3D.txt")) {
            Err(SagsError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
