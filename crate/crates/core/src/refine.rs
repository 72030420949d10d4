//! Decoding structural encodings into renderable Gaussian attributes.

use std::sync::Arc;

use rand::Rng;
use sags_tensor::{Activation, Mlp, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::geometry::Point3;
use crate::{Result, SagsError};

/// Renderable Gaussians, one row per primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<[f32; 3]>,
    pub scales: Vec<[f32; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f32; 4]>,
    pub opacities: Vec<f32>,
    pub colors: Vec<[f32; 3]>,
}

impl GaussianSet {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Checks every attribute range; returns the first offending row.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if [self.scales.len(), self.rotations.len(), self.opacities.len(), self.colors.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(SagsError::Contract("Gaussian attribute arrays differ in length".into()));
        }
        for i in 0..n {
            let bad = |what: &str| Err(SagsError::Contract(format!("Gaussian {i}: {what}")));
            if self.means[i].iter().any(|v| !v.is_finite()) {
                return bad("non-finite mean");
            }
            if self.scales[i].iter().any(|&s| !(s > 0.0)) {
                return bad("scale not positive");
            }
            let q = self.rotations[i];
            let norm = q.iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return bad("rotation not unit");
            }
            let a = self.opacities[i];
            if !(0.0..=1.0).contains(&a) {
                return bad("opacity outside [0, 1]");
            }
            if self.colors[i].iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("color outside [0, 1]");
            }
        }
        Ok(())
    }
}

/// Unit direction from the camera center to `p`.
pub fn view_relative_position(p: [f32; 3], center: [f32; 3]) -> [f32; 3] {
    let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
    let len = (d[0] as f64 * d[0] as f64 + d[1] as f64 * d[1] as f64 + d[2] as f64 * d[2] as f64).sqrt();
    if len < 1e-8 {
        log::warn!("point coincides with the camera center; view direction floored");
    }
    let len = len.max(1e-8);
    [(d[0] as f64 / len) as f32, (d[1] as f64 / len) as f32, (d[2] as f64 / len) as f32]
}

/// `N x 3` view directions for a set of anchors.
pub fn view_directions(anchors: &[Point3], center: [f32; 3]) -> Tensor {
    let data = anchors.iter().flat_map(|&p| view_relative_position(p, center)).collect();
    Tensor::new(anchors.len(), 3, data).expect("N x 3")
}

/// Mean of two feature rows.
pub fn lite_interpolate(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Extends `N` keypoint rows with one interpolated row per parent pair:
/// row `N + m` is the mean of rows `pairs[m].0` and `pairs[m].1`.
pub fn lite_expand(tape: &mut Tape, phi: Var, pairs: &[(u32, u32)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(phi);
    }
    let n = tape.value(phi).rows();
    let left: Vec<usize> = (0..n).chain(pairs.iter().map(|p| p.0 as usize)).collect();
    let right: Vec<usize> = (0..n).chain(pairs.iter().map(|p| p.1 as usize)).collect();
    let a = tape.gather_rows(phi, Arc::from(left))?;
    let b = tape.gather_rows(phi, Arc::from(right))?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Separate scale and rotation networks instead of one shared head.
    pub separate_scale_rotation: bool,
    pub init_opacity: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            separate_scale_rotation: false,
            init_opacity: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
enum ShapeHeads {
    Joint(Mlp),
    Separate { scale: Mlp, rotation: Mlp },
}

/// Attribute networks: color, opacity, scale/rotation and displacement.
#[derive(Clone, Debug)]
pub struct Decoders {
    config: DecoderConfig,
    feature_dim: usize,
    view_dependent: bool,
    color: Mlp,
    opacity: Mlp,
    shape: ShapeHeads,
    displacement: Mlp,
}

/// Tape handles of decoded attributes.
#[derive(Clone, Copy, Debug)]
pub struct AttributeVars {
    pub means: Var,
    pub scales: Var,
    pub rotations: Var,
    pub opacities: Var,
    pub colors: Var,
}

fn logit(p: f64) -> f32 {
    (p / (1.0 - p)).ln() as f32
}

impl Decoders {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        config: DecoderConfig,
        view_dependent: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !(config.init_opacity > 0.0 && config.init_opacity < 1.0) {
            return Err(SagsError::Config(format!("initial opacity must lie in (0, 1), got {}", config.init_opacity)));
        }
        let input = feature_dim + if view_dependent { 3 } else { 0 };
        let h = config.hidden;
        let mut make = |store: &mut ParamStore, name: &str, widths: &[usize]| -> Result<Mlp> {
            let mlp = Mlp::new(store, name, widths, Activation::Relu, rng)?;
            mlp.zero_last_layer(store);
            Ok(mlp)
        };
        let color = make(store, "color", &[input, h, 3])?;
        let opacity = make(store, "opacity", &[input, h, 1])?;
        let shape = if config.separate_scale_rotation {
            ShapeHeads::Separate {
                scale: make(store, "scale", &[input, h, 3])?,
                rotation: make(store, "rotation", &[input, h, 4])?,
            }
        } else {
            ShapeHeads::Joint(make(store, "shape", &[input, h, 7])?)
        };
        let displacement = make(store, "displacement", &[feature_dim, h, 3])?;
        Ok(Self {
            config,
            feature_dim,
            view_dependent,
            color,
            opacity,
            shape,
            displacement,
        })
    }

    pub fn from_store(store: &ParamStore, feature_dim: usize, config: DecoderConfig, view_dependent: bool) -> Result<Self> {
        let input = feature_dim + if view_dependent { 3 } else { 0 };
        let h = config.hidden;
        let load = |name: &str, widths: &[usize]| Mlp::from_store(store, name, widths, Activation::Relu);
        let shape = if config.separate_scale_rotation {
            ShapeHeads::Separate {
                scale: load("scale", &[input, h, 3])?,
                rotation: load("rotation", &[input, h, 4])?,
            }
        } else {
            ShapeHeads::Joint(load("shape", &[input, h, 7])?)
        };
        Ok(Self {
            config,
            feature_dim,
            view_dependent,
            color: load("color", &[input, h, 3])?,
            opacity: load("opacity", &[input, h, 1])?,
            shape,
            displacement: load("displacement", &[feature_dim, h, 3])?,
        })
    }

    pub fn view_dependent(&self) -> bool {
        self.view_dependent
    }

    pub fn color_mlp(&self) -> &Mlp {
        &self.color
    }

    pub fn displacement_mlp(&self) -> &Mlp {
        &self.displacement
    }

    pub fn mlps(&self) -> Vec<&Mlp> {
        let mut v = vec![&self.color, &self.opacity];
        match &self.shape {
            ShapeHeads::Joint(m) => v.push(m),
            ShapeHeads::Separate { scale, rotation } => {
                v.push(scale);
                v.push(rotation);
            }
        }
        v.push(&self.displacement);
        v
    }

    fn input(&self, tape: &mut Tape, phi: Var, view: Option<Var>) -> Result<Var> {
        let d = tape.value(phi).cols();
        if d != self.feature_dim {
            return Err(SagsError::Config(format!("decoder expects {} channels, got {d}", self.feature_dim)));
        }
        match (self.view_dependent, view) {
            (true, Some(v)) => Ok(tape.concat_cols(&[phi, v])?),
            (true, None) => Err(SagsError::Contract("view-dependent decoder needs view directions".into())),
            (false, _) => Ok(phi),
        }
    }

    /// Sigmoid-squashed RGB.
    pub fn decode_color(&self, tape: &mut Tape, store: &ParamStore, phi: Var, view: Option<Var>) -> Result<Var> {
        let x = self.input(tape, phi, view)?;
        let raw = self.color.forward(tape, store, x)?;
        Ok(tape.sigmoid(raw))
    }

    /// `(opacity, scale, rotation)`; `log_base_scale` is `N x 1`.
    pub fn decode_appearance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        phi: Var,
        view: Option<Var>,
        log_base_scale: &Tensor,
    ) -> Result<(Var, Var, Var)> {
        let x = self.input(tape, phi, view)?;
        let n = tape.value(x).rows();
        if log_base_scale.shape() != [n, 1] {
            return Err(SagsError::Contract(format!(
                "base scales have shape {:?}, expected [{n}, 1]",
                log_base_scale.shape()
            )));
        }
        let raw_alpha = self.opacity.forward(tape, store, x)?;
        let bias = Tensor::full(n, 1, logit(self.config.init_opacity));
        let raw_alpha = tape.add_const(raw_alpha, &bias)?;
        let alpha = tape.sigmoid(raw_alpha);

        let (raw_scale, raw_rot) = match &self.shape {
            ShapeHeads::Joint(m) => {
                let out = m.forward(tape, store, x)?;
                (tape.slice_cols(out, 0, 3)?, tape.slice_cols(out, 3, 7)?)
            }
            ShapeHeads::Separate { scale, rotation } => (scale.forward(tape, store, x)?, rotation.forward(tape, store, x)?),
        };
        let log_s0: Vec<f32> = log_base_scale.data().iter().flat_map(|&v| [v; 3]).collect();
        let raw_scale = tape.add_const(raw_scale, &Tensor::new(n, 3, log_s0)?)?;
        let scale = tape.exp(raw_scale);
        let identity: Vec<f32> = (0..n).flat_map(|_| [1.0, 0.0, 0.0, 0.0]).collect();
        let raw_rot = tape.add_const(raw_rot, &Tensor::new(n, 4, identity)?)?;
        let rot = tape.normalize_rows(raw_rot);
        Ok((alpha, scale, rot))
    }

    /// Camera-independent offset from the anchor.
    pub fn decode_displacement(&self, tape: &mut Tape, store: &ParamStore, phi: Var) -> Result<Var> {
        Ok(self.displacement.forward(tape, store, phi)?)
    }
}

/// Decodes every attribute for `anchors` (one row of `phi` each).
pub fn assemble_gaussians(
    tape: &mut Tape,
    store: &ParamStore,
    decoders: &Decoders,
    anchors: &[Point3],
    log_base_scale: &Tensor,
    phi: Var,
    camera_center: [f32; 3],
) -> Result<AttributeVars> {
    let n = anchors.len();
    if tape.value(phi).rows() != n {
        return Err(SagsError::Contract(format!(
            "{} encodings for {n} anchors",
            tape.value(phi).rows()
        )));
    }
    let view = decoders
        .view_dependent
        .then(|| tape.constant(view_directions(anchors, camera_center)));
    let colors = decoders.decode_color(tape, store, phi, view)?;
    let (opacities, scales, rotations) = decoders.decode_appearance(tape, store, phi, view, log_base_scale)?;
    let delta = decoders.decode_displacement(tape, store, phi)?;
    let base = Tensor::new(n, 3, anchors.iter().flatten().copied().collect())?;
    let means = tape.add_const(delta, &base)?;
    Ok(AttributeVars {
        means,
        scales,
        rotations,
        opacities,
        colors,
    })
}

fn rows<const K: usize>(t: &Tensor) -> Vec<[f32; K]> {
    t.data()
        .chunks_exact(K)
        .map(|c| std::array::from_fn(|i| c[i]))
        .collect()
}

impl AttributeVars {
    /// Reads the decoded values off the tape.
    pub fn to_set(&self, tape: &Tape) -> GaussianSet {
        GaussianSet {
            means: rows::<3>(tape.value(self.means)),
            scales: rows::<3>(tape.value(self.scales)),
            rotations: rows::<4>(tape.value(self.rotations)),
            opacities: tape.value(self.opacities).data().to_vec(),
            colors: rows::<3>(tape.value(self.colors)),
        }
    }
}
