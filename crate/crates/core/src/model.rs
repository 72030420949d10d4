//! The full learnable scene: anchors, feature bank, encoder and decoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sags_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{Aggregator, FeatureBank, GraphInputs, HashEncodingConfig, HashGrid, HashPlan, NeighborWeighting};
use crate::geometry::{self, Aabb, DensifiedCloud, Point3, ThresholdPolicy};
use crate::raster::{self, Camera, RenderOutput};
use crate::refine::{self, AttributeVars, DecoderConfig, Decoders, GaussianSet};
use crate::{Result, SagsError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Hidden width of the message network.
    pub hidden: usize,
    pub gnn_k: usize,
    pub densify_k: usize,
    pub curvature_k: usize,
    /// Neighbors averaged for the initial per-point scale.
    pub scale_k: usize,
    pub threshold: ThresholdPolicy,
    pub weighting: NeighborWeighting,
    pub hash: HashEncodingConfig,
    pub decoder: DecoderConfig,
    /// Store features for keypoints only and interpolate midpoints.
    pub lite: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden: 32,
            gnn_k: 8,
            densify_k: 3,
            curvature_k: 10,
            scale_k: 3,
            threshold: ThresholdPolicy::default(),
            weighting: NeighborWeighting::default(),
            hash: HashEncodingConfig::default(),
            decoder: DecoderConfig::default(),
            lite: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        if self.feature_dim == 0 || self.hidden == 0 || self.decoder.hidden == 0 {
            return Err(SagsError::Config("network widths must be positive".into()));
        }
        if self.gnn_k == 0 || self.densify_k == 0 || self.scale_k == 0 {
            return Err(SagsError::Config("neighbor counts must be positive".into()));
        }
        if self.curvature_k < 3 {
            return Err(SagsError::Config("curvature needs at least 3 neighbors".into()));
        }
        Ok(())
    }
}

/// Pipeline components; switching one off gives the matching ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub densification: bool,
    pub gnn: bool,
    pub positional_encoding: bool,
    pub global_feature: bool,
    pub view_dependent_positions: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            densification: true,
            gnn: true,
            positional_encoding: true,
            global_feature: true,
            view_dependent_positions: true,
        }
    }
}

impl Ablations {
    pub const FLAGS: [&'static str; 5] = [
        "densification",
        "gnn",
        "positional_encoding",
        "global_feature",
        "view_dependent_positions",
    ];

    /// Turns off the named component.
    pub fn disable(&mut self, flag: &str) -> Result<()> {
        let slot = match flag.replace('-', "_").as_str() {
            "densification" => &mut self.densification,
            "gnn" => &mut self.gnn,
            "positional_encoding" => &mut self.positional_encoding,
            "global_feature" => &mut self.global_feature,
            "view_dependent_positions" => &mut self.view_dependent_positions,
            other => {
                return Err(SagsError::Argument(format!(
                    "unknown ablation `{other}` (expected one of {})",
                    Self::FLAGS.join(", ")
                )))
            }
        };
        *slot = false;
        Ok(())
    }
}

/// Runs curvature estimation and densification as configured.
pub fn densify(points: &[Point3], config: &ModelConfig) -> Result<(DensifiedCloud, Vec<f32>)> {
    let n = points.len();
    if n <= 3 {
        return Ok((DensifiedCloud::identity(points), vec![0.0; n]));
    }
    let curvature = geometry::estimate_curvature(points, config.curvature_k.min(n - 1))?.values;
    let cloud = geometry::densify_curvature_aware(points, &curvature, config.threshold, config.densify_k.min(n - 1))?;
    Ok((cloud, curvature))
}

/// Mean distance to the `k` nearest neighbors of every point.
pub fn base_scales(points: &[Point3], k: usize) -> Result<Vec<f32>> {
    let n = points.len();
    if n < 2 {
        return Ok(vec![0.01; n]);
    }
    let g = geometry::build_knn_graph(points, k.min(n - 1))?;
    Ok((0..n).map(|i| g.mean_distance(i).max(1e-6)).collect())
}

#[derive(Clone, Debug)]
struct Derived {
    graph: Option<GraphInputs>,
    hash_plan: Option<HashPlan>,
    positions: Tensor,
    render_anchors: Vec<Point3>,
    log_base_scale: Tensor,
}

/// Learnable scene state.
#[derive(Clone, Debug)]
pub struct SagsModel {
    pub(crate) config: ModelConfig,
    pub(crate) ablations: Ablations,
    pub(crate) seed: u64,
    pub(crate) store: ParamStore,
    pub(crate) bounds: Aabb,
    pub(crate) hash: Option<HashGrid>,
    pub(crate) features: FeatureBank,
    pub(crate) aggregator: Aggregator,
    pub(crate) decoders: Decoders,
    /// Stored points (all points in full mode, keypoints in Lite mode).
    pub(crate) anchors: Vec<Point3>,
    pub(crate) base_scale: Vec<f32>,
    /// Index into the initial cloud, `None` for grown points.
    pub(crate) origin: Vec<Option<u32>>,
    /// Lite midpoints as pairs of stored-point indices.
    pub(crate) pairs: Vec<(u32, u32)>,
    derived: Derived,
}

/// A recorded forward pass for one camera center.
pub struct Forward {
    pub tape: Tape,
    pub attrs: AttributeVars,
    pub gaussians: GaussianSet,
}

impl SagsModel {
    /// Densifies (unless ablated) and initializes every parameter from `seed`.
    pub fn from_points(points: &[Point3], config: &ModelConfig, ablations: Ablations, seed: u64) -> Result<Self> {
        config.validate()?;
        if points.is_empty() {
            return Err(SagsError::Argument("cannot build a model from an empty point cloud".into()));
        }
        let cloud = if ablations.densification {
            densify(points, config)?.0
        } else {
            DensifiedCloud::identity(points)
        };
        Self::from_densified(&cloud, config, ablations, seed)
    }

    pub fn from_densified(cloud: &DensifiedCloud, config: &ModelConfig, ablations: Ablations, seed: u64) -> Result<Self> {
        config.validate()?;
        let bounds = Aabb::of(&cloud.points)
            .ok_or_else(|| SagsError::Argument("empty cloud".into()))?
            .padded(0.05);
        let scales = base_scales(&cloud.points, config.scale_k)?;
        let (anchors, base_scale, origin, pairs) = if config.lite {
            let n = cloud.keypoints;
            (
                cloud.points[..n].to_vec(),
                scales[..n].to_vec(),
                (0..n as u32).map(Some).collect(),
                cloud.parents.clone(),
            )
        } else {
            let n = cloud.points.len();
            (cloud.points.clone(), scales, (0..n as u32).map(Some).collect(), Vec::new())
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hash = if ablations.positional_encoding {
            Some(HashGrid::new(&mut store, config.hash, bounds, &mut rng)?)
        } else {
            None
        };
        let pos_dim = hash.as_ref().map_or(3, |h| h.output_dim());
        FeatureBank::new(&mut store, anchors.len(), config.feature_dim, &mut rng);
        Aggregator::new(
            &mut store,
            pos_dim,
            config.feature_dim,
            config.hidden,
            ablations.global_feature,
            &mut rng,
        )?;
        Decoders::new(
            &mut store,
            config.feature_dim,
            config.decoder,
            ablations.view_dependent_positions,
            &mut rng,
        )?;
        Self::assemble(
            config.clone(),
            ablations,
            seed,
            store,
            bounds,
            anchors,
            base_scale,
            origin,
            pairs,
        )
    }

    /// Rebuilds network handles from parameters already in `store`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        config: ModelConfig,
        ablations: Ablations,
        seed: u64,
        store: ParamStore,
        bounds: Aabb,
        anchors: Vec<Point3>,
        base_scale: Vec<f32>,
        origin: Vec<Option<u32>>,
        pairs: Vec<(u32, u32)>,
    ) -> Result<Self> {
        let hash = if ablations.positional_encoding {
            Some(HashGrid::from_store(&store, config.hash, bounds)?)
        } else {
            None
        };
        let pos_dim = hash.as_ref().map_or(3, |h| h.output_dim());
        let features = FeatureBank::from_store(&store)?;
        let widths = Aggregator::widths(pos_dim, config.feature_dim, config.hidden, ablations.global_feature);
        let mlp = sags_tensor::Mlp::from_store(&store, Aggregator::NAME, &widths, sags_tensor::Activation::Relu)?;
        let aggregator = Aggregator::from_mlp(mlp, pos_dim, config.feature_dim, ablations.global_feature)?;
        let decoders = Decoders::from_store(&store, config.feature_dim, config.decoder, ablations.view_dependent_positions)?;
        let n = anchors.len();
        if features.len(&store) != n || base_scale.len() != n || origin.len() != n {
            return Err(SagsError::Contract(format!(
                "inconsistent point state: {n} anchors, {} feature rows, {} scales, {} provenance entries",
                features.len(&store),
                base_scale.len(),
                origin.len()
            )));
        }
        if n == 0 {
            return Err(SagsError::Contract("model has no points".into()));
        }
        if pairs.iter().any(|&(a, b)| a as usize >= n || b as usize >= n) {
            return Err(SagsError::Contract("midpoint parent index out of range".into()));
        }
        let mut model = Self {
            config,
            ablations,
            seed,
            store,
            bounds,
            hash,
            features,
            aggregator,
            decoders,
            anchors,
            base_scale,
            origin,
            pairs,
            derived: Derived {
                graph: None,
                hash_plan: None,
                positions: Tensor::zeros(0, 3),
                render_anchors: Vec::new(),
                log_base_scale: Tensor::zeros(0, 1),
            },
        };
        model.rebuild()?;
        Ok(model)
    }

    /// Recomputes graph, lookups and midpoint positions after the point set changed.
    pub(crate) fn rebuild(&mut self) -> Result<()> {
        let n = self.anchors.len();
        let graph = if self.ablations.gnn && n >= 2 {
            let g = geometry::build_knn_graph(&self.anchors, self.config.gnn_k.min(n - 1))?;
            Some(GraphInputs::new(&g, self.config.weighting))
        } else {
            None
        };
        let hash_plan = self.hash.as_ref().map(|h| h.plan(&self.anchors));
        let positions = Tensor::new(n, 3, self.anchors.iter().flat_map(|p| unit_position(&self.bounds, p)).collect())?;
        let mut render_anchors = self.anchors.clone();
        let mut scales = self.base_scale.clone();
        for &(a, b) in &self.pairs {
            let (a, b) = (a as usize, b as usize);
            render_anchors.push(geometry::midpoint(&self.anchors[a], &self.anchors[b]));
            scales.push(0.5 * (self.base_scale[a] + self.base_scale[b]));
        }
        let log_base_scale = Tensor::new(scales.len(), 1, scales.iter().map(|s| s.ln()).collect())?;
        self.derived = Derived {
            graph,
            hash_plan,
            positions,
            render_anchors,
            log_base_scale,
        };
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablations(&self) -> Ablations {
        self.ablations
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_lite(&self) -> bool {
        self.config.lite
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn feature_id(&self) -> ParamId {
        self.features.id
    }

    pub fn hash_table_id(&self) -> Option<ParamId> {
        self.hash.as_ref().map(|h| h.table())
    }

    /// Parameters of the message network and every decoder head.
    pub fn mlp_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.aggregator.mlp().param_ids();
        for m in self.decoders.mlps() {
            ids.extend(m.param_ids());
        }
        ids
    }

    pub fn decoders(&self) -> &Decoders {
        &self.decoders
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Number of stored points (feature rows).
    pub fn stored_points(&self) -> usize {
        self.anchors.len()
    }

    /// Number of rendered Gaussians.
    pub fn rendered_points(&self) -> usize {
        self.derived.render_anchors.len()
    }

    pub fn anchors(&self) -> &[Point3] {
        &self.anchors
    }

    /// Anchor of every rendered Gaussian (stored points, then midpoints).
    pub fn render_anchors(&self) -> &[Point3] {
        &self.derived.render_anchors
    }

    pub fn base_scales(&self) -> &[f32] {
        &self.base_scale
    }

    pub fn origins(&self) -> &[Option<u32>] {
        &self.origin
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    /// Whether each rendered Gaussian existed at initialization.
    pub fn rendered_is_original(&self) -> Vec<bool> {
        let mut v: Vec<bool> = self.origin.iter().map(|o| o.is_some()).collect();
        v.extend(
            self.pairs
                .iter()
                .map(|&(a, b)| self.origin[a as usize].is_some() && self.origin[b as usize].is_some()),
        );
        v
    }

    /// Structural encodings of the stored points.
    pub fn encode(&self, tape: &mut Tape) -> Result<Var> {
        let pos = match (&self.hash, &self.derived.hash_plan) {
            (Some(h), Some(plan)) => h.encode(tape, &self.store, plan)?,
            _ => tape.constant(self.derived.positions.clone()),
        };
        let feats = tape.param(&self.store, self.features.id);
        match &self.derived.graph {
            Some(g) => self.aggregator.aggregate(tape, &self.store, g, pos, feats),
            None => self.aggregator.per_point(tape, &self.store, pos, feats),
        }
    }

    pub fn forward(&self, camera_center: [f32; 3]) -> Result<Forward> {
        let mut tape = Tape::new();
        let phi = self.encode(&mut tape)?;
        let phi = refine::lite_expand(&mut tape, phi, &self.pairs)?;
        let attrs = refine::assemble_gaussians(
            &mut tape,
            &self.store,
            &self.decoders,
            &self.derived.render_anchors,
            &self.derived.log_base_scale,
            phi,
            camera_center,
        )?;
        let gaussians = attrs.to_set(&tape);
        Ok(Forward { tape, attrs, gaussians })
    }

    pub fn gaussians(&self, camera: &Camera) -> Result<GaussianSet> {
        Ok(self.forward(camera.center())?.gaussians)
    }

    /// Camera-independent Gaussian means.
    pub fn means(&self) -> Result<Vec<Point3>> {
        let mut tape = Tape::new();
        let phi = self.encode(&mut tape)?;
        let phi = refine::lite_expand(&mut tape, phi, &self.pairs)?;
        let delta = self.decoders.decode_displacement(&mut tape, &self.store, phi)?;
        let d = tape.value(delta);
        Ok(self
            .derived
            .render_anchors
            .iter()
            .enumerate()
            .map(|(i, p)| [p[0] + d.get(i, 0), p[1] + d.get(i, 1), p[2] + d.get(i, 2)])
            .collect())
    }

    pub fn render(&self, camera: &Camera, background: [f32; 3]) -> Result<RenderOutput> {
        let set = self.gaussians(camera)?;
        Ok(raster::rasterize(&set, camera, background)?.0)
    }

    /// Applies a grow/prune decision.
    ///
    /// `keep` masks stored points, `keep_pairs` masks Lite midpoints (pairs
    /// with a removed parent are dropped as well) and `clones` lists
    /// `(parent, new anchor)` for grown points. Returns, for every new
    /// feature row, the old row it continues (`None` for clones).
    pub fn update_points(&mut self, keep: &[bool], keep_pairs: &[bool], clones: &[(usize, Point3)]) -> Result<Vec<Option<usize>>> {
        let n = self.anchors.len();
        if keep.len() != n || keep_pairs.len() != self.pairs.len() {
            return Err(SagsError::Contract("grow/prune masks do not match the point count".into()));
        }
        let mut new_index = vec![None; n];
        let mut sources = Vec::new();
        for i in (0..n).filter(|&i| keep[i]) {
            new_index[i] = Some(sources.len() as u32);
            sources.push(Some(i));
        }
        if sources.is_empty() {
            return Err(SagsError::Contract("pruning would remove every point".into()));
        }
        let feats = self.store.get(self.features.id).clone();
        let d = feats.cols();
        let mut data = Vec::with_capacity((sources.len() + clones.len()) * d);
        let mut anchors = Vec::with_capacity(sources.len() + clones.len());
        let mut scales = Vec::with_capacity(anchors.capacity());
        let mut origin = Vec::with_capacity(anchors.capacity());
        for i in sources.iter().flatten().copied() {
            data.extend_from_slice(feats.row_slice(i));
            anchors.push(self.anchors[i]);
            scales.push(self.base_scale[i]);
            origin.push(self.origin[i]);
        }
        for &(parent, anchor) in clones {
            if parent >= n {
                return Err(SagsError::Contract(format!("clone parent {parent} out of range")));
            }
            data.extend_from_slice(feats.row_slice(parent));
            anchors.push(anchor);
            scales.push(self.base_scale[parent]);
            origin.push(None);
            sources.push(None);
        }
        let pairs = self
            .pairs
            .iter()
            .zip(keep_pairs)
            .filter(|(_, &k)| k)
            .filter_map(|(&(a, b), _)| Some((new_index[a as usize]?, new_index[b as usize]?)))
            .collect();
        self.store
            .replace(self.features.id, Tensor::new(anchors.len(), d, data)?.with_requires_grad(true));
        self.anchors = anchors;
        self.base_scale = scales;
        self.origin = origin;
        self.pairs = pairs;
        self.rebuild()?;
        Ok(sources)
    }
}

fn unit_position(bounds: &Aabb, p: &Point3) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for a in 0..3 {
        let ext = (bounds.max[a] - bounds.min[a]).max(1e-12);
        out[a] = ((p[a] - bounds.min[a]) / ext).clamp(0.0, 1.0);
    }
    out
}
