//! Multi-resolution hash encoding, per-point feature bank and the weighted
//! k-NN graph aggregation producing structural encodings.

use std::sync::Arc;

use rand::Rng;
use sags_tensor::{Activation, Mlp, ParamId, ParamStore, SparseGatherPlan, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, KnnGraph, Point3};
use crate::{Result, SagsError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashEncodingConfig {
    pub levels: usize,
    pub table_size: usize,
    pub features_per_level: usize,
    pub base_resolution: usize,
    pub growth: f64,
}

impl Default for HashEncodingConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            table_size: 1 << 14,
            features_per_level: 2,
            base_resolution: 16,
            growth: 1.5,
        }
    }
}

impl HashEncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(SagsError::Config("hash encoding needs positive levels, features and resolution".into()));
        }
        if !self.table_size.is_power_of_two() {
            return Err(SagsError::Config(format!("hash table size {} is not a power of two", self.table_size)));
        }
        if !(self.growth > 1.0) {
            return Err(SagsError::Config(format!("hash growth factor must exceed 1, got {}", self.growth)));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }
}

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Learnable hash-grid tables and the box used to normalize positions.
#[derive(Clone, Debug)]
pub struct HashGrid {
    config: HashEncodingConfig,
    bounds: Aabb,
    table: ParamId,
}

/// Precomputed lookup for a fixed point set.
#[derive(Clone, Debug)]
pub struct HashPlan {
    pub plan: Arc<SparseGatherPlan>,
    /// Points that fell outside the bounds and were clamped.
    pub clamped: usize,
}

impl HashGrid {
    pub const TABLE_NAME: &'static str = "hash.table";

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: HashEncodingConfig, bounds: Aabb, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let rows = config.levels * config.table_size;
        let table = store.add(
            Self::TABLE_NAME,
            Tensor::uniform(rows, config.features_per_level, -1e-4, 1e-4, rng),
        );
        Ok(Self { config, bounds, table })
    }

    pub fn from_store(store: &ParamStore, config: HashEncodingConfig, bounds: Aabb) -> Result<Self> {
        config.validate()?;
        let table = store
            .find(Self::TABLE_NAME)
            .ok_or_else(|| SagsError::Config("hash table missing from parameter store".into()))?;
        let expected = [config.levels * config.table_size, config.features_per_level];
        if store.get(table).shape() != expected {
            return Err(SagsError::Config(format!(
                "hash table has shape {:?}, config implies {:?}",
                store.get(table).shape(),
                expected
            )));
        }
        Ok(Self { config, bounds, table })
    }

    pub fn config(&self) -> &HashEncodingConfig {
        &self.config
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn table(&self) -> ParamId {
        self.table
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Maps a point into the unit cube, reporting whether it was clamped.
    pub fn normalize(&self, p: &Point3) -> ([f32; 3], bool) {
        let mut out = [0.0f32; 3];
        let mut clamped = false;
        for a in 0..3 {
            let ext = (self.bounds.max[a] - self.bounds.min[a]).max(1e-12);
            let u = (p[a] - self.bounds.min[a]) / ext;
            clamped |= !(0.0..=1.0).contains(&u);
            out[a] = u.clamp(0.0, 1.0);
        }
        (out, clamped)
    }

    fn vertex_index(&self, level: usize, res: usize, v: [usize; 3]) -> u32 {
        let t = self.config.table_size;
        let side = res + 1;
        let local = if side.pow(3) <= t {
            v[0] + side * (v[1] + side * v[2])
        } else {
            let h = (v[0] as u32).wrapping_mul(PRIMES[0])
                ^ (v[1] as u32).wrapping_mul(PRIMES[1])
                ^ (v[2] as u32).wrapping_mul(PRIMES[2]);
            (h as usize) & (t - 1)
        };
        (level * t + local) as u32
    }

    pub fn plan(&self, points: &[Point3]) -> HashPlan {
        let levels = self.config.levels;
        let mut indices = Vec::with_capacity(points.len() * levels * 8);
        let mut weights = Vec::with_capacity(points.len() * levels * 8);
        let mut clamped = 0;
        for p in points {
            let (u, c) = self.normalize(p);
            clamped += c as usize;
            for level in 0..levels {
                let res = self.config.resolution(level);
                let mut base = [0usize; 3];
                let mut frac = [0.0f32; 3];
                for a in 0..3 {
                    let x = u[a] * res as f32;
                    let cell = (x.floor() as usize).min(res - 1);
                    base[a] = cell;
                    frac[a] = x - cell as f32;
                }
                for corner in 0..8 {
                    let mut v = base;
                    let mut w = 1.0f32;
                    for a in 0..3 {
                        if corner >> a & 1 == 1 {
                            v[a] += 1;
                            w *= frac[a];
                        } else {
                            w *= 1.0 - frac[a];
                        }
                    }
                    indices.push(self.vertex_index(level, res, v));
                    weights.push(w);
                }
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} points outside the hash-grid bounds were clamped");
        }
        HashPlan {
            plan: Arc::new(SparseGatherPlan {
                rows: points.len(),
                groups: levels,
                taps: 8,
                indices,
                weights,
            }),
            clamped,
        }
    }

    /// `N x (L*F)` encoding of the planned points.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, plan: &HashPlan) -> Result<Var> {
        let table = tape.param(store, self.table);
        Ok(tape.sparse_gather(table, plan.plan.clone())?)
    }
}

/// Encodes `points` without recording gradients.
pub fn hash_encode(grid: &HashGrid, store: &ParamStore, points: &[Point3]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let plan = grid.plan(points);
    let v = grid.encode(&mut tape, store, &plan)?;
    Ok(tape.value(v).clone())
}

pub const DISTANCE_FLOOR: f32 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborWeighting {
    /// Softmax over inverse distances.
    #[default]
    Softmax,
    /// Inverse distances divided by their sum.
    NormalizedInverse,
}

/// Row weights for one point's neighbor distances, plus the number of
/// distances that had to be floored.
pub fn inverse_distance_weights(distances: &[f32], scheme: NeighborWeighting) -> (Vec<f32>, usize) {
    let floored = distances.iter().filter(|&&d| d < DISTANCE_FLOOR).count();
    let inv: Vec<f64> = distances.iter().map(|&d| 1.0 / d.max(DISTANCE_FLOOR) as f64).collect();
    let w: Vec<f64> = match scheme {
        NeighborWeighting::Softmax => {
            let max = inv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            inv.iter().map(|&x| (x - max).exp()).collect()
        }
        NeighborWeighting::NormalizedInverse => inv,
    };
    let total: f64 = w.iter().sum();
    (w.iter().map(|&x| (x / total) as f32).collect(), floored)
}

/// Flattened graph indexing used by [`Aggregator::aggregate`].
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub k: usize,
    /// Neighbor `j` of each edge, row-major over `(i, slot)`.
    pub neighbors: Arc<[usize]>,
    /// Center `i` of each edge.
    pub centers: Arc<[usize]>,
    pub weights: Arc<[f32]>,
}

impl GraphInputs {
    pub fn new(graph: &KnnGraph, scheme: NeighborWeighting) -> Self {
        let k = graph.k();
        let n = graph.len();
        let neighbors: Vec<usize> = graph.indices().iter().map(|&j| j as usize).collect();
        let centers: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let mut weights = Vec::with_capacity(n * k);
        let mut floored = 0;
        for i in 0..n {
            let (w, f) = inverse_distance_weights(graph.distances(i), scheme);
            weights.extend(w);
            floored += f;
        }
        if floored > 0 {
            log::warn!("{floored} coincident neighbor distances floored to {DISTANCE_FLOOR}");
        }
        Self {
            k,
            neighbors: neighbors.into(),
            centers: centers.into(),
            weights: weights.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Learnable per-point features `f` (one row per stored point).
#[derive(Clone, Copy, Debug)]
pub struct FeatureBank {
    pub id: ParamId,
    pub dim: usize,
}

impl FeatureBank {
    pub const NAME: &'static str = "features";

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, n: usize, dim: usize, rng: &mut R) -> Self {
        let id = store.add(Self::NAME, Tensor::randn(n, dim, 0.01, rng));
        Self { id, dim }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let id = store
            .find(Self::NAME)
            .ok_or_else(|| SagsError::Config("feature bank missing from parameter store".into()))?;
        Ok(Self {
            id,
            dim: store.get(id).cols(),
        })
    }

    pub fn len(&self, store: &ParamStore) -> usize {
        store.get(self.id).rows()
    }

    pub fn global(&self, store: &ParamStore) -> Vec<f32> {
        global_feature(store.get(self.id))
    }
}

/// Channel-wise maximum over rows.
pub fn global_feature(features: &Tensor) -> Vec<f32> {
    let mut g = features.row_slice(0).to_vec();
    for r in 1..features.rows() {
        for (m, &x) in g.iter_mut().zip(features.row_slice(r)) {
            *m = m.max(x);
        }
    }
    g
}

/// Message network `h` and the aggregation around it.
#[derive(Clone, Debug)]
pub struct Aggregator {
    mlp: Mlp,
    pos_dim: usize,
    feature_dim: usize,
    use_global: bool,
}

impl Aggregator {
    pub const NAME: &'static str = "aggregator";

    pub fn widths(pos_dim: usize, feature_dim: usize, hidden: usize, use_global: bool) -> Vec<usize> {
        let input = pos_dim + feature_dim + if use_global { feature_dim } else { 0 };
        vec![input, hidden, feature_dim]
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        pos_dim: usize,
        feature_dim: usize,
        hidden: usize,
        use_global: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let widths = Self::widths(pos_dim, feature_dim, hidden, use_global);
        let mlp = Mlp::new(store, Self::NAME, &widths, Activation::Relu, rng)?;
        Self::from_mlp(mlp, pos_dim, feature_dim, use_global)
    }

    pub fn from_mlp(mlp: Mlp, pos_dim: usize, feature_dim: usize, use_global: bool) -> Result<Self> {
        let expected = pos_dim + feature_dim + if use_global { feature_dim } else { 0 };
        if mlp.in_dim() != expected {
            return Err(SagsError::Config(format!(
                "message network expects {} inputs but encoding + features{} need {expected}",
                mlp.in_dim(),
                if use_global { " + global" } else { "" }
            )));
        }
        if mlp.out_dim() != feature_dim {
            return Err(SagsError::Config(format!(
                "message network outputs {} channels, feature width is {feature_dim}",
                mlp.out_dim()
            )));
        }
        Ok(Self {
            mlp,
            pos_dim,
            feature_dim,
            use_global,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn uses_global(&self) -> bool {
        self.use_global
    }

    /// `relu(sum_j w_ij h(pos_j, f_j - f_i, g))` for every center `i`.
    ///
    /// The first layer is split by input block so it runs on `N` rows; the
    /// linear last layer commutes with the weighted sum (rows sum to one), so
    /// only the hidden activations are formed per edge.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, graph: &GraphInputs, pos: Var, features: Var) -> Result<Var> {
        self.check_inputs(tape, pos, features)?;
        let layers = self.mlp.layers();
        let first = &layers[0];
        let (p, d) = (self.pos_dim, self.feature_dim);
        let w = tape.param(store, first.weight);
        let b = tape.param(store, first.bias);
        let w_pos = tape.slice_rows(w, 0, p)?;
        let w_rel = tape.slice_rows(w, p, p + d)?;
        let a = tape.matmul(pos, w_pos)?;
        let bf = tape.matmul(features, w_rel)?;
        let c = if self.use_global {
            let w_glob = tape.slice_rows(w, p + d, p + 2 * d)?;
            let g = tape.col_max(features)?;
            let gw = tape.matmul(g, w_glob)?;
            tape.add(gw, b)?
        } else {
            b
        };
        let a_j = tape.gather_rows(a, graph.neighbors.clone())?;
        let b_j = tape.gather_rows(bf, graph.neighbors.clone())?;
        let b_i = tape.gather_rows(bf, graph.centers.clone())?;
        let s = tape.add(a_j, b_j)?;
        let s = tape.sub(s, b_i)?;
        let z = tape.add_row(s, c)?;
        let mut x = first.activation.apply(tape, z);

        let fold_last = layers.len() >= 2 && layers[layers.len() - 1].activation == Activation::None;
        let edge_end = if fold_last { layers.len() - 1 } else { layers.len() };
        for layer in &layers[1..edge_end] {
            x = layer.forward(tape, store, x)?;
        }
        let mut agg = tape.segment_weighted_sum(x, graph.weights.clone(), graph.k)?;
        if fold_last {
            agg = layers[layers.len() - 1].affine(tape, store, agg)?;
        }
        Ok(tape.relu(agg))
    }

    /// Graph-free variant: `relu(h(pos_i, f_i, g))`.
    pub fn per_point(&self, tape: &mut Tape, store: &ParamStore, pos: Var, features: Var) -> Result<Var> {
        self.check_inputs(tape, pos, features)?;
        let input = if self.use_global {
            let g = tape.col_max(features)?;
            let n = tape.value(features).rows();
            let g = tape.broadcast_rows(g, n)?;
            tape.concat_cols(&[pos, features, g])?
        } else {
            tape.concat_cols(&[pos, features])?
        };
        let out = self.mlp.forward(tape, store, input)?;
        Ok(tape.relu(out))
    }

    fn check_inputs(&self, tape: &Tape, pos: Var, features: Var) -> Result<()> {
        let [np, pp] = tape.value(pos).shape();
        let [nf, df] = tape.value(features).shape();
        if pp != self.pos_dim || df != self.feature_dim || np != nf || nf == 0 {
            return Err(SagsError::Config(format!(
                "aggregator built for {} encoding and {} feature channels, got {np}x{pp} and {nf}x{df}",
                self.pos_dim, self.feature_dim
            )));
        }
        Ok(())
    }
}
