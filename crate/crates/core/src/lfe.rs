//! Layer feature enhancement.
//!
//! Primitive features are split by graphical layer. Each group is pooled into
//! a global layer descriptor (mean, max and attention pooling, concatenated),
//! passed through `φ = fc1 → ReLU → fc2`, and fused back into every member row
//! with `fc3(concat(row, descriptor))`. Groups never see each other.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::FeaturePyramid;
use crate::drawing::LayerGrouping;
use crate::error::{Error, Result};
use crate::params::{Linear, Mlp, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Mean,
    Max,
    Attn,
    Concat,
}

impl PoolMode {
    pub fn width(self, dim: usize) -> usize {
        if self == PoolMode::Concat {
            3 * dim
        } else {
            dim
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(PoolMode::Mean),
            "max" => Some(PoolMode::Max),
            "attn" => Some(PoolMode::Attn),
            "concat" => Some(PoolMode::Concat),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LfeConfig {
    pub enabled: bool,
    pub pool_mode: PoolMode,
    pub hidden_dim: usize,
    pub fusion: Fusion,
    pub multi_scale: bool,
}

impl Default for LfeConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            pool_mode: PoolMode::Concat,
            hidden_dim: 256,
            fusion: Fusion::Concat,
            multi_scale: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lfe {
    pub config: LfeConfig,
    pub scorer: Linear,
    pub phi: Mlp,
    pub project: Option<Linear>,
}

impl Lfe {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, config: &LfeConfig, rng: &mut R) -> Self {
        let scorer = Linear::new(store, "lfe.attn", dim, 1, rng);
        let phi = Mlp::new(
            store,
            "lfe.phi",
            &[config.pool_mode.width(dim), config.hidden_dim, dim],
            rng,
        );
        let project = (config.fusion == Fusion::Concat).then(|| Linear::new(store, "lfe.fc3", 2 * dim, dim, rng));
        Self {
            config: config.clone(),
            scorer,
            phi,
            project,
        }
    }

    /// Pooled vector of one group (`m × D` → `1 × D`, or `1 × 3D` for concat).
    pub fn pool(&self, g: &mut Graph, store: &ParamStore, group: Var) -> Result<Var> {
        if g.shape(group).0 == 0 {
            return Err(Error::EmptyGroup);
        }
        Ok(match self.config.pool_mode {
            PoolMode::Mean => g.mean_rows(group),
            PoolMode::Max => g.max_rows(group),
            PoolMode::Attn => self.attention_pool(g, store, group),
            PoolMode::Concat => {
                let mean = g.mean_rows(group);
                let max = g.max_rows(group);
                let attn = self.attention_pool(g, store, group);
                g.concat_cols(&[mean, max, attn])
            }
        })
    }

    fn attention_pool(&self, g: &mut Graph, store: &ParamStore, group: Var) -> Var {
        let scores = self.scorer.forward(g, store, group);
        let scores = g.transpose(scores);
        let weights = g.softmax_rows(scores, None);
        g.matmul(weights, group)
    }

    /// Layer descriptor `U(g) = φ(pool(g))`.
    pub fn descriptor(&self, g: &mut Graph, store: &ParamStore, group: Var) -> Result<Var> {
        let pooled = self.pool(g, store, group)?;
        Ok(self.phi.forward(g, store, pooled))
    }

    /// Enhances every row of `features` with its layer's descriptor.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var, layer_ids: &[usize]) -> Result<Var> {
        let (n, _) = g.shape(features);
        if layer_ids.len() != n {
            return Err(Error::Contract(format!(
                "LFE got {n} feature rows but {} layer ids",
                layer_ids.len()
            )));
        }
        let grouping = LayerGrouping::from_layer_ids(layer_ids);
        let mut parts = Vec::with_capacity(grouping.num_groups());
        let mut order = Vec::with_capacity(n);
        for (_, members) in grouping.iter() {
            let rows = g.gather_rows(features, members);
            let u = self.descriptor(g, store, rows)?;
            let u = g.repeat_row(u, members.len());
            let fused = match &self.project {
                Some(fc3) => {
                    let cat = g.concat_cols(&[rows, u]);
                    fc3.forward(g, store, cat)
                }
                None => g.add(rows, u),
            };
            parts.push(fused);
            order.extend_from_slice(members);
        }
        let stacked = g.concat_rows(&parts);
        let mut inverse = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            inverse[i] = pos;
        }
        Ok(g.gather_rows(stacked, &inverse))
    }

    /// Applies the module to the finest level, or to every level when
    /// `multi_scale` is set. Returns the pyramid with replaced features.
    pub fn enhance_pyramid(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
        sample_layers: &[usize],
    ) -> Result<FeaturePyramid> {
        let mut out = pyramid.clone();
        let count = if self.config.multi_scale { out.levels.len() } else { 1 };
        for level in out.levels.iter_mut().take(count) {
            let ids: Vec<usize> = level.index_map.iter().map(|&i| sample_layers[i]).collect();
            level.features = self.forward(g, store, level.features, &ids)?;
        }
        Ok(out)
    }

    /// Value-only pooling helper.
    pub fn pool_values(&self, store: &ParamStore, group: &Array2<f64>) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let v = g.constant(group.clone());
        let p = self.pool(&mut g, store, v)?;
        Ok(g.value(p).row(0).to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(mode: PoolMode, dim: usize) -> (ParamStore, Lfe) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = LfeConfig {
            pool_mode: mode,
            hidden_dim: 6,
            ..Default::default()
        };
        let lfe = Lfe::new(&mut store, dim, &cfg, &mut rng);
        (store, lfe)
    }

    #[test]
    fn single_row_pools_to_itself() {
        let (store, lfe) = module(PoolMode::Concat, 3);
        let row = array![[0.5, -1.0, 2.0]];
        let pooled = lfe.pool_values(&store, &row).unwrap();
        let expected: Vec<f64> = [0.5, -1.0, 2.0].repeat(3);
        for (a, b) in pooled.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_and_max_pool() {
        let rows = array![[1.0, 0.0], [3.0, 2.0]];
        let (store, mean) = module(PoolMode::Mean, 2);
        assert_eq!(mean.pool_values(&store, &rows).unwrap().to_vec(), vec![2.0, 1.0]);
        let (store, max) = module(PoolMode::Max, 2);
        assert_eq!(max.pool_values(&store, &rows).unwrap().to_vec(), vec![3.0, 2.0]);
    }

    #[test]
    fn attention_pool_weights() {
        // scorer: score(row) = row[1] so the two rows score 0 and ln 3
        let (mut store, lfe) = module(PoolMode::Attn, 2);
        *store.value_mut(lfe.scorer.weight) = array![[0.0], [1.0]];
        *store.value_mut(lfe.scorer.bias) = array![[0.0]];
        let r1 = [4.0, 0.0];
        let r2 = [-2.0, 3f64.ln()];
        let rows = array![[r1[0], r1[1]], [r2[0], r2[1]]];
        let pooled = lfe.pool_values(&store, &rows).unwrap();
        for c in 0..2 {
            let expected = 0.25 * r1[c] + 0.75 * r2[c];
            assert!((pooled[c] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_group_is_an_error() {
        let (store, lfe) = module(PoolMode::Mean, 2);
        let empty = Array2::zeros((0, 2));
        assert!(matches!(lfe.pool_values(&store, &empty), Err(Error::EmptyGroup)));
    }

    #[test]
    fn mismatched_layer_ids() {
        let (store, lfe) = module(PoolMode::Concat, 2);
        let mut g = Graph::new();
        let f = g.constant(Array2::zeros((3, 2)));
        assert!(matches!(lfe.forward(&mut g, &store, f, &[0, 1]), Err(Error::Contract(_))));
    }

    #[test]
    fn matches_direct_per_group_recomputation() {
        // mean pooling, φ and fc3 set so that φ(u) = u and fc3([r, u]) = r + u
        let dim = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = LfeConfig {
            pool_mode: PoolMode::Mean,
            hidden_dim: dim,
            ..Default::default()
        };
        let lfe = Lfe::new(&mut store, dim, &cfg, &mut rng);
        let eye = Array2::eye(dim);
        for layer in &lfe.phi.layers {
            *store.value_mut(layer.weight) = eye.clone();
            *store.value_mut(layer.bias) = Array2::zeros((1, dim));
        }
        let fc3 = lfe.project.as_ref().unwrap();
        *store.value_mut(fc3.weight) = ndarray::concatenate![ndarray::Axis(0), eye, eye];
        *store.value_mut(fc3.bias) = Array2::zeros((1, dim));

        // positive features keep the ReLU inside φ inactive
        let feats = array![[1.0, 2.0], [3.0, 0.5], [0.2, 0.4], [5.0, 1.0], [2.0, 2.0]];
        let layers = [1, 0, 1, 1, 0];
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let out = lfe.forward(&mut g, &store, f, &layers).unwrap();
        let out = g.value(out);
        for i in 0..feats.nrows() {
            let members: Vec<usize> = (0..layers.len()).filter(|&j| layers[j] == layers[i]).collect();
            for c in 0..dim {
                let mean = members.iter().map(|&j| feats[[j, c]]).sum::<f64>() / members.len() as f64;
                assert!((out[[i, c]] - (feats[[i, c]] + mean)).abs() < 1e-12);
            }
        }
    }
}
