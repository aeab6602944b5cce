//! Point encoder producing a five-level feature pyramid.
//!
//! Level 0 holds one row per primitive. Each level applies a shared edge MLP
//! over k-nearest-neighbour neighbourhoods followed by max aggregation;
//! coarser levels are chosen by farthest-point sampling of the previous level.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::drawing::{Drawing, Point, FEATURE_DIM};
use crate::params::{Mlp, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub k: usize,
    pub levels: usize,
    pub ratio: usize,
    /// Octaves of sinusoidal position features appended to the input.
    pub position_octaves: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            k: 8,
            levels: 5,
            ratio: 4,
            position_octaves: 4,
        }
    }
}

impl BackboneConfig {
    pub fn input_dim(&self) -> usize {
        FEATURE_DIM + 2 + 4 * self.position_octaves
    }
}

/// Rows of one pyramid level and the samples they stand for.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub features: Var,
    /// `index_map[row]` is the sample index of that row.
    pub index_map: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn finest(&self) -> Var {
        self.levels[0].features
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    embed: Mlp,
    blocks: Vec<Mlp>,
}

/// Scale applied to neighbour offsets, which are tiny in normalized units.
const OFFSET_SCALE: f64 = 10.0;

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &BackboneConfig, rng: &mut R) -> Self {
        let d = config.dim;
        let embed = Mlp::new(store, "backbone.embed", &[config.input_dim(), d, d], rng);
        let blocks = (0..config.levels)
            .map(|l| Mlp::new(store, &format!("backbone.level{l}"), &[2 * d + 2, d, d], rng))
            .collect();
        Self {
            config: config.clone(),
            embed,
            blocks,
        }
    }

    /// Raw per-sample input: geometric feature, position, sinusoidal position.
    pub fn input_matrix(&self, drawing: &Drawing) -> Array2<f64> {
        let positions = drawing.normalized_positions();
        let feats: Vec<[f64; FEATURE_DIM]> = drawing.samples().iter().map(|s| s.feature).collect();
        self.input_from_parts(&feats, &positions)
    }

    pub fn input_from_parts(&self, feats: &[[f64; FEATURE_DIM]], positions: &[Point]) -> Array2<f64> {
        let n = feats.len();
        let mut x = Array2::zeros((n, self.config.input_dim()));
        for i in 0..n {
            for (c, v) in feats[i].iter().enumerate() {
                x[[i, c]] = *v;
            }
            let p = positions[i];
            x[[i, FEATURE_DIM]] = p[0];
            x[[i, FEATURE_DIM + 1]] = p[1];
            let mut col = FEATURE_DIM + 2;
            for o in 0..self.config.position_octaves {
                let freq = TAU * f64::from(1u32 << o);
                for coord in p {
                    x[[i, col]] = (freq * coord).sin();
                    x[[i, col + 1]] = (freq * coord).cos();
                    col += 2;
                }
            }
        }
        x
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, drawing: &Drawing) -> FeaturePyramid {
        let input = g.constant(self.input_matrix(drawing));
        self.encode_input(g, store, input, &drawing.normalized_positions())
    }

    /// Encodes an already assembled input matrix (`N × input_dim`).
    pub fn encode_input(&self, g: &mut Graph, store: &ParamStore, input: Var, positions: &[Point]) -> FeaturePyramid {
        let n = positions.len();
        assert!(n > 0, "cannot encode an empty drawing");
        assert_eq!(g.shape(input).0, n, "input rows must match positions");
        let mut h = self.embed.forward(g, store, input);
        let mut index_map: Vec<usize> = (0..n).collect();
        let mut levels = Vec::with_capacity(self.config.levels);
        for (l, block) in self.blocks.iter().enumerate() {
            // rows of `h` correspond to `index_map`
            let centers: Vec<usize> = if l == 0 {
                (0..index_map.len()).collect()
            } else {
                let target = index_map.len().div_ceil(self.config.ratio).max(1);
                let pts: Vec<Point> = index_map.iter().map(|&i| positions[i]).collect();
                farthest_point_sample(&pts, &index_map, target)
            };
            let pts: Vec<Point> = index_map.iter().map(|&i| positions[i]).collect();
            let k = self.config.k.min(index_map.len());
            let neighbors = knn(&pts, &centers, k);
            let mut nbr_rows = Vec::with_capacity(centers.len() * k);
            let mut ctr_rows = Vec::with_capacity(centers.len() * k);
            let mut offsets = Array2::zeros((centers.len() * k, 2));
            for (ci, &c) in centers.iter().enumerate() {
                for (j, &nb) in neighbors[ci].iter().enumerate() {
                    let r = ci * k + j;
                    nbr_rows.push(nb);
                    ctr_rows.push(c);
                    offsets[[r, 0]] = (pts[nb][0] - pts[c][0]) * OFFSET_SCALE;
                    offsets[[r, 1]] = (pts[nb][1] - pts[c][1]) * OFFSET_SCALE;
                }
            }
            let hn = g.gather_rows(h, &nbr_rows);
            let hc = g.gather_rows(h, &ctr_rows);
            let diff = g.sub(hn, hc);
            let off = g.constant(offsets);
            let edge = g.concat_cols(&[diff, hc, off]);
            let msg = block.forward(g, store, edge);
            let agg = g.segment_max(msg, k);
            let base = g.gather_rows(h, &centers);
            h = g.add(base, agg);
            index_map = centers.iter().map(|&c| index_map[c]).collect();
            levels.push(PyramidLevel {
                features: h,
                index_map: index_map.clone(),
            });
        }
        FeaturePyramid { levels }
    }
}

/// `k` nearest neighbours (including the point itself) of every center, by
/// Euclidean distance with ties broken on coordinates, then index.
pub fn knn(points: &[Point], centers: &[usize], k: usize) -> Vec<Vec<usize>> {
    centers
        .iter()
        .map(|&c| {
            let mut order: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .map(|(j, p)| ((p[0] - points[c][0]).powi(2) + (p[1] - points[c][1]).powi(2), j))
                .collect();
            order.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then(points[a.1][0].total_cmp(&points[b.1][0]))
                    .then(points[a.1][1].total_cmp(&points[b.1][1]))
                    .then(a.1.cmp(&b.1))
            });
            order.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Farthest-point sampling of `count` local indices into `points`; returns
/// them in ascending order. Starts from the point with the lowest original
/// index; distance ties go to the lowest original index.
pub fn farthest_point_sample(points: &[Point], original: &[usize], count: usize) -> Vec<usize> {
    let n = points.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let start = (0..n).min_by_key(|&i| original[i]).unwrap();
    let mut chosen = vec![start];
    let mut dist = vec![f64::INFINITY; n];
    let mut last = start;
    while chosen.len() < count {
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = (points[i][0] - points[last][0]).powi(2) + (points[i][1] - points[last][1]).powi(2);
            if d < dist[i] {
                dist[i] = d;
            }
            if chosen.contains(&i) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if dist[i] > dist[b] || (dist[i] == dist[b] && original[i] < original[b]) => Some(i),
                keep => keep,
            };
        }
        last = best.unwrap();
        chosen.push(last);
    }
    chosen.sort_by_key(|&i| original[i]);
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            dim: 8,
            k: 4,
            levels: 5,
            ratio: 4,
            position_octaves: 1,
        }
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; FEATURE_DIM]>, Vec<Point>) {
        let feats = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let pos = (0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        (feats, pos)
    }

    #[test]
    fn single_point_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &small_config(), &mut rng);
        let (f, p) = random_points(1, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(bb.input_from_parts(&f, &p));
        let pyr = bb.encode_input(&mut g, &store, x, &p);
        assert_eq!(pyr.levels.len(), 5);
        for level in &pyr.levels {
            assert_eq!(level.index_map, vec![0]);
            assert_eq!(g.shape(level.features), (1, 8));
        }
    }

    #[test]
    fn level_sizes_shrink_until_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &small_config(), &mut rng);
        let (f, p) = random_points(100, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(bb.input_from_parts(&f, &p));
        let pyr = bb.encode_input(&mut g, &store, x, &p);
        let sizes: Vec<usize> = pyr.levels.iter().map(|l| l.index_map.len()).collect();
        assert_eq!(sizes, vec![100, 25, 7, 2, 1]);
        assert_eq!(pyr.levels[0].index_map, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn finest_level_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &small_config(), &mut rng);
        let (f, p) = random_points(30, &mut rng);
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut v: Vec<usize> = (0..30).collect();
            v.shuffle(&mut rng);
            v
        };
        let pf: Vec<_> = perm.iter().map(|&i| f[i]).collect();
        let pp: Vec<_> = perm.iter().map(|&i| p[i]).collect();
        let run = |f: &[[f64; FEATURE_DIM]], p: &[Point]| {
            let mut g = Graph::new();
            let x = g.constant(bb.input_from_parts(f, p));
            let pyr = bb.encode_input(&mut g, &store, x, p);
            g.value(pyr.finest()).clone()
        };
        let base = run(&f, &p);
        let permuted = run(&pf, &pp);
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.row(row), base.row(src));
        }
    }

    #[test]
    fn fps_tie_breaks_on_lowest_index() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 0.5]];
        let picked = farthest_point_sample(&pts, &[0, 1, 2, 3], 2);
        assert_eq!(picked, vec![0, 1]);
    }

    #[test]
    fn knn_includes_self_first() {
        let pts = [[0.0, 0.0], [0.1, 0.0], [0.5, 0.5], [0.05, 0.0]];
        let nb = knn(&pts, &[0, 2], 2);
        assert_eq!(nb[0], vec![0, 3]);
        assert_eq!(nb[1][0], 2);
    }
}
