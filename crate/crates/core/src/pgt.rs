//! Position-guided training: center queries built from ground truth.
//!
//! A center query pairs the class embedding of a ground-truth object with a
//! positional encoding of its (perturbed) center. Centers are drawn from
//! `N(p_ct, diag(σ²))` with `σ = ε·(w, h)` in normalized drawing units,
//! clipped to `[0, 1]²`, then encoded. Each center query is tied to its
//! object for the whole forward pass; it never goes through matching.

use std::f64::consts::TAU;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::drawing::{Drawing, Point};
use crate::error::{Error, Result};
use crate::params::{normal, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Fourier,
    Sine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgtConfig {
    pub enabled: bool,
    pub epsilon: f64,
    pub encoding: EncodingKind,
    pub fourier_scale: f64,
    pub max_center_queries: Option<usize>,
}

impl Default for PgtConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epsilon: 0.1,
            encoding: EncodingKind::Fourier,
            fourier_scale: 1.0,
            max_center_queries: None,
        }
    }
}

/// Maps a point in `[0, 1]²` to a `dim`-vector.
#[derive(Clone, Debug, PartialEq)]
pub enum PositionalEncoder {
    /// `[cos(2π B p); sin(2π B p)]` with a frozen Gaussian `B` of shape `dim/2 × 2`.
    Fourier { frequencies: Array2<f64> },
    /// Fixed geometric frequency ladder, sine/cosine pairs per coordinate.
    Sine { dim: usize },
}

impl PositionalEncoder {
    pub fn fourier<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        assert!(dim.is_multiple_of(2), "Fourier encoding needs an even dimension");
        PositionalEncoder::Fourier {
            frequencies: normal(dim / 2, 2, scale, rng),
        }
    }

    pub fn sine(dim: usize) -> Self {
        assert!(dim.is_multiple_of(4), "sine encoding needs a dimension divisible by 4");
        PositionalEncoder::Sine { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            PositionalEncoder::Fourier { frequencies } => 2 * frequencies.nrows(),
            PositionalEncoder::Sine { dim } => *dim,
        }
    }

    pub fn encode(&self, p: Point) -> Array1<f64> {
        match self {
            PositionalEncoder::Fourier { frequencies } => {
                let half = frequencies.nrows();
                let mut out = Array1::zeros(2 * half);
                for i in 0..half {
                    let phase = TAU * (frequencies[[i, 0]] * p[0] + frequencies[[i, 1]] * p[1]);
                    out[i] = phase.cos();
                    out[half + i] = phase.sin();
                }
                out
            }
            PositionalEncoder::Sine { dim } => {
                let per_axis = dim / 4;
                let mut out = Array1::zeros(*dim);
                for (axis, coord) in p.iter().enumerate() {
                    for i in 0..per_axis {
                        let omega = TAU / 10_000f64.powf(i as f64 / per_axis as f64);
                        let base = axis * 2 * per_axis + 2 * i;
                        out[base] = (omega * coord).sin();
                        out[base + 1] = (omega * coord).cos();
                    }
                }
                out
            }
        }
    }

    pub fn encode_many(&self, points: &[Point]) -> Array2<f64> {
        let mut out = Array2::zeros((points.len(), self.dim()));
        for (i, p) in points.iter().enumerate() {
            out.row_mut(i).assign(&self.encode(*p));
        }
        out
    }
}

/// Trainable class embedding table (`C × D`).
#[derive(Clone, Debug)]
pub struct ClassEmbedding {
    pub table: ParamId,
    pub classes: usize,
}

impl ClassEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, classes: usize, dim: usize, rng: &mut R) -> Self {
        let table = store.add("pgt.class_embed", normal(classes, dim, 1.0, rng), false);
        Self { table, classes }
    }

    /// Rows of the table for `labels`, in order.
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, labels: &[usize]) -> Result<Var> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::ClassOutOfRange {
                id: bad,
                classes: self.classes,
            });
        }
        let t = g.param(store, self.table);
        Ok(g.gather_rows(t, labels))
    }
}

/// One ground-truth symbol: a thing instance or the whole region of a stuff class.
#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub class: usize,
    pub instance: i64,
    pub members: Vec<usize>,
    /// Center in normalized units: box center for things, member centroid for stuff.
    pub center: Point,
    /// Box extents `(w, h)` in normalized units.
    pub size: [f64; 2],
}

impl GtObject {
    pub fn mask(&self, n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n];
        for &i in &self.members {
            m[i] = 1.0;
        }
        m
    }
}

/// Ground-truth objects of a drawing ordered by their first member.
pub fn gt_objects(drawing: &Drawing) -> Vec<GtObject> {
    let mut keys: Vec<(usize, i64)> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, s) in drawing.samples().iter().enumerate() {
        let key = (s.semantic, s.instance);
        match keys.iter().position(|k| *k == key) {
            Some(k) => members[k].push(i),
            None => {
                keys.push(key);
                members.push(vec![i]);
            }
        }
    }
    keys.into_iter()
        .zip(members)
        .map(|((class, instance), members)| {
            let b = drawing.bbox_of(&members);
            let (w, h) = (drawing.width, drawing.height);
            let size = [(b[2] - b[0]) / w, (b[3] - b[1]) / h];
            let center = if drawing.vocab.is_thing(class) {
                [(b[0] + b[2]) / (2.0 * w), (b[1] + b[3]) / (2.0 * h)]
            } else {
                let n = members.len() as f64;
                let sum = members.iter().fold([0.0, 0.0], |acc, &i| {
                    let p = drawing.normalized_position(i);
                    [acc[0] + p[0], acc[1] + p[1]]
                });
                [sum[0] / n, sum[1] / n]
            };
            GtObject {
                class,
                instance,
                members,
                center,
                size,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterQuerySpec {
    pub gt_index: usize,
    pub class: usize,
    /// Unperturbed center `p_ct`.
    pub center: Point,
    /// Sampled center `Q_gt` before clipping.
    pub sampled: Point,
    pub sigma: [f64; 2],
    /// `Q_p`: encoding of the clipped sample.
    pub position: Array1<f64>,
}

pub fn build_center_queries<R: Rng + ?Sized>(
    objects: &[GtObject],
    encoder: &PositionalEncoder,
    epsilon: f64,
    cap: Option<usize>,
    rng: &mut R,
) -> Vec<CenterQuerySpec> {
    let count = cap.map_or(objects.len(), |c| c.min(objects.len()));
    objects
        .iter()
        .take(count)
        .enumerate()
        .map(|(gt_index, obj)| {
            let sigma = [epsilon * obj.size[0], epsilon * obj.size[1]];
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            let sampled = [obj.center[0] + sigma[0] * zx, obj.center[1] + sigma[1] * zy];
            let clipped = [sampled[0].clamp(0.0, 1.0), sampled[1].clamp(0.0, 1.0)];
            CenterQuerySpec {
                gt_index,
                class: obj.class,
                center: obj.center,
                sampled,
                sigma,
                position: encoder.encode(clipped),
            }
        })
        .collect()
}
