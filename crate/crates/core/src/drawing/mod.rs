//! Vector drawings as point sets.
//!
//! Each [`GraphicalPrimitive`] becomes exactly one [`PointSample`] located at
//! the primitive's midpoint and carrying a six-component geometric feature:
//!
//! | index | component |
//! |-------|-----------|
//! | 0, 1  | unit direction `cos θ, sin θ` |
//! | 2     | arc length divided by the drawing diagonal |
//! | 3     | primitive kind code in `[0, 1]` |
//! | 4     | curvature proxy: fraction of a full turn swept (0 for straight edges) |
//! | 5     | layer density: share of the drawing's primitives on the same layer |

pub mod geometry;
pub mod io;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use geometry::{BBox, Geometry, Point, PrimitiveKind};

/// Instance id carried by stuff primitives.
pub const STUFF_INSTANCE: i64 = -1;

pub const FEATURE_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct GraphicalPrimitive {
    pub kind: PrimitiveKind,
    pub geometry: Geometry,
    pub layer: usize,
    pub semantic: usize,
    pub instance: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: usize,
    pub name: String,
    pub is_thing: bool,
}

/// Class vocabulary with ids `0..C` in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocab {
    classes: Vec<ClassInfo>,
}

impl ClassVocab {
    pub fn new(mut classes: Vec<ClassInfo>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::schema("class_vocab", "vocabulary is empty"));
        }
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::schema(
                    "class_vocab",
                    format!("class ids must be contiguous from 0; found id {} at position {i}", c.id),
                ));
            }
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn get(&self, id: usize) -> Option<&ClassInfo> {
        self.classes.get(id)
    }

    pub fn is_thing(&self, id: usize) -> bool {
        self.classes.get(id).is_some_and(|c| c.is_thing)
    }

    pub fn name(&self, id: usize) -> &str {
        self.classes.get(id).map_or("background", |c| c.name.as_str())
    }

    pub fn thing_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().filter(|c| c.is_thing).map(|c| c.id)
    }

    pub fn stuff_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().filter(|c| !c.is_thing).map(|c| c.id)
    }
}

/// Drawing-level context needed to compute a sample's feature vector.
#[derive(Clone, Copy, Debug)]
pub struct FeatureContext {
    pub diagonal: f64,
    pub layer_density: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointSample {
    /// Midpoint in drawing units.
    pub position: Point,
    pub feature: [f64; FEATURE_DIM],
    pub layer: usize,
    pub arc_length: f64,
    pub bbox: BBox,
    pub semantic: usize,
    pub instance: i64,
}

impl PointSample {
    /// `log(1 + L)`, the weight of this primitive in arc-length metrics.
    pub fn log_length(&self) -> f64 {
        self.arc_length.ln_1p()
    }
}

pub fn primitive_to_point(prim: &GraphicalPrimitive, ctx: &FeatureContext) -> Result<PointSample> {
    prim.geometry.validate(prim.kind)?;
    let g = &prim.geometry;
    let length = g.arc_length();
    let dir = g.direction();
    let feature = [
        dir[0],
        dir[1],
        length / ctx.diagonal,
        prim.kind.code(),
        g.curvature_proxy(),
        ctx.layer_density,
    ];
    Ok(PointSample {
        position: g.midpoint(),
        feature,
        layer: prim.layer,
        arc_length: length,
        bbox: g.bbox(),
        semantic: prim.semantic,
        instance: prim.instance,
    })
}

/// One CAD drawing: primitives, their point samples, and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Drawing {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub num_layers: usize,
    pub vocab: ClassVocab,
    primitives: Vec<GraphicalPrimitive>,
    samples: Vec<PointSample>,
}

impl Drawing {
    pub fn new(
        id: impl Into<String>,
        width: f64,
        height: f64,
        num_layers: usize,
        vocab: ClassVocab,
        primitives: Vec<GraphicalPrimitive>,
    ) -> Result<Self> {
        let id = id.into();
        let at = |i: usize| format!("drawing '{id}' primitive {i}");
        if !(width.is_finite() && width > 0.0 && height.is_finite() && height > 0.0) {
            return Err(Error::schema(format!("drawing '{id}'"), "width and height must be positive"));
        }
        if num_layers == 0 {
            return Err(Error::schema(format!("drawing '{id}'"), "num_layers must be at least 1"));
        }
        let mut per_layer = vec![0usize; num_layers];
        for (i, p) in primitives.iter().enumerate() {
            if p.layer >= num_layers {
                return Err(Error::schema(
                    at(i),
                    format!("layer {} out of range for {num_layers} layers", p.layer),
                ));
            }
            let Some(class) = vocab.get(p.semantic) else {
                return Err(Error::schema(at(i), format!("unknown class id {}", p.semantic)));
            };
            if class.is_thing && p.instance < 0 {
                return Err(Error::schema(at(i), format!("thing class '{}' needs an instance id >= 0", class.name)));
            }
            if !class.is_thing && p.instance != STUFF_INSTANCE {
                return Err(Error::schema(
                    at(i),
                    format!("stuff class '{}' must carry instance -1, found {}", class.name, p.instance),
                ));
            }
            per_layer[p.layer] += 1;
        }
        let n = primitives.len().max(1) as f64;
        let diagonal = width.hypot(height);
        let samples = primitives
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let ctx = FeatureContext {
                    diagonal,
                    layer_density: per_layer[p.layer] as f64 / n,
                };
                primitive_to_point(p, &ctx).map_err(|e| Error::schema(at(i), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            id,
            width,
            height,
            num_layers,
            vocab,
            primitives,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[PointSample] {
        &self.samples
    }

    pub fn primitives(&self) -> &[GraphicalPrimitive] {
        &self.primitives
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.layer).collect()
    }

    /// Sample position scaled into `[0, 1]²` by the drawing extents.
    pub fn normalized_position(&self, i: usize) -> Point {
        let p = self.samples[i].position;
        [p[0] / self.width, p[1] / self.height]
    }

    pub fn normalized_positions(&self) -> Vec<Point> {
        (0..self.len()).map(|i| self.normalized_position(i)).collect()
    }

    pub fn log_lengths(&self) -> Vec<f64> {
        self.samples.iter().map(PointSample::log_length).collect()
    }

    /// Union of the primitive boxes of `members`, in drawing units.
    pub fn bbox_of(&self, members: &[usize]) -> BBox {
        members
            .iter()
            .map(|&i| self.samples[i].bbox)
            .reduce(geometry::bbox_union)
            .unwrap_or([0.0; 4])
    }

    /// Ground-truth `(label, instance)` per sample.
    pub fn gt_labels(&self) -> Vec<(usize, i64)> {
        self.samples.iter().map(|s| (s.semantic, s.instance)).collect()
    }
}

/// Sample indices per layer id, ascending by layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGrouping {
    groups: BTreeMap<usize, Vec<usize>>,
}

impl LayerGrouping {
    pub fn from_layer_ids(layer_ids: &[usize]) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in layer_ids.iter().enumerate() {
            groups.entry(*l).or_default().push(i);
        }
        Self { groups }
    }

    /// Members of layer `layer`; empty when the layer has no samples.
    pub fn members(&self, layer: usize) -> &[usize] {
        self.groups.get(&layer).map_or(&[], |v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.groups.iter().map(|(l, v)| (*l, v.as_slice()))
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }
}

pub fn group_by_layer(drawing: &Drawing) -> LayerGrouping {
    LayerGrouping::from_layer_ids(&drawing.layer_ids())
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn vocab3() -> ClassVocab {
        ClassVocab::new(vec![
            ClassInfo { id: 0, name: "wall".into(), is_thing: false },
            ClassInfo { id: 1, name: "door".into(), is_thing: true },
            ClassInfo { id: 2, name: "window".into(), is_thing: true },
        ])
        .unwrap()
    }

    pub fn segment(x0: f64, y0: f64, x1: f64, y1: f64, layer: usize, semantic: usize, instance: i64) -> GraphicalPrimitive {
        GraphicalPrimitive {
            kind: PrimitiveKind::Segment,
            geometry: Geometry::Segment { start: [x0, y0], end: [x1, y1] },
            layer,
            semantic,
            instance,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segment_sample() {
        let d = Drawing::new("d", 4.0, 3.0, 1, vocab3(), vec![segment(0.0, 0.0, 2.0, 0.0, 0, 1, 0)]).unwrap();
        let s = &d.samples()[0];
        assert_eq!(s.position, [1.0, 0.0]);
        assert_eq!(s.arc_length, 2.0);
        assert_eq!(s.feature, [1.0, 0.0, 2.0 / 5.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn group_examples() {
        let prims = vec![
            segment(0.0, 0.0, 1.0, 0.0, 0, 0, -1),
            segment(0.0, 1.0, 1.0, 1.0, 1, 0, -1),
            segment(0.0, 2.0, 1.0, 2.0, 0, 0, -1),
        ];
        let d = Drawing::new("d", 4.0, 4.0, 3, vocab3(), prims).unwrap();
        let g = group_by_layer(&d);
        assert_eq!(g.members(0), &[0, 2]);
        assert_eq!(g.members(1), &[1]);
        assert!(g.members(2).is_empty());
        assert_eq!(g.num_groups(), 2);

        let single = LayerGrouping::from_layer_ids(&[4, 4, 4, 4]);
        assert_eq!(single.num_groups(), 1);
        assert_eq!(single.members(4).len(), 4);
    }

    #[test]
    fn stuff_with_instance_is_rejected() {
        let err = Drawing::new("d", 4.0, 4.0, 1, vocab3(), vec![segment(0.0, 0.0, 1.0, 0.0, 0, 0, 3)]).unwrap_err();
        assert!(err.to_string().contains("primitive 0"), "{err}");
    }

    #[test]
    fn layer_out_of_range_is_rejected() {
        let err = Drawing::new("d", 4.0, 4.0, 2, vocab3(), vec![segment(0.0, 0.0, 1.0, 0.0, 2, 1, 0)]).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
    }

    #[test]
    fn degenerate_primitive_is_rejected() {
        let err = Drawing::new("d", 4.0, 4.0, 1, vocab3(), vec![segment(1.0, 1.0, 1.0, 1.0, 0, 1, 0)]).unwrap_err();
        assert!(err.to_string().contains("zero-length"), "{err}");
    }

    proptest! {
        #[test]
        fn grouping_partitions_indices(layers in prop::collection::vec(0usize..6, 1..60)) {
            let g = LayerGrouping::from_layer_ids(&layers);
            let mut seen = vec![0u32; layers.len()];
            let mut last = None;
            for (layer, members) in g.iter() {
                prop_assert!(last.is_none_or(|l| l < layer));
                last = Some(layer);
                for &i in members {
                    prop_assert_eq!(layers[i], layer);
                    seen[i] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
