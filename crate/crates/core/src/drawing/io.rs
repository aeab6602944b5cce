//! JSON dataset files, one per split.
//!
//! ```json
//! {"class_vocab": [{"id": 0, "name": "wall", "is_thing": false}],
//!  "drawings": [{"id": "d0", "width": 10, "height": 8, "num_layers": 2,
//!                "primitives": [{"kind": "segment", "geometry": [0, 0, 2, 0],
//!                                "layer": 0, "semantic": 0, "instance": -1}]}]}
//! ```
//!
//! Geometry encodings: segment `[x1,y1,x2,y2]`, circle `[cx,cy,r]`,
//! arc `[cx,cy,r,theta0,theta1]`, ellipse `[cx,cy,rx,ry,rot]`,
//! polyline `[[x,y],...]`. Polylines are split into one primitive per edge on
//! load and written back as two-point polylines.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ClassInfo, ClassVocab, Drawing, Geometry, GraphicalPrimitive, PrimitiveKind};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    class_vocab: Vec<ClassInfo>,
    drawings: Vec<DrawingRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawingRecord {
    id: Value,
    width: f64,
    height: f64,
    num_layers: usize,
    primitives: Vec<PrimitiveRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrimitiveRecord {
    kind: String,
    geometry: Value,
    layer: i64,
    semantic: i64,
    instance: i64,
}

fn numbers(v: &Value, expected: usize, loc: &str) -> Result<Vec<f64>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::schema(loc, "geometry must be an array"))?;
    if arr.len() != expected {
        return Err(Error::schema(
            loc,
            format!("geometry needs {expected} numbers, found {}", arr.len()),
        ));
    }
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::schema(loc, "geometry entries must be numbers")))
        .collect()
}

fn parse_geometry(kind: &str, v: &Value, loc: &str) -> Result<Vec<(PrimitiveKind, Geometry)>> {
    let one = |k, g| Ok(vec![(k, g)]);
    match kind {
        "segment" => {
            let n = numbers(v, 4, loc)?;
            one(PrimitiveKind::Segment, Geometry::Segment { start: [n[0], n[1]], end: [n[2], n[3]] })
        }
        "circle" => {
            let n = numbers(v, 3, loc)?;
            one(PrimitiveKind::Circle, Geometry::Circle { center: [n[0], n[1]], radius: n[2] })
        }
        "arc" => {
            let n = numbers(v, 5, loc)?;
            one(
                PrimitiveKind::Arc,
                Geometry::Arc { center: [n[0], n[1]], radius: n[2], start_angle: n[3], end_angle: n[4] },
            )
        }
        "ellipse" => {
            let n = numbers(v, 5, loc)?;
            one(
                PrimitiveKind::Ellipse,
                Geometry::Ellipse { center: [n[0], n[1]], rx: n[2], ry: n[3], rotation: n[4] },
            )
        }
        "polyline" => {
            let pts = v
                .as_array()
                .ok_or_else(|| Error::schema(loc, "polyline geometry must be an array of points"))?
                .iter()
                .map(|p| numbers(p, 2, loc).map(|n| [n[0], n[1]]))
                .collect::<Result<Vec<_>>>()?;
            if pts.len() < 2 {
                return Err(Error::schema(loc, "polyline needs at least two points"));
            }
            Ok(pts
                .windows(2)
                .map(|w| (PrimitiveKind::PolylineEdge, Geometry::Segment { start: w[0], end: w[1] }))
                .collect())
        }
        other => Err(Error::schema(loc, format!("unknown primitive kind '{other}'"))),
    }
}

fn encode_geometry(p: &GraphicalPrimitive) -> (String, Value) {
    use serde_json::json;
    match (p.kind, p.geometry) {
        (PrimitiveKind::PolylineEdge, Geometry::Segment { start, end }) => {
            ("polyline".into(), json!([[start[0], start[1]], [end[0], end[1]]]))
        }
        (_, Geometry::Segment { start, end }) => ("segment".into(), json!([start[0], start[1], end[0], end[1]])),
        (_, Geometry::Circle { center, radius }) => ("circle".into(), json!([center[0], center[1], radius])),
        (_, Geometry::Arc { center, radius, start_angle, end_angle }) => (
            "arc".into(),
            json!([center[0], center[1], radius, start_angle, end_angle]),
        ),
        (_, Geometry::Ellipse { center, rx, ry, rotation }) => {
            ("ellipse".into(), json!([center[0], center[1], rx, ry, rotation]))
        }
    }
}

fn drawing_id(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn parse_dataset(text: &str) -> Result<(ClassVocab, Vec<Drawing>)> {
    let file: DatasetFile = serde_json::from_str(text)?;
    let vocab = ClassVocab::new(file.class_vocab)?;
    let mut drawings = Vec::with_capacity(file.drawings.len());
    for (di, rec) in file.drawings.into_iter().enumerate() {
        let id = drawing_id(&rec.id);
        let mut prims = Vec::new();
        for (pi, p) in rec.primitives.iter().enumerate() {
            let loc = format!("drawing '{id}' (#{di}) primitive {pi}");
            let nonneg = |v: i64, what: &str| {
                usize::try_from(v).map_err(|_| Error::schema(&loc, format!("{what} must be >= 0, found {v}")))
            };
            let layer = nonneg(p.layer, "layer")?;
            let semantic = nonneg(p.semantic, "semantic")?;
            if semantic >= vocab.len() {
                return Err(Error::schema(&loc, format!("unknown class id {semantic}")));
            }
            for (kind, geometry) in parse_geometry(&p.kind, &p.geometry, &loc)? {
                prims.push(GraphicalPrimitive {
                    kind,
                    geometry,
                    layer,
                    semantic,
                    instance: p.instance,
                });
            }
        }
        drawings.push(Drawing::new(id, rec.width, rec.height, rec.num_layers, vocab.clone(), prims)?);
    }
    Ok((vocab, drawings))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<(ClassVocab, Vec<Drawing>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn dataset_to_json(vocab: &ClassVocab, drawings: &[Drawing]) -> Result<String> {
    let mut records = Vec::with_capacity(drawings.len());
    for d in drawings {
        if &d.vocab != vocab {
            return Err(Error::VocabMismatch(format!("drawing '{}' uses a different vocabulary", d.id)));
        }
        let primitives = d
            .primitives()
            .iter()
            .map(|p| {
                let (kind, geometry) = encode_geometry(p);
                PrimitiveRecord {
                    kind,
                    geometry,
                    layer: p.layer as i64,
                    semantic: p.semantic as i64,
                    instance: p.instance,
                }
            })
            .collect();
        records.push(DrawingRecord {
            id: Value::String(d.id.clone()),
            width: d.width,
            height: d.height,
            num_layers: d.num_layers,
            primitives,
        });
    }
    let file = DatasetFile {
        class_vocab: vocab.classes().to_vec(),
        drawings: records,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_dataset(path: impl AsRef<Path>, vocab: &ClassVocab, drawings: &[Drawing]) -> Result<()> {
    let path = path.as_ref();
    let text = dataset_to_json(vocab, drawings)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const VOCAB: &str = r#""class_vocab": [{"id": 0, "name": "wall", "is_thing": false},
                                           {"id": 1, "name": "door", "is_thing": true}]"#;

    #[test]
    fn minimal_file() {
        let text = format!(
            r#"{{{VOCAB}, "drawings": [{{"id": "a", "width": 4, "height": 4, "num_layers": 1,
                "primitives": [{{"kind": "segment", "geometry": [0, 0, 2, 0], "layer": 0, "semantic": 0, "instance": -1}}]}}]}}"#
        );
        let (vocab, ds) = parse_dataset(&text).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].len(), 1);
    }

    #[test]
    fn stuff_instance_is_schema_error() {
        let text = format!(
            r#"{{{VOCAB}, "drawings": [{{"id": "a", "width": 4, "height": 4, "num_layers": 1,
                "primitives": [{{"kind": "segment", "geometry": [0, 0, 2, 0], "layer": 0, "semantic": 0, "instance": 2}}]}}]}}"#
        );
        let err = parse_dataset(&text).unwrap_err();
        assert!(matches!(err, Error::Schema { .. }));
        assert!(err.to_string().contains("drawing 'a'"), "{err}");
    }

    #[test]
    fn unknown_class_and_bad_layer() {
        let bad_class = format!(
            r#"{{{VOCAB}, "drawings": [{{"id": "a", "width": 4, "height": 4, "num_layers": 1,
                "primitives": [{{"kind": "circle", "geometry": [1, 1, 1], "layer": 0, "semantic": 7, "instance": 0}}]}}]}}"#
        );
        assert!(parse_dataset(&bad_class).unwrap_err().to_string().contains("unknown class id 7"));
        let bad_layer = format!(
            r#"{{{VOCAB}, "drawings": [{{"id": "a", "width": 4, "height": 4, "num_layers": 1,
                "primitives": [{{"kind": "circle", "geometry": [1, 1, 1], "layer": 1, "semantic": 1, "instance": 0}}]}}]}}"#
        );
        assert!(parse_dataset(&bad_layer).unwrap_err().to_string().contains("layer 1 out of range"));
    }

    #[test]
    fn two_drawings_keep_order_and_polylines_split() {
        let text = format!(
            r#"{{{VOCAB}, "drawings": [
                {{"id": "first", "width": 4, "height": 4, "num_layers": 1,
                  "primitives": [{{"kind": "polyline", "geometry": [[0,0],[1,0],[1,1]], "layer": 0, "semantic": 1, "instance": 0}}]}},
                {{"id": 7, "width": 4, "height": 4, "num_layers": 1,
                  "primitives": [{{"kind": "arc", "geometry": [1, 1, 1, 0, 1.5], "layer": 0, "semantic": 1, "instance": 0}}]}}]}}"#
        );
        let (_, ds) = parse_dataset(&text).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].id, "first");
        assert_eq!(ds[1].id, "7");
        assert_eq!(ds[0].len(), 2);
        assert!(ds[0].primitives().iter().all(|p| p.kind == PrimitiveKind::PolylineEdge));
    }

    #[test]
    fn save_load_is_stable() {
        let text = format!(
            r#"{{{VOCAB}, "drawings": [{{"id": "a", "width": 4.5, "height": 4, "num_layers": 2,
                "primitives": [{{"kind": "polyline", "geometry": [[0,0],[1,0.1],[1,1]], "layer": 1, "semantic": 1, "instance": 3}},
                               {{"kind": "ellipse", "geometry": [2, 2, 1, 0.3, 0.2], "layer": 0, "semantic": 0, "instance": -1}}]}}]}}"#
        );
        let (vocab, ds) = parse_dataset(&text).unwrap();
        let saved = dataset_to_json(&vocab, &ds).unwrap();
        let (vocab2, ds2) = parse_dataset(&saved).unwrap();
        assert_eq!(vocab, vocab2);
        assert_eq!(ds, ds2);
        assert_eq!(saved, dataset_to_json(&vocab2, &ds2).unwrap());
    }
}
