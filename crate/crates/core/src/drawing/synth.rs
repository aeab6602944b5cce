//! Synthetic floorplans with complete panoptic ground truth.
//!
//! Rooms are laid out on a grid and bounded by wall segments (stuff). Thing
//! symbols are small parametric templates (doors, windows, tables, beds,
//! sinks, chairs, regular polygons) placed without overlap. Every class is
//! drawn on its own layer family, mirroring how CAD users separate walls,
//! windows and furniture.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{bbox_of_points, BBox};
use super::{ClassInfo, ClassVocab, Drawing, Geometry, GraphicalPrimitive, Point, PrimitiveKind, STUFF_INSTANCE};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub rooms: usize,
    /// Vocabulary size; classes are taken in order from the template list.
    pub num_classes: usize,
    pub num_layers: usize,
    /// Total thing instances; `None` means `symbols_per_room * rooms`.
    pub instances: Option<usize>,
    pub symbols_per_room: usize,
    /// Randomly permute layer ids per drawing so that ids carry no class meaning.
    pub shuffle_layers: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            rooms: 2,
            num_classes: 7,
            num_layers: 7,
            instances: None,
            symbols_per_room: 3,
            shuffle_layers: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Template {
    Wall,
    Door,
    Window,
    Table,
    Bed,
    Sink,
    Chair,
    Railing,
    Polygon(usize),
}

impl Template {
    fn for_class(id: usize) -> Self {
        match id {
            0 => Template::Wall,
            1 => Template::Door,
            2 => Template::Window,
            3 => Template::Table,
            4 => Template::Bed,
            5 => Template::Sink,
            6 => Template::Chair,
            7 => Template::Railing,
            k => Template::Polygon(3 + (k - 8) % 6),
        }
    }

    fn name(self, id: usize) -> String {
        match self {
            Template::Wall => "wall".into(),
            Template::Door => "door".into(),
            Template::Window => "window".into(),
            Template::Table => "table".into(),
            Template::Bed => "bed".into(),
            Template::Sink => "sink".into(),
            Template::Chair => "chair".into(),
            Template::Railing => "railing".into(),
            Template::Polygon(k) => format!("polygon{k}-{id}"),
        }
    }

    fn is_thing(self) -> bool {
        !matches!(self, Template::Wall | Template::Railing)
    }
}

/// Vocabulary used by the generator for `num_classes` classes.
pub fn synthetic_vocab(num_classes: usize) -> Result<ClassVocab> {
    if num_classes == 0 {
        return Err(Error::Generator("zero classes".into()));
    }
    let classes = (0..num_classes)
        .map(|id| {
            let t = Template::for_class(id);
            ClassInfo {
                id,
                name: t.name(id),
                is_thing: t.is_thing(),
            }
        })
        .collect();
    ClassVocab::new(classes)
}

#[derive(Clone, Copy)]
struct Room {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

struct Builder {
    prims: Vec<GraphicalPrimitive>,
    reserved: Vec<BBox>,
    layer_of_class: Vec<usize>,
}

impl Builder {
    fn emit(&mut self, kind: PrimitiveKind, geometry: Geometry, class: usize, instance: i64) {
        self.prims.push(GraphicalPrimitive {
            kind,
            geometry,
            layer: self.layer_of_class[class],
            semantic: class,
            instance,
        });
    }

    fn free(&self, b: &BBox, margin: f64) -> bool {
        self.reserved.iter().all(|r| {
            b[2] + margin < r[0] || r[2] + margin < b[0] || b[3] + margin < r[1] || r[3] + margin < b[1]
        })
    }
}

fn seg(a: Point, b: Point) -> Geometry {
    Geometry::Segment { start: a, end: b }
}

fn rotate(p: Point, c: Point, angle: f64) -> Point {
    let (s, co) = angle.sin_cos();
    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
    [c[0] + co * dx - s * dy, c[1] + s * dx + co * dy]
}

/// Shapes of one thing symbol, centred on `c`, as (kind, geometry) pairs.
fn thing_shapes<R: Rng>(t: Template, c: Point, rng: &mut R) -> Vec<(PrimitiveKind, Geometry)> {
    let quarter = FRAC_PI_2 * rng.random_range(0..4) as f64;
    let rect = |w: f64, h: f64| {
        let corners = [
            [c[0] - w / 2.0, c[1] - h / 2.0],
            [c[0] + w / 2.0, c[1] - h / 2.0],
            [c[0] + w / 2.0, c[1] + h / 2.0],
            [c[0] - w / 2.0, c[1] + h / 2.0],
        ]
        .map(|p| rotate(p, c, quarter));
        (0..4)
            .map(|i| (PrimitiveKind::PolylineEdge, seg(corners[i], corners[(i + 1) % 4])))
            .collect::<Vec<_>>()
    };
    match t {
        Template::Table => rect(rng.random_range(0.8..1.4), rng.random_range(0.6..1.0)),
        Template::Bed => rect(rng.random_range(1.2..2.0), rng.random_range(0.9..1.6)),
        Template::Sink => {
            let rx = rng.random_range(0.25..0.4);
            let ry = rng.random_range(0.15..0.25);
            let drain = rotate([c[0] + rx * 0.5, c[1]], c, quarter);
            vec![
                (PrimitiveKind::Ellipse, Geometry::Ellipse { center: c, rx, ry, rotation: quarter }),
                (PrimitiveKind::Circle, Geometry::Circle { center: drain, radius: 0.05 }),
            ]
        }
        Template::Chair => {
            let r = rng.random_range(0.2..0.3);
            let a = rotate([c[0] - r, c[1] + r * 1.2], c, quarter);
            let b = rotate([c[0] + r, c[1] + r * 1.2], c, quarter);
            vec![
                (PrimitiveKind::Circle, Geometry::Circle { center: c, radius: r }),
                (PrimitiveKind::Segment, seg(a, b)),
            ]
        }
        Template::Polygon(k) => {
            let r = rng.random_range(0.3..0.6);
            let phase = rng.random_range(0.0..TAU);
            let pts: Vec<Point> = (0..k)
                .map(|i| {
                    let a = phase + TAU * i as f64 / k as f64;
                    [c[0] + r * a.cos(), c[1] + r * a.sin()]
                })
                .collect();
            (0..k)
                .map(|i| (PrimitiveKind::PolylineEdge, seg(pts[i], pts[(i + 1) % k])))
                .collect()
        }
        _ => unreachable!("wall-mounted and stuff templates are placed separately"),
    }
}

fn shapes_bbox(shapes: &[(PrimitiveKind, Geometry)]) -> BBox {
    let corners: Vec<Point> = shapes
        .iter()
        .flat_map(|(_, g)| {
            let b = g.bbox();
            [[b[0], b[1]], [b[2], b[3]]]
        })
        .collect();
    bbox_of_points(&corners)
}

/// Door or window on a random wall of `room`.
fn wall_shapes<R: Rng>(t: Template, room: Room, rng: &mut R) -> Vec<(PrimitiveKind, Geometry)> {
    let side = rng.random_range(0..4);
    let (a, b, inward): (Point, Point, Point) = match side {
        0 => ([room.x0, room.y0], [room.x1, room.y0], [0.0, 1.0]),
        1 => ([room.x1, room.y0], [room.x1, room.y1], [-1.0, 0.0]),
        2 => ([room.x1, room.y1], [room.x0, room.y1], [0.0, -1.0]),
        _ => ([room.x0, room.y1], [room.x0, room.y0], [1.0, 0.0]),
    };
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let dir = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
    match t {
        Template::Door => {
            let width = rng.random_range(0.8..1.0);
            let s = rng.random_range(0.4..(len - width - 0.4));
            let hinge = [a[0] + dir[0] * s, a[1] + dir[1] * s];
            let wall_angle = dir[1].atan2(dir[0]);
            let in_angle = inward[1].atan2(inward[0]);
            // quarter arc from the wall direction to the open leaf
            let (start, end) = if (wall_angle + FRAC_PI_2 - in_angle).rem_euclid(TAU) < 1e-9 {
                (wall_angle, wall_angle + FRAC_PI_2)
            } else {
                (in_angle, in_angle + FRAC_PI_2)
            };
            let leaf_end = [hinge[0] + inward[0] * width, hinge[1] + inward[1] * width];
            vec![
                (
                    PrimitiveKind::Arc,
                    Geometry::Arc { center: hinge, radius: width, start_angle: start, end_angle: end },
                ),
                (PrimitiveKind::Segment, seg(hinge, leaf_end)),
            ]
        }
        Template::Window => {
            let length = rng.random_range(1.0..1.6);
            let s = rng.random_range(0.4..(len - length - 0.4));
            let p0 = [a[0] + dir[0] * s, a[1] + dir[1] * s];
            let p1 = [p0[0] + dir[0] * length, p0[1] + dir[1] * length];
            [-0.12, 0.0, 0.12]
                .iter()
                .map(|o| {
                    let off = [inward[0] * o, inward[1] * o];
                    (
                        PrimitiveKind::Segment,
                        seg([p0[0] + off[0], p0[1] + off[1]], [p1[0] + off[0], p1[1] + off[1]]),
                    )
                })
                .collect()
        }
        _ => unreachable!("only doors and windows are wall-mounted"),
    }
}

pub fn generate_synthetic(seed: u64, spec: &GeneratorSpec) -> Result<Drawing> {
    let vocab = synthetic_vocab(spec.num_classes)?;
    if spec.rooms == 0 {
        return Err(Error::Generator("at least one room is required".into()));
    }
    if spec.num_layers == 0 {
        return Err(Error::Generator("at least one layer is required".into()));
    }
    let things: Vec<usize> = vocab.thing_ids().collect();
    let total = spec.instances.unwrap_or(spec.symbols_per_room * spec.rooms);
    if total > 0 && things.is_empty() {
        return Err(Error::Generator(format!(
            "{total} thing instances requested but the {}-class vocabulary has no thing classes",
            spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut perm: Vec<usize> = (0..spec.num_layers).collect();
    if spec.shuffle_layers {
        perm.shuffle(&mut rng);
    }
    let layer_of_class = (0..spec.num_classes).map(|c| perm[c % spec.num_layers]).collect();

    let per_room = total.div_ceil(spec.rooms).max(1);
    let cell = 8.0 * (per_room as f64 / 4.0).sqrt().max(1.0);
    let cols = (spec.rooms as f64).sqrt().ceil() as usize;
    let rows = spec.rooms.div_ceil(cols);
    let rooms: Vec<Room> = (0..spec.rooms)
        .map(|i| {
            let (cx, cy) = ((i % cols) as f64 * cell, (i / cols) as f64 * cell);
            let x0 = cx + rng.random_range(0.3..0.8);
            let y0 = cy + rng.random_range(0.3..0.8);
            Room {
                x0,
                y0,
                x1: x0 + cell * rng.random_range(0.72..0.86),
                y1: y0 + cell * rng.random_range(0.72..0.86),
            }
        })
        .collect();

    let mut b = Builder {
        prims: Vec::new(),
        reserved: Vec::new(),
        layer_of_class,
    };

    for room in &rooms {
        let corners = [[room.x0, room.y0], [room.x1, room.y0], [room.x1, room.y1], [room.x0, room.y1]];
        for i in 0..4 {
            let (p, q) = (corners[i], corners[(i + 1) % 4]);
            let t = rng.random_range(0.3..0.7);
            let m = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
            b.emit(PrimitiveKind::PolylineEdge, seg(p, m), 0, STUFF_INSTANCE);
            b.emit(PrimitiveKind::PolylineEdge, seg(m, q), 0, STUFF_INSTANCE);
        }
    }

    if spec.num_classes > 7 {
        let room = rooms[0];
        let y = room.y0 + 0.35;
        let (x0, x1) = (room.x0 + 0.4, room.x0 + 0.4 + (room.x1 - room.x0) * 0.4);
        b.emit(PrimitiveKind::Segment, seg([x0, y], [x1, y]), 7, STUFF_INSTANCE);
        b.emit(PrimitiveKind::Segment, seg([x0, y + 0.1], [x1, y + 0.1]), 7, STUFF_INSTANCE);
        b.reserved.push([x0, y - 0.05, x1, y + 0.15]);
    }

    for inst in 0..total {
        let class = things[rng.random_range(0..things.len())];
        let template = Template::for_class(class);
        let room = rooms[inst % spec.rooms];
        let mut placed = None;
        for _ in 0..500 {
            let shapes = match template {
                Template::Door | Template::Window => wall_shapes(template, room, &mut rng),
                _ => {
                    let margin = 1.2;
                    let c = [
                        rng.random_range(room.x0 + margin..room.x1 - margin),
                        rng.random_range(room.y0 + margin..room.y1 - margin),
                    ];
                    thing_shapes(template, c, &mut rng)
                }
            };
            let bbox = shapes_bbox(&shapes);
            if b.free(&bbox, 0.3) {
                placed = Some((shapes, bbox));
                break;
            }
        }
        let Some((shapes, bbox)) = placed else {
            return Err(Error::Generator(format!(
                "could not place instance {inst} ({}) without overlap",
                vocab.name(class)
            )));
        };
        b.reserved.push(bbox);
        for (kind, g) in shapes {
            b.emit(kind, g, class, inst as i64);
        }
    }

    let width = cols as f64 * cell;
    let height = rows as f64 * cell;
    Drawing::new(format!("synth-{seed}"), width, height, spec.num_layers, vocab, b.prims)
}

/// `count` drawings with consecutive seeds starting at `seed`.
pub fn generate_set(seed: u64, count: usize, spec: &GeneratorSpec) -> Result<Vec<Drawing>> {
    (0..count as u64).map(|i| generate_synthetic(seed + i, spec)).collect()
}
