//! Closed-form geometry of the supported primitive kinds.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Axis-aligned box `[min_x, min_y, max_x, max_y]`.
pub type BBox = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    Segment,
    Arc,
    Circle,
    Ellipse,
    PolylineEdge,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Segment => "segment",
            PrimitiveKind::Arc => "arc",
            PrimitiveKind::Circle => "circle",
            PrimitiveKind::Ellipse => "ellipse",
            PrimitiveKind::PolylineEdge => "polyline-edge",
        }
    }

    /// Kind code in `[0, 1]` used as a feature component.
    pub fn code(self) -> f64 {
        match self {
            PrimitiveKind::Segment => 0.0,
            PrimitiveKind::PolylineEdge => 0.25,
            PrimitiveKind::Arc => 0.5,
            PrimitiveKind::Circle => 0.75,
            PrimitiveKind::Ellipse => 1.0,
        }
    }
}

/// Control parameters in drawing units. Angles are radians, counterclockwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Segment { start: Point, end: Point },
    Arc { center: Point, radius: f64, start_angle: f64, end_angle: f64 },
    Circle { center: Point, radius: f64 },
    Ellipse { center: Point, rx: f64, ry: f64, rotation: f64 },
}

impl Geometry {
    /// Rejects non-finite parameters and shapes with zero length.
    pub fn validate(&self, kind: PrimitiveKind) -> Result<()> {
        let degenerate = |reason: &str| Error::DegeneratePrimitive {
            kind: kind.name(),
            reason: reason.to_string(),
        };
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match *self {
            Geometry::Segment { start, end } => {
                if !finite(&[start[0], start[1], end[0], end[1]]) {
                    return Err(degenerate("non-finite endpoint"));
                }
                if start == end {
                    return Err(degenerate("zero-length segment"));
                }
            }
            Geometry::Arc { center, radius, start_angle, end_angle } => {
                if !finite(&[center[0], center[1], radius, start_angle, end_angle]) {
                    return Err(degenerate("non-finite parameter"));
                }
                if radius <= 0.0 {
                    return Err(degenerate("non-positive radius"));
                }
                if start_angle == end_angle {
                    return Err(degenerate("zero sweep"));
                }
            }
            Geometry::Circle { center, radius } => {
                if !finite(&[center[0], center[1], radius]) {
                    return Err(degenerate("non-finite parameter"));
                }
                if radius <= 0.0 {
                    return Err(degenerate("non-positive radius"));
                }
            }
            Geometry::Ellipse { center, rx, ry, rotation } => {
                if !finite(&[center[0], center[1], rx, ry, rotation]) {
                    return Err(degenerate("non-finite parameter"));
                }
                if rx <= 0.0 || ry <= 0.0 {
                    return Err(degenerate("non-positive semi-axis"));
                }
            }
        }
        let len = self.arc_length();
        if !(len.is_finite() && len > 0.0) {
            return Err(degenerate("arc length not positive"));
        }
        Ok(())
    }

    pub fn arc_length(&self) -> f64 {
        match *self {
            Geometry::Segment { start, end } => (end[0] - start[0]).hypot(end[1] - start[1]),
            Geometry::Arc { radius, start_angle, end_angle, .. } => {
                radius * arc_sweep(start_angle, end_angle)
            }
            Geometry::Circle { radius, .. } => TAU * radius,
            Geometry::Ellipse { rx, ry, .. } => ellipse_perimeter(rx, ry),
        }
    }

    /// Reference point: segment and arc midpoints, circle and ellipse centers.
    pub fn midpoint(&self) -> Point {
        match *self {
            Geometry::Segment { start, end } => {
                [(start[0] + end[0]) / 2.0, (start[1] + end[1]) / 2.0]
            }
            Geometry::Arc { center, radius, start_angle, end_angle } => {
                let mid = start_angle + arc_sweep(start_angle, end_angle) / 2.0;
                [center[0] + radius * mid.cos(), center[1] + radius * mid.sin()]
            }
            Geometry::Circle { center, .. } | Geometry::Ellipse { center, .. } => center,
        }
    }

    /// Unit direction: segment direction, arc tangent at its midpoint,
    /// ellipse major-axis orientation, `(1, 0)` for circles.
    pub fn direction(&self) -> Point {
        match *self {
            Geometry::Segment { start, end } => {
                let (dx, dy) = (end[0] - start[0], end[1] - start[1]);
                let n = dx.hypot(dy);
                [dx / n, dy / n]
            }
            Geometry::Arc { start_angle, end_angle, .. } => {
                let mid = start_angle + arc_sweep(start_angle, end_angle) / 2.0;
                [-mid.sin(), mid.cos()]
            }
            Geometry::Circle { .. } => [1.0, 0.0],
            Geometry::Ellipse { rx, ry, rotation, .. } => {
                let a = if rx >= ry { rotation } else { rotation + PI / 2.0 };
                [a.cos(), a.sin()]
            }
        }
    }

    /// Fraction of a full turn covered by the primitive; 0 for straight edges.
    pub fn curvature_proxy(&self) -> f64 {
        match *self {
            Geometry::Segment { .. } => 0.0,
            Geometry::Arc { start_angle, end_angle, .. } => arc_sweep(start_angle, end_angle) / TAU,
            Geometry::Circle { .. } | Geometry::Ellipse { .. } => 1.0,
        }
    }

    pub fn bbox(&self) -> BBox {
        match *self {
            Geometry::Segment { start, end } => [
                start[0].min(end[0]),
                start[1].min(end[1]),
                start[0].max(end[0]),
                start[1].max(end[1]),
            ],
            Geometry::Arc { center, radius, start_angle, end_angle } => {
                let sweep = arc_sweep(start_angle, end_angle);
                let at = |a: f64| [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
                let mut pts = vec![at(start_angle), at(start_angle + sweep)];
                for k in 0..4 {
                    let axis = k as f64 * PI / 2.0;
                    let offset = (axis - start_angle).rem_euclid(TAU);
                    if offset <= sweep {
                        pts.push(at(axis));
                    }
                }
                bbox_of_points(&pts)
            }
            Geometry::Circle { center, radius } => [
                center[0] - radius,
                center[1] - radius,
                center[0] + radius,
                center[1] + radius,
            ],
            Geometry::Ellipse { center, rx, ry, rotation } => {
                let (c, s) = (rotation.cos(), rotation.sin());
                let hx = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let hy = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                [center[0] - hx, center[1] - hy, center[0] + hx, center[1] + hy]
            }
        }
    }

    /// Point at curve parameter `t ∈ [0, 1]`.
    pub fn point_at(&self, t: f64) -> Point {
        match *self {
            Geometry::Segment { start, end } => [
                start[0] + t * (end[0] - start[0]),
                start[1] + t * (end[1] - start[1]),
            ],
            Geometry::Arc { center, radius, start_angle, end_angle } => {
                let a = start_angle + t * arc_sweep(start_angle, end_angle);
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
            Geometry::Circle { center, radius } => {
                let a = t * TAU;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
            Geometry::Ellipse { center, rx, ry, rotation } => {
                let a = t * TAU;
                let (x, y) = (rx * a.cos(), ry * a.sin());
                let (c, s) = (rotation.cos(), rotation.sin());
                [center[0] + c * x - s * y, center[1] + s * x + c * y]
            }
        }
    }
}

/// Counterclockwise sweep from `start` to `end` in `(0, 2π]`.
pub fn arc_sweep(start: f64, end: f64) -> f64 {
    let sweep = (end - start).rem_euclid(TAU);
    if sweep == 0.0 {
        TAU
    } else {
        sweep
    }
}

/// Exact ellipse perimeter via the arithmetic-geometric mean.
pub fn ellipse_perimeter(rx: f64, ry: f64) -> f64 {
    let (mut a, mut b) = (rx.max(ry), rx.min(ry));
    let mut sum = (a * a - b * b) / 2.0;
    let mut pow = 0.5;
    for _ in 0..64 {
        if (a - b).abs() <= f64::EPSILON * a {
            break;
        }
        let c = (a - b) / 2.0;
        let (na, nb) = ((a + b) / 2.0, (a * b).sqrt());
        a = na;
        b = nb;
        pow *= 2.0;
        sum += pow * c * c;
    }
    let first = rx.max(ry);
    TAU / a * (first * first - sum)
}

pub fn bbox_of_points(pts: &[Point]) -> BBox {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for p in pts {
        b[0] = b[0].min(p[0]);
        b[1] = b[1].min(p[1]);
        b[2] = b[2].max(p[0]);
        b[3] = b[3].max(p[1]);
    }
    b
}

pub fn bbox_union(a: BBox, b: BBox) -> BBox {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Gauss-Legendre quadrature of |r'(t)| over [0, 1]; independent
    /// of the closed forms above.
    fn quadrature_length(g: &Geometry) -> f64 {
        const NODES: [f64; 5] = [
            -0.906_179_845_938_664,
            -0.538_469_310_105_683,
            0.0,
            0.538_469_310_105_683,
            0.906_179_845_938_664,
        ];
        const WEIGHTS: [f64; 5] = [
            0.236_926_885_056_189,
            0.478_628_670_499_366,
            0.568_888_888_888_889,
            0.478_628_670_499_366,
            0.236_926_885_056_189,
        ];
        let speed = |t: f64| {
            let h = 1e-6;
            let a = g.point_at((t - h).max(0.0));
            let b = g.point_at((t + h).min(1.0));
            let dt = (t + h).min(1.0) - (t - h).max(0.0);
            (b[0] - a[0]).hypot(b[1] - a[1]) / dt
        };
        let panels = 400;
        let mut total = 0.0;
        for p in 0..panels {
            let (lo, hi) = (p as f64 / panels as f64, (p + 1) as f64 / panels as f64);
            let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0);
            for (x, w) in NODES.iter().zip(WEIGHTS) {
                total += w * half * speed(mid + half * x);
            }
        }
        total
    }

    #[test]
    fn segment_midpoint_and_length() {
        let g = Geometry::Segment { start: [0.0, 0.0], end: [2.0, 0.0] };
        assert_eq!(g.midpoint(), [1.0, 0.0]);
        assert_eq!(g.arc_length(), 2.0);
    }

    #[test]
    fn circle_center_and_circumference() {
        let g = Geometry::Circle { center: [3.0, 4.0], radius: 1.0 };
        assert_eq!(g.midpoint(), [3.0, 4.0]);
        assert!((g.arc_length() - std::f64::consts::TAU).abs() < 1e-12);
    }

    #[test]
    fn quarter_arc_length_matches_quadrature() {
        let g = Geometry::Arc { center: [0.0, 0.0], radius: 2.0, start_angle: 0.0, end_angle: PI / 2.0 };
        let oracle = quadrature_length(&g);
        assert!((oracle - PI).abs() < 1e-6);
        assert!((g.arc_length() - oracle).abs() / oracle < 1e-6);
    }

    #[test]
    fn all_kinds_match_quadrature() {
        let shapes = [
            Geometry::Segment { start: [1.0, -2.0], end: [4.5, 3.0] },
            Geometry::Arc { center: [1.0, 1.0], radius: 0.7, start_angle: 5.5, end_angle: 1.0 },
            Geometry::Circle { center: [0.0, 0.0], radius: 3.3 },
            Geometry::Ellipse { center: [2.0, 1.0], rx: 5.0, ry: 0.5, rotation: 0.4 },
            Geometry::Ellipse { center: [0.0, 0.0], rx: 1.0, ry: 2.0, rotation: 0.0 },
            Geometry::Ellipse { center: [0.0, 0.0], rx: 10.0, ry: 0.1, rotation: 1.0 },
        ];
        for g in shapes {
            let oracle = quadrature_length(&g);
            let rel = (g.arc_length() - oracle).abs() / oracle;
            assert!(rel < 1e-6, "{g:?}: closed form {} vs quadrature {oracle}", g.arc_length());
        }
    }

    #[test]
    fn arc_wrapping_sweep() {
        assert!((arc_sweep(3.0 * PI / 2.0, PI / 2.0) - PI).abs() < 1e-12);
        assert_eq!(arc_sweep(0.0, TAU), TAU);
    }

    #[test]
    fn arc_bbox_includes_axis_extremes() {
        let g = Geometry::Arc { center: [0.0, 0.0], radius: 1.0, start_angle: -0.3, end_angle: 0.3 };
        let b = g.bbox();
        assert!((b[2] - 1.0).abs() < 1e-12);
        assert!((b[0] - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_shapes_rejected() {
        let seg = Geometry::Segment { start: [1.0, 1.0], end: [1.0, 1.0] };
        assert!(matches!(seg.validate(PrimitiveKind::Segment), Err(Error::DegeneratePrimitive { .. })));
        let circ = Geometry::Circle { center: [0.0, 0.0], radius: 0.0 };
        assert!(circ.validate(PrimitiveKind::Circle).is_err());
        let arc = Geometry::Arc { center: [0.0, 0.0], radius: 1.0, start_angle: 1.0, end_angle: 1.0 };
        assert!(arc.validate(PrimitiveKind::Arc).is_err());
    }
}
