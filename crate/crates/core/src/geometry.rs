//! Box arithmetic, RECIST quadrilaterals and anchor shapes.
//!
//! Boxes are half-open continuous rectangles `[x1, x2) x [y1, y2)` in pixel
//! units. Pixel `(i, j)` occupies `[i, i + 1) x [j, j + 1)` and its center is
//! `(i + 0.5, j + 0.5)`, so integer boxes have exact areas and IoUs.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor_opt::AnchorConfig;

/// Three points closer to a line than this (as the sine of the angle
/// between them) make a quadrilateral degenerate.
pub const COLLINEAR_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2 with finite coordinates")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("invalid RECIST diameters: {0}")]
    InvalidRecist(&'static str),
    #[error("degenerate quadrilateral: three RECIST endpoints are collinear")]
    DegenerateQuadrilateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned box covering `[x1, x2) x [y1, y2)`.
///
/// Serializes as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Box of the given size centered on `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        BBox::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Half-open containment, matching the pixel convention.
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x < self.x2 && p.y >= self.y1 && p.y < self.y2
    }

    /// Closed containment; used for annotation endpoints that may sit on an edge.
    pub fn contains_closed(&self, p: Point) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn scaled(&self, sx: f64, sy: f64) -> Result<BBox, GeometryError> {
        BBox::new(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)
    }
}

impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// A RECIST measurement: the long axis and the perpendicular short axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecistDiameters {
    long_axis: (Point, Point),
    short_axis: (Point, Point),
}

impl RecistDiameters {
    pub fn new(long_axis: (Point, Point), short_axis: (Point, Point)) -> Result<Self, GeometryError> {
        let pts = [long_axis.0, long_axis.1, short_axis.0, short_axis.1];
        if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::InvalidRecist("non-finite endpoint"));
        }
        if long_axis.0 == long_axis.1 || short_axis.0 == short_axis.1 {
            return Err(GeometryError::InvalidRecist("axis has zero length"));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if pts[i] == pts[j] {
                    return Err(GeometryError::InvalidRecist("endpoints are not pairwise distinct"));
                }
            }
        }
        Ok(RecistDiameters { long_axis, short_axis })
    }

    /// Builds from the 8-number layout `x1 y1 x2 y2` (long) then `x3 y3 x4 y4` (short).
    pub fn from_coords(c: [f64; 8]) -> Result<Self, GeometryError> {
        RecistDiameters::new(
            (Point::new(c[0], c[1]), Point::new(c[2], c[3])),
            (Point::new(c[4], c[5]), Point::new(c[6], c[7])),
        )
    }

    pub fn long_axis(&self) -> (Point, Point) {
        self.long_axis
    }

    pub fn short_axis(&self) -> (Point, Point) {
        self.short_axis
    }

    pub fn endpoints(&self) -> [Point; 4] {
        [self.long_axis.0, self.long_axis.1, self.short_axis.0, self.short_axis.1]
    }

    pub fn long_length(&self) -> f64 {
        self.long_axis.0.distance(self.long_axis.1)
    }

    pub fn short_length(&self) -> f64 {
        self.short_axis.0.distance(self.short_axis.1)
    }
}

/// Four vertices in counter-clockwise angular order (in a y-up frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrilateral {
    vertices: [Point; 4],
}

impl Quadrilateral {
    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn centroid(&self) -> Point {
        let (sx, sy) = self
            .vertices
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / 4.0, sy / 4.0)
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let twice: f64 = (0..4)
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % 4]);
                a.x * b.y - b.x * a.y
            })
            .sum();
        twice.abs() / 2.0
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        (0..4).map(move |i| (self.vertices[i], self.vertices[(i + 1) % 4]))
    }

    /// True if `p` is inside or on the boundary.
    pub fn contains(&self, p: Point) -> bool {
        point_in_quadrilateral(p, self)
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn nearly_collinear(a: Point, b: Point, c: Point) -> bool {
    let scale = a.distance(b) * a.distance(c);
    scale == 0.0 || cross(a, b, c).abs() <= COLLINEAR_TOLERANCE * scale
}

/// Orders the RECIST endpoints by polar angle around their centroid.
///
/// Angles are taken in `[0, 2pi)`, so the first vertex is the one closest to
/// the positive x direction.
pub fn order_quadrilateral(r: &RecistDiameters) -> Result<Quadrilateral, GeometryError> {
    let pts = r.endpoints();
    for i in 0..4 {
        for j in i + 1..4 {
            for k in j + 1..4 {
                if nearly_collinear(pts[i], pts[j], pts[k]) {
                    return Err(GeometryError::DegenerateQuadrilateral);
                }
            }
        }
    }
    let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mut keyed: Vec<(f64, Point)> = pts
        .iter()
        .map(|&p| ((p.y - cy).atan2(p.x - cx).rem_euclid(TAU), p))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Quadrilateral {
        vertices: [keyed[0].1, keyed[1].1, keyed[2].1, keyed[3].1],
    })
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    let len = a.distance(b);
    if cross(a, b, p).abs() > 1e-12 * len.max(1.0) * len.max(1.0) {
        return false;
    }
    p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// Boundary-inclusive point-in-polygon test (crossing number).
pub fn point_in_quadrilateral(p: Point, q: &Quadrilateral) -> bool {
    if q.edges().any(|(a, b)| on_segment(p, a, b)) {
        return true;
    }
    let mut inside = false;
    for (a, b) in q.edges() {
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Width and height of one anchor box, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub width: f64,
    pub height: f64,
}

impl AnchorShape {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

/// Shape for a base size, a scale and a `height / width` ratio.
///
/// The area is `(size * scale)^2` for every ratio.
pub fn anchor_shape(size: f64, scale: f64, ratio: f64) -> AnchorShape {
    let side = size * scale;
    let root = ratio.sqrt();
    AnchorShape {
        width: side / root,
        height: side * root,
    }
}

/// All `sizes x scales x ratios` shapes, size-major.
pub fn anchor_shapes(config: &AnchorConfig) -> Vec<AnchorShape> {
    let mut shapes =
        Vec::with_capacity(config.sizes.len() * config.scales.len() * config.ratios.len());
    for &size in &config.sizes {
        for &scale in &config.scales {
            for &ratio in &config.ratios {
                shapes.push(anchor_shape(size, scale, ratio));
            }
        }
    }
    shapes
}

/// How anchors are positioned relative to a ground-truth box when scoring overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPlacement {
    /// Every anchor is centered on the ground-truth center.
    #[default]
    Centered,
    /// Anchors sit on the pyramid grid of their level, at `(k + 0.5) * stride`.
    Strided,
}

fn centered_iou(gw: f64, gh: f64, shape: &AnchorShape) -> f64 {
    let inter = gw.min(shape.width) * gh.min(shape.height);
    inter / (gw * gh + shape.area() - inter)
}

/// Best IoU between `gt` and an anchor of any of `shapes` centered on it.
///
/// Returns 0 for an empty shape list.
pub fn best_anchor_iou(gt: &BBox, shapes: &[AnchorShape]) -> f64 {
    let (gw, gh) = (gt.width(), gt.height());
    shapes
        .iter()
        .map(|s| centered_iou(gw, gh, s))
        .fold(0.0, f64::max)
}

fn nearest_grid_center(c: f64, stride: f64) -> f64 {
    ((c / stride - 0.5).round() + 0.5) * stride
}

/// Best IoU when anchors of base size `config.sizes[i]` are only available at
/// the grid centers of stride `config.levels[i].stride`.
///
/// Along each axis the overlap shrinks monotonically with the center offset,
/// so the nearest grid center is the best placement for every shape.
pub fn best_anchor_iou_strided(gt: &BBox, config: &AnchorConfig) -> f64 {
    let c = gt.center();
    let mut best = 0.0f64;
    for (size, level) in config.sizes.iter().zip(&config.levels) {
        let stride = level.stride;
        let (ax, ay) = (nearest_grid_center(c.x, stride), nearest_grid_center(c.y, stride));
        for &scale in &config.scales {
            for &ratio in &config.ratios {
                let s = anchor_shape(*size, scale, ratio);
                if let Ok(anchor) = BBox::from_center(ax, ay, s.width, s.height) {
                    best = best.max(iou(gt, &anchor));
                }
            }
        }
    }
    best
}
