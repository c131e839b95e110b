//! Dense lesion masks from RECIST measurements.
//!
//! The trimap marks pixels whose centers fall inside the quadrilateral spanned
//! by the four RECIST endpoints as hard foreground and pixels outside the
//! lesion box as hard background. GrabCut then labels the rest by alternating
//! per-class Gaussian mixture fits with an exact minimum cut of
//!
//! ```text
//! E(a) = sum_n D(a_n, z_n) + gamma * sum_{m~n} [a_m != a_n] exp(-beta (z_m - z_n)^2) / dist(m, n)
//! ```
//!
//! over the 8-neighborhood, where `D(a, z)` is the negative log-likelihood of
//! `z` under the best-fitting component of class `a`.

pub mod gmm;
pub mod maxflow;

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{order_quadrilateral, BBox, GeometryError, Point, Quadrilateral, RecistDiameters};
use crate::grid::Grid;
use gmm::{fit_gmm, refit_hard, Gmm1d, GmmError, VARIANCE_FLOOR};
use maxflow::{Capacity, Graph};

/// Energy terms are rounded to multiples of this before the cut.
pub const ENERGY_QUANTUM: f64 = 1e-6;
/// Hard terminal links cost this many times the largest finite capacity.
pub const HARD_LINK_FACTOR: Capacity = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("RECIST endpoint ({x}, {y}) lies outside the lesion box")]
    EndpointOutsideBox { x: f64, y: f64 },
    #[error("lesion box extends outside the {width}x{height} image")]
    BoxOutsideImage { width: usize, height: usize },
    #[error("trimap has no hard foreground pixel")]
    NoForeground,
    #[error("trimap has no hard background pixel")]
    NoBackground,
    #[error("image is {image:?} but trimap is {trimap:?}")]
    DimensionMismatch { image: (usize, usize), trimap: (usize, usize) },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error("mask has no foreground pixel")]
    EmptyMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrimapLabel {
    Foreground,
    Background,
    Unknown,
}

/// Hard foreground, hard background and unknown pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    labels: Grid<TrimapLabel>,
}

impl Trimap {
    /// Requires at least one hard foreground and one hard background pixel.
    pub fn new(labels: Grid<TrimapLabel>) -> Result<Self, MaskError> {
        let s = labels.as_slice();
        if !s.contains(&TrimapLabel::Foreground) {
            return Err(MaskError::NoForeground);
        }
        if !s.contains(&TrimapLabel::Background) {
            return Err(MaskError::NoBackground);
        }
        Ok(Trimap { labels })
    }

    pub fn labels(&self) -> &Grid<TrimapLabel> {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    pub fn get(&self, x: usize, y: usize) -> TrimapLabel {
        *self.labels.get(x, y)
    }

    /// `(foreground, background, unknown)` pixel counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        self.labels.as_slice().iter().fold((0, 0, 0), |(f, b, u), l| match l {
            TrimapLabel::Foreground => (f + 1, b, u),
            TrimapLabel::Background => (f, b + 1, u),
            TrimapLabel::Unknown => (f, b, u + 1),
        })
    }

    /// The hard foreground as a mask.
    pub fn hard_foreground(&self) -> LabelMask {
        LabelMask(self.labels.map(|l| *l == TrimapLabel::Foreground))
    }
}

fn pixel_center(x: usize, y: usize) -> Point {
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Builds the trimap for one lesion.
///
/// Pixels centered outside `bbox` are hard background, pixels centered in
/// the RECIST quadrilateral are hard foreground. When the quadrilateral is
/// too thin to contain any pixel center, the pixel under its centroid is used
/// as the foreground seed.
pub fn build_trimap(recist: &RecistDiameters, bbox: &BBox, dims: (usize, usize)) -> Result<Trimap, MaskError> {
    let (w, h) = dims;
    if bbox.x1() < 0.0 || bbox.y1() < 0.0 || bbox.x2() > w as f64 || bbox.y2() > h as f64 {
        return Err(MaskError::BoxOutsideImage { width: w, height: h });
    }
    if let Some(p) = recist.endpoints().into_iter().find(|p| !bbox.contains_closed(*p)) {
        return Err(MaskError::EndpointOutsideBox { x: p.x, y: p.y });
    }
    let quad = order_quadrilateral(recist)?;
    let mut labels = Grid::from_fn(w, h, |x, y| {
        let c = pixel_center(x, y);
        if !bbox.contains(c) {
            TrimapLabel::Background
        } else if quad.contains(c) {
            TrimapLabel::Foreground
        } else {
            TrimapLabel::Unknown
        }
    });
    if !labels.as_slice().contains(&TrimapLabel::Foreground) {
        seed_centroid(&mut labels, &quad, bbox);
    }
    Trimap::new(labels)
}

fn seed_centroid(labels: &mut Grid<TrimapLabel>, quad: &Quadrilateral, bbox: &BBox) {
    let c = quad.centroid();
    let (x, y) = (c.x.floor(), c.y.floor());
    if x >= 0.0 && y >= 0.0 && (x as usize) < labels.width() && (y as usize) < labels.height() {
        let (x, y) = (x as usize, y as usize);
        if bbox.contains(pixel_center(x, y)) {
            labels.set(x, y, TrimapLabel::Foreground);
        }
    }
}

/// Unordered 8-neighbor pairs `(m, n, distance)` in raster order.
fn neighbor_pairs(w: usize, h: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    const OFFSETS: [(isize, isize, f64); 4] = [
        (1, 0, 1.0),
        (0, 1, 1.0),
        (1, 1, std::f64::consts::SQRT_2),
        (-1, 1, std::f64::consts::SQRT_2),
    ];
    (0..h).flat_map(move |y| {
        (0..w).flat_map(move |x| {
            OFFSETS.iter().filter_map(move |&(dx, dy, d)| {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                (nx >= 0 && (nx as usize) < w && (ny as usize) < h)
                    .then(|| (y * w + x, ny as usize * w + nx as usize, d))
            })
        })
    })
}

/// Contrast scale `1 / (2 * mean squared difference)` over 8-neighbor pairs;
/// 0 for a flat image.
pub fn compute_beta(image: &Grid<f64>) -> f64 {
    let z = image.as_slice();
    let (mut sum, mut count) = (0.0, 0usize);
    for (m, n, _) in neighbor_pairs(image.width(), image.height()) {
        let d = z[m] - z[n];
        sum += d * d;
        count += 1;
    }
    if count == 0 || sum == 0.0 {
        0.0
    } else {
        1.0 / (2.0 * sum / count as f64)
    }
}

/// Foreground and background intensity models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmmModel {
    pub foreground: Gmm1d,
    pub background: Gmm1d,
}

impl GmmModel {
    /// Data cost `D(class, z)`: the cheapest component's negative log joint.
    pub fn cost(&self, foreground: bool, z: f64) -> f64 {
        let g = if foreground { &self.foreground } else { &self.background };
        g.best_component(z).1
    }
}

/// Binary segmentation; `true` is foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask(pub Grid<bool>);

impl LabelMask {
    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn foreground_count(&self) -> usize {
        self.0.as_slice().iter().filter(|&&v| v).count()
    }

    /// 8-bit rendering: 255 for foreground, 0 for background.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.as_slice().iter().map(|&v| if v { 255 } else { 0 }).collect()
    }
}

pub fn quantize(v: f64) -> Capacity {
    (v / ENERGY_QUANTUM).round() as Capacity
}

/// Per-pixel data costs and neighbor weights for one image and model.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    width: usize,
    height: usize,
    /// `(foreground cost, background cost)` per pixel.
    pub unary: Vec<(f64, f64)>,
    /// `(m, n, weight)` per unordered neighbor pair.
    pub pairwise: Vec<(usize, usize, f64)>,
}

impl EnergyModel {
    pub fn new(image: &Grid<f64>, model: &GmmModel, gamma: f64, beta: f64) -> Self {
        let z = image.as_slice();
        let unary = z.iter().map(|&v| (model.cost(true, v), model.cost(false, v))).collect();
        let pairwise = neighbor_pairs(image.width(), image.height())
            .map(|(m, n, dist)| {
                let d = z[m] - z[n];
                (m, n, gamma * (-beta * d * d).exp() / dist)
            })
            .collect();
        EnergyModel { width: image.width(), height: image.height(), unary, pairwise }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn energy(&self, mask: &LabelMask) -> f64 {
        let a = mask.0.as_slice();
        let data: f64 = self
            .unary
            .iter()
            .zip(a)
            .map(|(&(f, b), &fg)| if fg { f } else { b })
            .sum();
        let smooth: f64 = self
            .pairwise
            .iter()
            .filter(|(m, n, _)| a[*m] != a[*n])
            .map(|(_, _, w)| w)
            .sum();
        data + smooth
    }

    /// The energy in units of [`ENERGY_QUANTUM`] with every term rounded
    /// individually. This is the quantity the cut minimizes exactly.
    pub fn quantized_energy(&self, mask: &LabelMask) -> Capacity {
        let a = mask.0.as_slice();
        let data: Capacity = self
            .unary
            .iter()
            .zip(a)
            .map(|(&(f, b), &fg)| quantize(if fg { f } else { b }))
            .sum();
        let smooth: Capacity = self
            .pairwise
            .iter()
            .filter(|(m, n, _)| a[*m] != a[*n])
            .map(|(_, _, w)| quantize(*w))
            .sum();
        data + smooth
    }

    /// Exact minimizer of [`EnergyModel::quantized_energy`] under the trimap's hard labels.
    pub fn minimize(&self, trimap: &Trimap) -> LabelMask {
        let n = self.width * self.height;
        let labels = trimap.labels().as_slice();
        let mut t_links = Vec::with_capacity(n);
        let mut max_finite: Capacity = 1;
        for (&(f, b), label) in self.unary.iter().zip(labels) {
            let link = match label {
                TrimapLabel::Unknown => {
                    let (qf, qb) = (quantize(f), quantize(b));
                    let base = qf.min(qb);
                    Some((qb - base, qf - base))
                }
                _ => None,
            };
            if let Some((s, t)) = link {
                max_finite = max_finite.max(s).max(t);
            }
            t_links.push(link);
        }
        let n_links: Vec<Capacity> = self.pairwise.iter().map(|(_, _, w)| quantize(*w)).collect();
        max_finite = n_links.iter().copied().fold(max_finite, Capacity::max);
        let hard = max_finite * HARD_LINK_FACTOR;

        let mut graph = Graph::with_edge_capacity(n, self.pairwise.len());
        for (i, (link, label)) in t_links.iter().zip(labels).enumerate() {
            match (link, label) {
                (Some((s, t)), _) => graph.add_terminal_weights(i, *s, *t),
                (None, TrimapLabel::Foreground) => graph.add_terminal_weights(i, hard, 0),
                (None, _) => graph.add_terminal_weights(i, 0, hard),
            }
        }
        for (&(m, n, _), &cap) in self.pairwise.iter().zip(&n_links) {
            if cap > 0 {
                graph.add_edge(m, n, cap, cap);
            }
        }
        graph.maxflow();
        LabelMask(Grid::from_vec(
            self.width,
            self.height,
            (0..n).map(|i| graph.in_source_segment(i)).collect(),
        ))
    }
}

fn check_dims(image: &Grid<f64>, trimap: &Trimap) -> Result<(), MaskError> {
    if image.dims() != trimap.dims() {
        return Err(MaskError::DimensionMismatch { image: image.dims(), trimap: trimap.dims() });
    }
    Ok(())
}

/// Minimum-energy labeling for fixed intensity models.
pub fn graph_cut_segment(
    image: &Grid<f64>,
    trimap: &Trimap,
    model: &GmmModel,
    gamma: f64,
    beta: f64,
) -> Result<LabelMask, MaskError> {
    check_dims(image, trimap)?;
    if !(gamma >= 0.0 && gamma.is_finite()) || !(beta >= 0.0 && beta.is_finite()) {
        return Err(MaskError::InvalidParameter("gamma and beta must be finite and non-negative"));
    }
    Ok(EnergyModel::new(image, model, gamma, beta).minimize(trimap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrabCutParams {
    pub iterations: usize,
    /// Components per class.
    pub components: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GrabCutParams {
    fn default() -> Self {
        GrabCutParams { iterations: 5, components: 5, gamma: 50.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrabCutOutput {
    pub mask: LabelMask,
    /// Energy after each cut.
    pub energy_trace: Vec<f64>,
    /// No unknown pixel ended in the foreground; the mask equals the hard foreground.
    pub collapsed: bool,
    pub model: GmmModel,
}

fn class_samples(image: &Grid<f64>, select: impl Fn(usize) -> bool) -> Vec<f64> {
    image
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(i, _)| select(*i))
        .map(|(_, &z)| z)
        .collect()
}

fn fit_class(samples: &[f64], k: usize, seed: u64) -> Result<Gmm1d, MaskError> {
    Ok(fit_gmm(samples, k.min(samples.len()), seed)?)
}

fn refit_class(image: &Grid<f64>, mask: &LabelMask, foreground: bool, previous: &Gmm1d) -> Gmm1d {
    let samples = class_samples(image, |i| mask.0.as_slice()[i] == foreground);
    let assignments: Vec<usize> = samples.iter().map(|&z| previous.best_component(z).0).collect();
    refit_hard(&samples, &assignments, previous, VARIANCE_FLOOR)
}

/// Iterated graph-cut segmentation seeded by a trimap.
///
/// The intensity models start from the hard pixels of each class. Every
/// later iteration assigns pixels to their best component within their
/// current class, refits the components and recomputes the cut, so the
/// energy trace never increases.
pub fn grabcut(image: &Grid<f64>, trimap: &Trimap, params: &GrabCutParams) -> Result<GrabCutOutput, MaskError> {
    check_dims(image, trimap)?;
    if params.iterations == 0 {
        return Err(MaskError::InvalidParameter("iterations must be at least 1"));
    }
    if params.components == 0 {
        return Err(MaskError::InvalidParameter("components must be at least 1"));
    }
    let labels = trimap.labels().as_slice();
    let beta = compute_beta(image);
    let fg = class_samples(image, |i| labels[i] == TrimapLabel::Foreground);
    let bg = class_samples(image, |i| labels[i] == TrimapLabel::Background);
    let mut model = GmmModel {
        foreground: fit_class(&fg, params.components, params.seed)?,
        background: fit_class(&bg, params.components, params.seed.wrapping_add(1))?,
    };

    let mut mask = graph_cut_segment(image, trimap, &model, params.gamma, beta)?;
    let mut energy_trace = vec![EnergyModel::new(image, &model, params.gamma, beta).energy(&mask)];
    for _ in 1..params.iterations {
        model = GmmModel {
            foreground: refit_class(image, &mask, true, &model.foreground),
            background: refit_class(image, &mask, false, &model.background),
        };
        let energy = EnergyModel::new(image, &model, params.gamma, beta);
        mask = energy.minimize(trimap);
        energy_trace.push(energy.energy(&mask));
    }

    let collapsed = !mask
        .0
        .as_slice()
        .iter()
        .zip(labels)
        .any(|(&fg, &l)| fg && l == TrimapLabel::Unknown);
    if collapsed {
        mask = trimap.hard_foreground();
    }
    Ok(GrabCutOutput { mask, energy_trace, collapsed, model })
}

/// Tight half-open box around the foreground pixels.
pub fn mask_to_box(mask: &LabelMask) -> Result<BBox, MaskError> {
    let g = &mask.0;
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for y in 0..g.height() {
        for x in 0..g.width() {
            if *g.get(x, y) {
                extent = Some(match extent {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    let (x0, y0, x1, y1) = extent.ok_or(MaskError::EmptyMask)?;
    Ok(BBox::new(x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0)?)
}

/// Dice overlap of two foreground sets; 1 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask) -> f64 {
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.0.as_slice().iter().zip(b.0.as_slice()) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}
