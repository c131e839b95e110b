//! Detection scoring on a per-image basis: IoU matching, mask-coherence
//! calibration, FROC curves, sensitivity at fixed false-positive rates and
//! lesion-size groups.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox};

/// False-positive-per-image operating points reported in summary tables.
pub const STANDARD_FP_TARGETS: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
/// A detection must overlap a ground truth by strictly more than this.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("detections and ground truths of one image carry different image ids ({0:?} vs {1:?})")]
    MixedImageIds(String, String),
    #[error("evaluation set contains no ground-truth lesion")]
    NoGroundTruth,
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("lesion diameter must be positive, got {0}")]
    InvalidDiameter(f64),
}

/// `p * (1 + iou)`: a ranking score in `[0, 2]`, not a probability.
pub fn calibrate(score: f64, coherence_iou: f64) -> f64 {
    score * (1.0 + coherence_iou)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
    /// Box around the predicted segmentation mask, when the detector has one.
    pub mask_box: Option<BBox>,
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, score: f64) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::InvalidScore(score));
        }
        Ok(Detection { image_id: image_id.into(), bbox, score, mask_box: None })
    }

    pub fn with_mask_box(mut self, mask_box: BBox) -> Self {
        self.mask_box = Some(mask_box);
        self
    }

    pub fn coherence_iou(&self) -> f64 {
        self.mask_box.map_or(0.0, |m| iou(&self.bbox, &m))
    }

    pub fn calibrated_score(&self) -> f64 {
        calibrate(self.score, self.coherence_iou())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruthLesion {
    pub image_id: String,
    pub bbox: BBox,
    pub long_diameter_mm: f64,
    pub short_diameter_mm: f64,
}

impl GroundTruthLesion {
    pub fn new(
        image_id: impl Into<String>,
        bbox: BBox,
        long_diameter_mm: f64,
        short_diameter_mm: f64,
    ) -> Result<Self, EvalError> {
        for d in [long_diameter_mm, short_diameter_mm] {
            if !(d > 0.0 && d.is_finite()) {
                return Err(EvalError::InvalidDiameter(d));
            }
        }
        Ok(GroundTruthLesion { image_id: image_id.into(), bbox, long_diameter_mm, short_diameter_mm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DuplicatePolicy {
    /// Every detection overlapping some ground truth is correct, including
    /// several on the same lesion.
    #[default]
    AnyOverlap,
    /// Greedy one-to-one assignment by descending score; extra detections on
    /// an already matched lesion are false positives.
    OneToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    pub policy: DuplicatePolicy,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { iou_threshold: DEFAULT_IOU_THRESHOLD, policy: DuplicatePolicy::AnyOverlap }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMatch {
    /// Outcome per input detection, in input order.
    pub detections: Vec<Outcome>,
    /// For each detection, the ground truths it hits.
    pub hits: Vec<Vec<usize>>,
    /// Per ground truth, whether any correct detection hits it.
    pub gt_hit: Vec<bool>,
}

/// Input indices sorted by calibrated score, descending; ties keep input order.
fn ranking(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].calibrated_score().total_cmp(&dets[a].calibrated_score()));
    order
}

/// Matches the detections of one image against its ground truths.
pub fn match_image(
    dets: &[Detection],
    gts: &[GroundTruthLesion],
    config: &MatchConfig,
) -> Result<ImageMatch, EvalError> {
    let id = dets
        .first()
        .map(|d| &d.image_id)
        .or_else(|| gts.first().map(|g| &g.image_id));
    if let Some(id) = id {
        let stray = dets
            .iter()
            .map(|d| &d.image_id)
            .chain(gts.iter().map(|g| &g.image_id))
            .find(|other| *other != id);
        if let Some(other) = stray {
            return Err(EvalError::MixedImageIds(id.clone(), other.clone()));
        }
    }

    let mut outcomes = vec![Outcome::FalsePositive; dets.len()];
    let mut hits = vec![Vec::new(); dets.len()];
    let mut gt_hit = vec![false; gts.len()];
    let overlaps = |d: &Detection, g: &GroundTruthLesion| iou(&d.bbox, &g.bbox);

    for i in ranking(dets) {
        let d = &dets[i];
        match config.policy {
            DuplicatePolicy::AnyOverlap => {
                for (j, g) in gts.iter().enumerate() {
                    if overlaps(d, g) > config.iou_threshold {
                        hits[i].push(j);
                        gt_hit[j] = true;
                    }
                }
            }
            DuplicatePolicy::OneToOne => {
                let best = gts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| !gt_hit[*j])
                    .map(|(j, g)| (j, overlaps(d, g)))
                    .filter(|&(_, v)| v > config.iou_threshold)
                    .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                        Some((_, bv)) if bv >= v => acc,
                        _ => Some((j, v)),
                    });
                if let Some((j, _)) = best {
                    hits[i].push(j);
                    gt_hit[j] = true;
                }
            }
        }
        if !hits[i].is_empty() {
            outcomes[i] = Outcome::TruePositive;
        }
    }
    Ok(ImageMatch { detections: outcomes, hits, gt_hit })
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruthLesion>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>) -> Self {
        ImageRecord { image_id: image_id.into(), ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fp_per_image: f64,
    pub sensitivity: f64,
}

/// Operating points sorted by false positives per image, then sensitivity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrocCurve {
    points: Vec<OperatingPoint>,
}

impl FrocCurve {
    /// Sorts and deduplicates.
    pub fn from_points(mut points: Vec<OperatingPoint>) -> Self {
        points.sort_by(|a, b| {
            a.fp_per_image
                .total_cmp(&b.fp_per_image)
                .then(a.sensitivity.total_cmp(&b.sensitivity))
        });
        points.dedup();
        FrocCurve { points }
    }

    pub fn points(&self) -> &[OperatingPoint] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fp_per_image,sensitivity\n");
        for p in &self.points {
            writeln!(out, "{},{}", p.fp_per_image, p.sensitivity).unwrap();
        }
        out
    }
}

/// FROC curve over all ground truths.
pub fn froc_curve(images: &[ImageRecord], config: &MatchConfig) -> Result<FrocCurve, EvalError> {
    froc_curve_filtered(images, config, |_| true)
}

/// FROC curve whose sensitivity counts only ground truths accepted by
/// `keep`. Matching still runs against every ground truth, and every false
/// positive counts.
pub fn froc_curve_filtered(
    images: &[ImageRecord],
    config: &MatchConfig,
    keep: impl Fn(&GroundTruthLesion) -> bool,
) -> Result<FrocCurve, EvalError> {
    let total_gts: usize = images
        .iter()
        .map(|im| im.ground_truths.iter().filter(|g| keep(g)).count())
        .sum();
    if total_gts == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let n_images = images.len() as f64;

    // Each false positive contributes at its score; each kept ground truth
    // becomes detected at the highest score among the detections hitting it.
    let mut fp_scores = Vec::new();
    let mut first_hit = Vec::new();
    for im in images {
        let m = match_image(&im.detections, &im.ground_truths, config)?;
        let mut best = vec![f64::NEG_INFINITY; im.ground_truths.len()];
        for (i, d) in im.detections.iter().enumerate() {
            let s = d.calibrated_score();
            match m.detections[i] {
                Outcome::FalsePositive => fp_scores.push(s),
                Outcome::TruePositive => {
                    for &j in &m.hits[i] {
                        best[j] = best[j].max(s);
                    }
                }
            }
        }
        first_hit.extend(
            im.ground_truths
                .iter()
                .zip(best)
                .filter(|(g, _)| keep(g))
                .map(|(_, s)| s),
        );
    }

    let thresholds: BTreeSet<OrderedScore> = images
        .iter()
        .flat_map(|im| im.detections.iter().map(|d| OrderedScore(d.calibrated_score())))
        .collect();
    if thresholds.is_empty() {
        return Ok(FrocCurve::from_points(vec![OperatingPoint { fp_per_image: 0.0, sensitivity: 0.0 }]));
    }

    fp_scores.sort_by(|a, b| b.total_cmp(a));
    first_hit.sort_by(|a, b| b.total_cmp(a));
    let (mut fp_i, mut hit_i) = (0, 0);
    let mut points = Vec::with_capacity(thresholds.len());
    for OrderedScore(t) in thresholds.into_iter().rev() {
        while fp_i < fp_scores.len() && fp_scores[fp_i] >= t {
            fp_i += 1;
        }
        while hit_i < first_hit.len() && first_hit[hit_i] >= t {
            hit_i += 1;
        }
        points.push(OperatingPoint {
            fp_per_image: fp_i as f64 / n_images,
            sensitivity: hit_i as f64 / total_gts as f64,
        });
    }
    Ok(FrocCurve::from_points(points))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrderedScore(f64);

impl Eq for OrderedScore {}

impl PartialOrd for OrderedScore {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedScore {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Best sensitivity reachable at or below each false-positive target; 0
/// when no operating point qualifies.
pub fn sensitivity_at_fp(curve: &FrocCurve, targets: &[f64]) -> Vec<f64> {
    targets
        .iter()
        .map(|&t| {
            curve
                .points
                .iter()
                .filter(|p| p.fp_per_image <= t)
                .map(|p| p.sensitivity)
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SizeGroup {
    /// Below 10 mm.
    Small,
    /// From 10 mm up to, not including, 30 mm.
    Medium,
    /// 30 mm and above.
    Large,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 3] = [SizeGroup::Small, SizeGroup::Medium, SizeGroup::Large];

    pub fn of(diameter_mm: f64) -> SizeGroup {
        if diameter_mm < 10.0 {
            SizeGroup::Small
        } else if diameter_mm < 30.0 {
            SizeGroup::Medium
        } else {
            SizeGroup::Large
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SizeGroup::Small => "<10 mm",
            SizeGroup::Medium => "10-30 mm",
            SizeGroup::Large => ">30 mm",
        }
    }
}

/// Which RECIST axis decides a lesion's size group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeBasis {
    #[default]
    LongAxis,
    ShortAxis,
}

impl SizeBasis {
    pub fn diameter(self, gt: &GroundTruthLesion) -> f64 {
        match self {
            SizeBasis::LongAxis => gt.long_diameter_mm,
            SizeBasis::ShortAxis => gt.short_diameter_mm,
        }
    }
}

/// Indices of `gts` per size group.
pub fn stratify_by_diameter(gts: &[GroundTruthLesion], basis: SizeBasis) -> [(SizeGroup, Vec<usize>); 3] {
    let mut groups = SizeGroup::ALL.map(|g| (g, Vec::new()));
    for (i, gt) in gts.iter().enumerate() {
        let g = SizeGroup::of(basis.diameter(gt));
        groups[g as usize].1.push(i);
    }
    groups
}

/// Sensitivity at `targets` for each size group; groups without lesions are `None`.
pub fn sensitivity_by_size(
    images: &[ImageRecord],
    config: &MatchConfig,
    basis: SizeBasis,
    targets: &[f64],
) -> Vec<(SizeGroup, Option<Vec<f64>>)> {
    SizeGroup::ALL
        .iter()
        .map(|&group| {
            let curve = froc_curve_filtered(images, config, |g| SizeGroup::of(basis.diameter(g)) == group);
            (group, curve.ok().map(|c| sensitivity_at_fp(&c, targets)))
        })
        .collect()
}

fn format_target(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

/// One-row table in the layout `Method | 0.5 | 1 | 2 | 4 | 8 | 16`, with
/// sensitivities in percent to two decimals.
pub fn format_summary_table(method: &str, targets: &[f64], sensitivities: &[f64]) -> String {
    let mut out = String::new();
    let header: Vec<String> = targets.iter().map(|&t| format_target(t)).collect();
    writeln!(out, "| Method | {} |", header.join(" | ")).unwrap();
    writeln!(out, "|---|{}", "---|".repeat(targets.len())).unwrap();
    let cells: Vec<String> = sensitivities.iter().map(|s| format!("{:.2}", 100.0 * s)).collect();
    writeln!(out, "| {} | {} |", method, cells.join(" | ")).unwrap();
    out
}

/// Step-plot of the curve as a standalone SVG document.
pub fn froc_svg(curve: &FrocCurve, max_fp: f64) -> String {
    let (w, h, pad) = (480.0, 360.0, 48.0);
    let x_of = |fp: f64| pad + (fp.min(max_fp) / max_fp) * (w - 2.0 * pad);
    let y_of = |s: f64| h - pad - s * (h - 2.0 * pad);
    let mut path = String::new();
    let mut last_s = 0.0;
    write!(path, "M{:.2},{:.2}", x_of(0.0), y_of(0.0)).unwrap();
    for p in curve.points().iter().filter(|p| p.fp_per_image <= max_fp) {
        write!(path, " L{:.2},{:.2}", x_of(p.fp_per_image), y_of(last_s)).unwrap();
        write!(path, " L{:.2},{:.2}", x_of(p.fp_per_image), y_of(p.sensitivity)).unwrap();
        last_s = p.sensitivity;
    }
    write!(path, " L{:.2},{:.2}", x_of(max_fp), y_of(last_s)).unwrap();

    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<path d="M{pad},{pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .unwrap();
    for i in 0..=5 {
        let s = i as f64 / 5.0;
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{:.1}</text>"#,
            pad - 6.0,
            y_of(s) + 4.0,
            s
        )
        .unwrap();
    }
    for t in STANDARD_FP_TARGETS.iter().filter(|&&t| t <= max_fp) {
        writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            x_of(*t),
            h - pad + 16.0,
            format_target(*t)
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">false positives per image</text>"#,
        w / 2.0,
        h - 8.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="14" y="{:.2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {:.2})">sensitivity</text>"#,
        h / 2.0,
        h / 2.0
    )
    .unwrap();
    writeln!(svg, r#"<path d="{path}" fill="none" stroke="steelblue" stroke-width="2"/>"#).unwrap();
    svg.push_str("</svg>\n");
    svg
}

/// One line of a detections file: `{"image_id", "x1", "y1", "x2", "y2",
/// "score", "mask_box"?}` with `mask_box` as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub image_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_box: Option<BBox>,
}

impl From<&Detection> for DetectionLine {
    fn from(d: &Detection) -> Self {
        let [x1, y1, x2, y2] = d.bbox.to_array();
        DetectionLine { image_id: d.image_id.clone(), x1, y1, x2, y2, score: d.score, mask_box: d.mask_box }
    }
}

#[derive(Debug, Error)]
#[error("detections line {line}: {reason}")]
pub struct DetectionParseError {
    pub line: usize,
    pub reason: String,
}

/// Reads JSON-lines detections; blank lines are skipped.
pub fn parse_detections_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<Detection>, DetectionParseError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let err = |reason: String| DetectionParseError { line: i + 1, reason };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DetectionLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        let bbox = BBox::new(d.x1, d.y1, d.x2, d.y2).map_err(|e| err(e.to_string()))?;
        let mut det = Detection::new(d.image_id, bbox, d.score).map_err(|e| err(e.to_string()))?;
        if let Some(m) = d.mask_box {
            det = det.with_mask_box(m);
        }
        out.push(det);
    }
    Ok(out)
}
