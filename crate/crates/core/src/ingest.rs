//! DeepLesion-style annotation parsing and CT slice preprocessing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::eval::{EvalError, GroundTruthLesion};
use crate::geometry::{BBox, RecistDiameters};
use crate::grid::Grid;

/// 16-bit PNG slices store `HU + 32768`.
pub const DEFAULT_HU_OFFSET: i32 = 32768;
/// Intensity window applied before normalization.
pub const HU_WINDOW: (f64, f64) = (-1024.0, 1050.0);
/// In-plane size of network inputs.
pub const TARGET_SIZE: (usize, usize) = (512, 512);
/// Through-plane spacing of the three-slice context.
pub const CONTEXT_SPACING_MM: f64 = 2.0;

pub const REQUIRED_COLUMNS: [&str; 7] = [
    "File_name",
    "Bounding_boxes",
    "Measurement_coordinates",
    "Spacing_mm_px_",
    "Image_size",
    "Train_Val_Test",
    "Coarse_lesion_type",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("key slice {0} is not available")]
    KeySliceMissing(i64),
    #[error("slice thickness must be positive, got {0}")]
    InvalidThickness(f64),
    #[error("line {line}: {reason}")]
    BoxList { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn from_code(code: &str) -> Option<Split> {
        match code.trim() {
            "1" => Some(Split::Train),
            "2" => Some(Split::Val),
            "3" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn from_name(name: &str) -> Option<Split> {
        match name.trim().to_ascii_lowercase().as_str() {
            "train" | "1" => Some(Split::Train),
            "val" | "validation" | "2" => Some(Split::Val),
            "test" | "3" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One annotated lesion on a key slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LesionRecord {
    pub file_name: String,
    pub bbox: BBox,
    pub recist: RecistDiameters,
    /// `(x, y, slice interval)` in millimetres.
    pub spacing_mm: (f64, f64, f64),
    pub image_size: (usize, usize),
    pub split: Split,
    /// Coarse type 1-8; `None` when unlabeled.
    pub lesion_type: Option<u8>,
}

impl LesionRecord {
    /// `000001_01_01_109.png` -> `000001_01_01_109`.
    pub fn image_stem(&self) -> &str {
        self.file_name.strip_suffix(".png").unwrap_or(&self.file_name)
    }

    /// Relative path of the key slice in the `<study>/<slice>.png` layout.
    pub fn slice_path(&self) -> PathBuf {
        let stem = self.image_stem();
        match stem.rsplit_once('_') {
            Some((study, slice)) => Path::new(study).join(format!("{slice}.png")),
            None => PathBuf::from(&self.file_name),
        }
    }

    fn axis_mm(&self, axis: (crate::geometry::Point, crate::geometry::Point)) -> f64 {
        let (sx, sy, _) = self.spacing_mm;
        ((axis.1.x - axis.0.x) * sx).hypot((axis.1.y - axis.0.y) * sy)
    }

    pub fn long_diameter_mm(&self) -> f64 {
        self.axis_mm(self.recist.long_axis())
    }

    pub fn short_diameter_mm(&self) -> f64 {
        self.axis_mm(self.recist.short_axis())
    }

    pub fn to_ground_truth(&self) -> Result<GroundTruthLesion, EvalError> {
        GroundTruthLesion::new(
            self.file_name.clone(),
            self.bbox,
            self.long_diameter_mm(),
            self.short_diameter_mm(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedRow {
    /// 1-based data row, not counting the header.
    pub row: usize,
    pub file_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnotationReport {
    pub records: Vec<LesionRecord>,
    pub rejects: Vec<RejectedRow>,
}

impl AnnotationReport {
    pub fn row_count(&self) -> usize {
        self.records.len() + self.rejects.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LesionRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Parses a comma-separated list of numbers such as `"10, 20.5, 30"`.
pub fn parse_number_list(cell: &str) -> Result<Vec<f64>, String> {
    cell.split(',')
        .map(|v| {
            let v = v.trim();
            v.parse::<f64>().map_err(|_| format!("not a number: {v:?}"))
        })
        .collect()
}

fn fixed<const N: usize>(cell: &str, what: &str) -> Result<[f64; N], String> {
    let values = parse_number_list(cell).map_err(|e| format!("{what}: {e}"))?;
    values
        .try_into()
        .map_err(|v: Vec<f64>| format!("{what}: expected {N} values, got {}", v.len()))
}

/// Reads the annotation table. Rows that violate a record invariant are
/// returned in `rejects`, never dropped.
pub fn parse_annotations<R: Read>(reader: R) -> Result<AnnotationReport, IngestError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut columns = [0usize; 7];
    for (slot, name) in columns.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MalformedHeader(format!("missing column {name:?}")))?;
    }
    let [c_file, c_bbox, c_recist, c_spacing, c_size, c_split, c_type] = columns;

    let mut report = AnnotationReport { records: Vec::new(), rejects: Vec::new() };
    for (i, row) in csv.records().enumerate() {
        let row_no = i + 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.rejects.push(RejectedRow { row: row_no, file_name: String::new(), reason: e.to_string() });
                continue;
            }
        };
        let cell = |c: usize| row.get(c).unwrap_or("");
        let file_name = cell(c_file).to_string();
        let parsed = (|| -> Result<LesionRecord, String> {
            if file_name.is_empty() {
                return Err("empty file name".into());
            }
            let [x1, y1, x2, y2] = fixed::<4>(cell(c_bbox), "Bounding_boxes")?;
            let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())?;
            let coords = fixed::<8>(cell(c_recist), "Measurement_coordinates")?;
            let recist = RecistDiameters::from_coords(coords).map_err(|e| e.to_string())?;
            let [sx, sy, sz] = fixed::<3>(cell(c_spacing), "Spacing_mm_px_")?;
            if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
                return Err("spacing must be positive".into());
            }
            let [w, h] = fixed::<2>(cell(c_size), "Image_size")?;
            if !(w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0) {
                return Err("image size must be positive integers".into());
            }
            let split = Split::from_code(cell(c_split))
                .ok_or_else(|| format!("unknown Train_Val_Test value {:?}", cell(c_split)))?;
            let lesion_type = match cell(c_type).parse::<i64>() {
                Ok(t @ 1..=8) => Some(t as u8),
                Ok(_) => None,
                Err(_) => return Err(format!("bad Coarse_lesion_type {:?}", cell(c_type))),
            };
            if bbox.x1() < 0.0 || bbox.y1() < 0.0 || bbox.x2() > w || bbox.y2() > h {
                return Err("bbox out of bounds".into());
            }
            if recist.endpoints().iter().any(|p| !bbox.contains_closed(*p)) {
                return Err("RECIST endpoint outside bbox".into());
            }
            Ok(LesionRecord {
                file_name: file_name.clone(),
                bbox,
                recist,
                spacing_mm: (sx, sy, sz),
                image_size: (w as usize, h as usize),
                split,
                lesion_type,
            })
        })();
        match parsed {
            Ok(r) => report.records.push(r),
            Err(reason) => report.rejects.push(RejectedRow { row: row_no, file_name, reason }),
        }
    }
    Ok(report)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationReport, IngestError> {
    parse_annotations(std::fs::File::open(path)?)
}

/// Parses one box per line as `x1 y1 x2 y2` (commas or whitespace);
/// blank lines and `#` comments are skipped.
pub fn parse_box_list(text: &str) -> Result<Vec<BBox>, IngestError> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| IngestError::BoxList { line: i + 1, reason };
        let values: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: {s:?}"))))
            .collect::<Result<_, _>>()?;
        let [x1, y1, x2, y2]: [f64; 4] = values
            .try_into()
            .map_err(|v: Vec<f64>| err(format!("expected 4 values, got {}", v.len())))?;
        boxes.push(BBox::new(x1, y1, x2, y2).map_err(|e| err(e.to_string()))?);
    }
    Ok(boxes)
}

pub fn decode_hu(value: u16) -> i32 {
    decode_hu_with_offset(value, DEFAULT_HU_OFFSET)
}

pub fn decode_hu_with_offset(value: u16, offset: i32) -> i32 {
    value as i32 - offset
}

/// Inverse of [`decode_hu`]; saturates outside the 16-bit range.
pub fn encode_hu(hu: i32) -> u16 {
    (hu + DEFAULT_HU_OFFSET).clamp(0, u16::MAX as i32) as u16
}

/// Clips to [`HU_WINDOW`] and maps linearly onto `[-1, 1]`.
pub fn normalize_hu(hu: f64) -> f64 {
    let (lo, hi) = HU_WINDOW;
    let v = hu.clamp(lo, hi);
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

/// Clips HU to the soft-tissue window, leaving values in HU.
pub fn clip_hu(hu: f64) -> f64 {
    hu.clamp(HU_WINDOW.0, HU_WINDOW.1)
}

/// Bilinear resize with pixel centers at half-integers and edge clamping.
pub fn resize_bilinear(src: &Grid<f64>, width: usize, height: usize) -> Grid<f64> {
    let (sw, sh) = src.dims();
    let sample = |pos: f64, n: usize| {
        let p = pos.clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    Grid::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = sample((x as f64 + 0.5) * sw as f64 / width as f64 - 0.5, sw);
        let (y0, y1, fy) = sample((y as f64 + 0.5) * sh as f64 / height as f64 - 0.5, sh);
        let top = src.get(x0, y0) * (1.0 - fx) + src.get(x1, y0) * fx;
        let bottom = src.get(x0, y1) * (1.0 - fx) + src.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Window, normalize to `[-1, 1]` and resize.
///
/// Panics on an empty grid.
pub fn preprocess_slice(hu: &Grid<f64>, target: (usize, usize)) -> Grid<f32> {
    assert!(!hu.is_empty(), "empty slice");
    let normalized = hu.map(|&v| normalize_hu(v));
    resize_bilinear(&normalized, target.0, target.1).map(|&v| (v as f32).clamp(-1.0, 1.0))
}

/// Three normalized channels: previous, key and next slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack {
    pub channels: [Grid<f32>; 3],
}

/// Slice index offset that lands nearest to `CONTEXT_SPACING_MM` away.
pub fn context_offset(thickness_mm: f64) -> i64 {
    (CONTEXT_SPACING_MM / thickness_mm).round() as i64
}

/// Picks the neighbors `CONTEXT_SPACING_MM` above and below the key slice
/// (nearest available native slice) and duplicates the key slice for any
/// missing neighbor.
pub fn assemble_context(
    slices: &BTreeMap<i64, Grid<f64>>,
    key: i64,
    thickness_mm: f64,
    target: (usize, usize),
) -> Result<SliceStack, IngestError> {
    if !(thickness_mm > 0.0 && thickness_mm.is_finite()) {
        return Err(IngestError::InvalidThickness(thickness_mm));
    }
    let key_slice = slices.get(&key).ok_or(IngestError::KeySliceMissing(key))?;
    let offset = context_offset(thickness_mm);
    let pick = |i: i64| slices.get(&i).unwrap_or(key_slice);
    Ok(SliceStack {
        channels: [
            preprocess_slice(pick(key - offset), target),
            preprocess_slice(key_slice, target),
            preprocess_slice(pick(key + offset), target),
        ],
    })
}

/// Writes a JSON header line followed by little-endian `f32` values in
/// channel-major, row-major order.
pub fn write_tensor_dump<W: Write>(stack: &SliceStack, mut out: W) -> std::io::Result<()> {
    let (w, h) = stack.channels[0].dims();
    let header = serde_json::json!({
        "dtype": "float32",
        "byte_order": "little",
        "order": "row-major",
        "shape": [3, h, w],
    });
    writeln!(out, "{header}")?;
    for ch in &stack.channels {
        for v in ch.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads a 16-bit grayscale PNG as raw stored values.
pub fn load_png16(path: &Path) -> Result<Grid<u16>, IngestError> {
    let img = image::open(path)
        .map_err(|source| IngestError::Image { path: path.to_path_buf(), source })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Grid::from_vec(w as usize, h as usize, img.into_raw()))
}

/// Loads a slice and converts it to HU.
pub fn load_hu_slice(path: &Path, offset: i32) -> Result<Grid<f64>, IngestError> {
    Ok(load_png16(path)?.map(|&v| decode_hu_with_offset(v, offset) as f64))
}
