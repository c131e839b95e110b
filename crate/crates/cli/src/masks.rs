use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Args;
use log::{error, info, warn};
use rayon::prelude::*;
use serde::Serialize;

use lesionkit::geometry::BBox;
use lesionkit::ingest::{load_hu_slice, read_annotations, LesionRecord, DEFAULT_HU_OFFSET};
use lesionkit::maskgen::{build_trimap, dice, grabcut, mask_to_box, GrabCutParams};

use crate::run::{parse_split, CmdResult, Failure, Staged, EXIT_FAILURE};

#[derive(Debug, Args, Serialize)]
pub struct MaskArgs {
    pub annotations: PathBuf,
    /// Root holding `<study>/<slice>.png` (or flat `<file_name>`) 16-bit slices.
    #[arg(long)]
    pub images: PathBuf,
    /// Output directory; defaults to `<out-dir>/masks`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to one split; all records by default.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    #[arg(long, default_value_t = 50.0)]
    pub gamma: f64,
    /// Gaussian components per class.
    #[arg(long, default_value_t = 5)]
    pub components: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Value stored for 0 HU in the PNG slices.
    #[arg(long, default_value_t = DEFAULT_HU_OFFSET)]
    pub hu_offset: i32,
}

impl MaskArgs {
    pub fn out_path(&self, out_dir: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| out_dir.join("masks"))
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    file_name: &'a str,
    lesion_index: usize,
    bbox: BBox,
    mask_box: Option<BBox>,
    foreground_pixels: usize,
    dice_vs_quadrilateral: f64,
    fallback: bool,
    energy_trace: &'a [f64],
    iterations: usize,
    gamma: f64,
    seed: u64,
}

struct Job<'a> {
    record: &'a LesionRecord,
    lesion_index: usize,
    image_path: PathBuf,
    seed: u64,
}

struct MaskResult {
    stem: String,
    png: Vec<u8>,
    sidecar: Vec<u8>,
    dice: f64,
    fallback: bool,
}

fn resolve_image(root: &Path, record: &LesionRecord) -> Option<PathBuf> {
    [root.join(record.slice_path()), root.join(&record.file_name)]
        .into_iter()
        .find(|p| p.is_file())
}

fn encode_png(width: usize, height: usize, bytes: Vec<u8>) -> anyhow::Result<Vec<u8>> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, bytes).ok_or_else(|| anyhow!("mask buffer size"))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

fn process(job: &Job, args: &MaskArgs) -> anyhow::Result<MaskResult> {
    let r = job.record;
    let image = load_hu_slice(&job.image_path, args.hu_offset)?;
    let trimap = build_trimap(&r.recist, &r.bbox, image.dims())?;
    let params = GrabCutParams { iterations: args.iters, components: args.components, gamma: args.gamma, seed: job.seed };
    let out = grabcut(&image, &trimap, &params)?;
    let quad_dice = dice(&out.mask, &trimap.hard_foreground());
    let sidecar = Sidecar {
        file_name: &r.file_name,
        lesion_index: job.lesion_index,
        bbox: r.bbox,
        mask_box: mask_to_box(&out.mask).ok(),
        foreground_pixels: out.mask.foreground_count(),
        dice_vs_quadrilateral: quad_dice,
        fallback: out.collapsed,
        energy_trace: &out.energy_trace,
        iterations: args.iters,
        gamma: args.gamma,
        seed: job.seed,
    };
    let (w, h) = image.dims();
    Ok(MaskResult {
        stem: format!("{}_lesion{}_mask", r.image_stem(), job.lesion_index),
        png: encode_png(w, h, out.mask.to_bytes())?,
        sidecar: serde_json::to_vec_pretty(&sidecar)?,
        dice: quad_dice,
        fallback: out.collapsed,
    })
}

pub fn run(args: &MaskArgs, out: PathBuf) -> CmdResult<Vec<PathBuf>> {
    let report = read_annotations(&args.annotations)
        .with_context(|| args.annotations.display().to_string())
        .map_err(Failure::bad_input)?;
    for r in &report.rejects {
        warn!("row {} ({}) rejected: {}", r.row, r.file_name, r.reason);
    }
    let split = args.split.as_deref().map(parse_split).transpose()?;
    let records: Vec<&LesionRecord> = report.records.iter().filter(|r| split.is_none_or(|s| r.split == s)).collect();

    let mut per_image: HashMap<&str, usize> = HashMap::new();
    let mut jobs = Vec::with_capacity(records.len());
    for (i, record) in records.iter().enumerate() {
        let image_path = resolve_image(&args.images, record).ok_or_else(|| {
            Failure::bad_input(anyhow!(
                "image for {} not found under {}",
                record.file_name,
                args.images.display()
            ))
        })?;
        let k = per_image.entry(&record.file_name).or_insert(0);
        jobs.push(Job { record, lesion_index: *k, image_path, seed: args.seed.wrapping_add(i as u64) });
        *k += 1;
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Failure::new(EXIT_FAILURE, e))?;
    let results: Vec<anyhow::Result<MaskResult>> = pool.install(|| jobs.par_iter().map(|j| process(j, args)).collect());

    let mut staged = Staged::default();
    let (mut written, mut fallbacks, mut failed, mut dice_sum) = (0usize, 0usize, 0usize, 0.0);
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(m) => {
                staged.write(&out.join(format!("{}.png", m.stem)), &m.png)?;
                staged.write(&out.join(format!("{}.json", m.stem)), &m.sidecar)?;
                written += 1;
                fallbacks += m.fallback as usize;
                dice_sum += m.dice;
                if m.fallback {
                    warn!("{} lesion {}: no unknown pixel kept, using quadrilateral", job.record.file_name, job.lesion_index);
                }
            }
            Err(e) => {
                failed += 1;
                error!("{} lesion {}: {e:#}", job.record.file_name, job.lesion_index);
            }
        }
    }
    let mean_dice = if written > 0 { dice_sum / written as f64 } else { 0.0 };
    std::fs::create_dir_all(&out)?;
    let outputs = staged.commit()?;
    info!("wrote {} files to {}", outputs.len(), out.display());
    println!("masks: {written} written, {fallbacks} fallback, {failed} failed, mean quadrilateral dice {mean_dice:.4}");
    Ok(outputs)
}
