use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, ValueEnum};
use log::warn;
use serde::Serialize;

use lesionkit::eval::{
    format_summary_table, froc_curve, froc_svg, parse_detections_jsonl, sensitivity_at_fp, sensitivity_by_size,
    DuplicatePolicy, EvalError, ImageRecord, MatchConfig, SizeBasis, DEFAULT_IOU_THRESHOLD, STANDARD_FP_TARGETS,
};
use lesionkit::ingest::read_annotations;

use crate::run::{parse_split, CmdResult, Failure, Staged, EXIT_EMPTY};

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum PolicyArg {
    AnyOverlap,
    OneToOne,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum SizeBasisArg {
    Long,
    Short,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// JSON-lines detections.
    pub detections: PathBuf,
    pub annotations: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// False positives per image at which sensitivity is reported.
    #[arg(long, value_delimiter = ',', default_values_t = STANDARD_FP_TARGETS)]
    pub fp: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou: f64,
    #[arg(long, value_enum, default_value = "any-overlap")]
    pub policy: PolicyArg,
    /// RECIST diameter used for size groups.
    #[arg(long, value_enum, default_value = "long")]
    pub size_basis: SizeBasisArg,
    /// Row label in the summary table.
    #[arg(long, default_value = "model")]
    pub method: String,
    /// Output directory; defaults to `<out-dir>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    pub fn out_path(&self, out_dir: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| out_dir.join("eval"))
    }
}

fn format_sensitivity_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
}

pub fn run(args: &EvalArgs, out: PathBuf) -> CmdResult<Vec<PathBuf>> {
    if args.fp.is_empty() {
        return Err(Failure::bad_input(anyhow!("--fp needs at least one target")));
    }
    let split = parse_split(&args.split)?;
    let report = read_annotations(&args.annotations)
        .with_context(|| args.annotations.display().to_string())
        .map_err(Failure::bad_input)?;
    for r in &report.rejects {
        warn!("row {} ({}) rejected: {}", r.row, r.file_name, r.reason);
    }
    let file = File::open(&args.detections)
        .with_context(|| args.detections.display().to_string())
        .map_err(Failure::bad_input)?;
    let detections = parse_detections_jsonl(BufReader::new(file)).map_err(Failure::bad_input)?;

    let mut images: BTreeMap<String, ImageRecord> = BTreeMap::new();
    for r in report.split(split) {
        let gt = r.to_ground_truth().map_err(Failure::bad_input)?;
        images.entry(r.file_name.clone()).or_insert_with(|| ImageRecord::new(&r.file_name)).ground_truths.push(gt);
    }
    let known: std::collections::HashSet<&str> = report.records.iter().map(|r| r.file_name.as_str()).collect();
    let mut other_split = 0usize;
    for d in detections {
        match images.get_mut(&d.image_id) {
            Some(im) => im.detections.push(d),
            None if known.contains(d.image_id.as_str()) => other_split += 1,
            None => return Err(Failure::bad_input(anyhow!("detection references unknown image {:?}", d.image_id))),
        }
    }
    if other_split > 0 {
        warn!("ignored {other_split} detections on images outside split {:?}", args.split);
    }
    let images: Vec<ImageRecord> = images.into_values().collect();

    let config = MatchConfig {
        iou_threshold: args.iou,
        policy: match args.policy {
            PolicyArg::AnyOverlap => DuplicatePolicy::AnyOverlap,
            PolicyArg::OneToOne => DuplicatePolicy::OneToOne,
        },
    };
    let curve = froc_curve(&images, &config).map_err(|e| match e {
        EvalError::NoGroundTruth => Failure::new(EXIT_EMPTY, anyhow!("split {:?} has no ground-truth lesions", args.split)),
        other => Failure::bad_input(other),
    })?;
    let sens = sensitivity_at_fp(&curve, &args.fp);
    let table = format_summary_table(&args.method, &args.fp, &sens);

    let basis = match args.size_basis {
        SizeBasisArg::Long => SizeBasis::LongAxis,
        SizeBasisArg::Short => SizeBasis::ShortAxis,
    };
    let mut groups = String::from("group,lesions");
    for t in &args.fp {
        write!(groups, ",{t}").unwrap();
    }
    groups.push('\n');
    let counts = lesionkit::eval::stratify_by_diameter(
        &images.iter().flat_map(|im| im.ground_truths.iter().cloned()).collect::<Vec<_>>(),
        basis,
    );
    for ((group, values), (_, members)) in sensitivity_by_size(&images, &config, basis, &args.fp).into_iter().zip(&counts) {
        let row = values.map(|v| format_sensitivity_row(&v)).unwrap_or_else(|| vec![""; args.fp.len()].join(","));
        writeln!(groups, "{},{},{row}", group.label(), members.len()).unwrap();
    }

    let max_fp = args.fp.iter().copied().fold(0.0, f64::max);
    let mut staged = Staged::default();
    staged.write(&out.join("summary.md"), table.as_bytes())?;
    staged.write(&out.join("froc.csv"), curve.to_csv().as_bytes())?;
    staged.write(&out.join("froc.svg"), froc_svg(&curve, max_fp).as_bytes())?;
    staged.write(&out.join("size_groups.csv"), groups.as_bytes())?;
    let outputs = staged.commit()?;
    print!("{table}");
    Ok(outputs)
}
