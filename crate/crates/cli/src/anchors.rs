use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use lesionkit::anchor_opt::{de_optimize, AnchorError, DeSettings, ObjectiveMode, DEFAULT_SIZES};
use lesionkit::geometry::{AnchorPlacement, BBox};
use lesionkit::ingest::{parse_box_list, read_annotations, IngestError};

use crate::run::{parse_split, sibling, CmdResult, Failure, Staged, EXIT_EMPTY};

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum ObjectiveArg {
    MeanIou,
    FocalWeighted,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum PlacementArg {
    Centered,
    Strided,
}

#[derive(Debug, Args, Serialize)]
pub struct AnchorArgs {
    /// Annotation CSV, or a plain box list with --box-list.
    pub input: PathBuf,
    /// Read INPUT as one `x1 y1 x2 y2` box per line.
    #[arg(long)]
    pub box_list: bool,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Base anchor sizes in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES)]
    pub sizes: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub population: usize,
    #[arg(long, default_value_t = 100)]
    pub generations: usize,
    /// Differential weight F.
    #[arg(long, default_value_t = 0.8)]
    pub weight: f64,
    /// Crossover probability CR.
    #[arg(long, default_value_t = 0.9)]
    pub crossover: f64,
    #[arg(long, value_enum, default_value = "mean-iou")]
    pub objective: ObjectiveArg,
    #[arg(long, value_enum, default_value = "centered")]
    pub placement: PlacementArg,
    /// Rescale annotated boxes to a FRAME x FRAME image first; 0 keeps native pixels.
    #[arg(long, default_value_t = 512.0)]
    pub frame: f64,
    /// Config file to write; the trace goes to `<out>.trace.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct TraceFile<'a> {
    objective: f64,
    genome: [f64; 5],
    scales: &'a [f64],
    ratios: &'a [f64],
    corpus_size: usize,
    trace: &'a [f64],
}

impl AnchorArgs {
    pub fn out_path(&self, out_dir: &std::path::Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| out_dir.join("anchors.cfg"))
    }

    fn settings(&self) -> DeSettings {
        DeSettings {
            population_size: self.population,
            weight: self.weight,
            crossover: self.crossover,
            max_generations: self.generations,
            seed: self.seed,
            objective_mode: match self.objective {
                ObjectiveArg::MeanIou => ObjectiveMode::MeanIou,
                ObjectiveArg::FocalWeighted => ObjectiveMode::FocalWeighted,
            },
            placement: match self.placement {
                PlacementArg::Centered => AnchorPlacement::Centered,
                PlacementArg::Strided => AnchorPlacement::Strided,
            },
            ..DeSettings::default()
        }
    }

    fn corpus(&self) -> CmdResult<Vec<BBox>> {
        if self.box_list {
            let text = std::fs::read_to_string(&self.input)
                .with_context(|| format!("reading {}", self.input.display()))
                .map_err(Failure::bad_input)?;
            return parse_box_list(&text).map_err(Failure::bad_input);
        }
        let split = parse_split(&self.split)?;
        let report = read_annotations(&self.input)
            .map_err(|e: IngestError| Failure::bad_input(anyhow::Error::new(e).context(self.input.display().to_string())))?;
        for r in &report.rejects {
            warn!("row {} ({}) rejected: {}", r.row, r.file_name, r.reason);
        }
        report
            .split(split)
            .map(|r| {
                if self.frame > 0.0 {
                    let (w, h) = r.image_size;
                    r.bbox.scaled(self.frame / w as f64, self.frame / h as f64)
                } else {
                    Ok(r.bbox)
                }
            })
            .collect::<Result<_, _>>()
            .map_err(Failure::bad_input)
    }
}

pub fn run(args: &AnchorArgs, out: PathBuf) -> CmdResult<Vec<PathBuf>> {
    let corpus = args.corpus()?;
    if corpus.is_empty() {
        return Err(Failure::new(EXIT_EMPTY, anyhow::anyhow!("split {:?} has no boxes", args.split)));
    }
    info!("searching anchors for {} boxes", corpus.len());
    let search = de_optimize(&corpus, &args.sizes, &args.settings()).map_err(|e| match e {
        AnchorError::EmptyCorpus => Failure::new(EXIT_EMPTY, e),
        other => Failure::bad_input(other),
    })?;
    info!("best coverage {:.6}", search.objective);

    let trace = TraceFile {
        objective: search.objective,
        genome: search.genome.to_array(),
        scales: &search.config.scales,
        ratios: &search.config.ratios,
        corpus_size: corpus.len(),
        trace: &search.trace,
    };
    let mut staged = Staged::default();
    staged.write(&out, search.config.to_config_text().as_bytes())?;
    staged.write(&sibling(&out, ".trace.json"), &serde_json::to_vec_pretty(&trace).map_err(Failure::bad_input)?)?;
    Ok(staged.commit()?)
}
