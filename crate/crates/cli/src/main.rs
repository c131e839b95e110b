mod anchors;
mod evaluate;
mod masks;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run::{sibling, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "lesionkit", version, about = "Anchor search, RECIST pseudo-masks and FROC evaluation")]
struct Cli {
    /// Default directory for outputs not given explicitly.
    #[arg(long, global = true, env = "LESIONKIT_OUT_DIR", default_value = "lesionkit-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Search anchor scales and ratios that best cover a split's boxes.
    OptimizeAnchors(anchors::AnchorArgs),
    /// Turn RECIST marks into lesion masks with GrabCut.
    GenerateMasks(masks::MaskArgs),
    /// FROC evaluation of detections against a split.
    Evaluate(evaluate::EvalArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let (mut manifest, manifest_path, result) = match &cli.command {
        Command::OptimizeAnchors(a) => {
            let out = a.out_path(&cli.out_dir);
            let m = RunManifest::start("optimize-anchors", vec![a.input.clone()], Some(a.seed), serde_json::json!(a));
            (m, sibling(&out, ".manifest.json"), anchors::run(a, out))
        }
        Command::GenerateMasks(a) => {
            let out = a.out_path(&cli.out_dir);
            let inputs = vec![a.annotations.clone(), a.images.clone()];
            let m = RunManifest::start("generate-masks", inputs, Some(a.seed), serde_json::json!(a));
            (m, out.join("run_manifest.json"), masks::run(a, out))
        }
        Command::Evaluate(a) => {
            let out = a.out_path(&cli.out_dir);
            let inputs = vec![a.detections.clone(), a.annotations.clone()];
            let m = RunManifest::start("evaluate", inputs, None, serde_json::json!(a));
            (m, out.join("run_manifest.json"), evaluate::run(a, out))
        }
    };

    manifest.finish(&result);
    if let Err(e) = manifest.write(&manifest_path) {
        log::error!("could not write {}: {e}", manifest_path.display());
    }
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
