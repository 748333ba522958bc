use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::{Deserialize, Serialize};

use lungforge::contrastive::{pretrain_encoder, EncoderSpec, PretrainConfig};
use lungforge::image::GrayImage;
use lungforge::model::ModelParams;

use crate::error::CliResult;
use crate::inputs::{file_name, load_dir, read_toml};
use crate::run::{parent_dir, sibling_manifest, write_json, OutputLock, Run};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory of unlabeled images.
    #[arg(long)]
    corpus: PathBuf,
    /// TOML file with optional [encoder] and [pretrain] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Enhance every image with this checkpoint before augmentation.
    #[arg(long)]
    enhancer: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON loss report path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    encoder: EncoderSpec,
    pretrain: PretrainConfig,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    config: &'a FileConfig,
    corpus: &'a Path,
    enhancer: Option<&'a Path>,
    images: Vec<String>,
}

pub fn run(args: Args) -> CliResult<ExitCode> {
    let mut config: FileConfig = read_toml(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        config.pretrain.epochs = e;
    }
    if let Some(s) = args.seed {
        config.pretrain.seed = s;
    }
    config.encoder.validate()?;
    config.pretrain.validate()?;
    let enhancer = args.enhancer.as_ref().map(ModelParams::load).transpose()?.map(|(p, _)| p);
    let corpus = load_dir(&args.corpus)?;
    let _lock = OutputLock::acquire(&parent_dir(&args.out))?;
    let mut run = Run::new(
        "pretrain",
        RunConfig {
            config: &config,
            corpus: &args.corpus,
            enhancer: args.enhancer.as_deref(),
            images: corpus.iter().map(|(p, _)| file_name(p)).collect(),
        },
        vec![config.pretrain.seed],
    );
    let images: Vec<GrayImage> = corpus.into_iter().map(|(_, img)| img).collect();
    let (encoder, report) = pretrain_encoder(&images, &config.encoder, &config.pretrain, enhancer.as_ref())?;
    encoder.save(&args.out)?;
    write_json(&args.report, &report)?;
    run.output(&args.out);
    run.output(&args.report);
    run.finish(&sibling_manifest(&args.out), "ok")?;
    Ok(ExitCode::SUCCESS)
}
