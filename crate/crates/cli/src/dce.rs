use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rayon::prelude::*;
use serde::Serialize;

use lungforge::enhancement::CurveShift;
use lungforge::image::{histogram, inpaint_mask, list_image_files, load_image, load_mask, save_image_png16, GrayImage};
use lungforge::model::{CheckpointMeta, ModelParams};
use lungforge::trainer::{enhance_image, enhanced_name, train_dce, TrainConfig, TrainReport};

use crate::error::{usage, CliError, CliResult};
use crate::inputs::{file_name, load_dir, read_toml};
use crate::run::{parent_dir, sibling_manifest, write_json, OutputLock, Run};

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Directory of training images.
    #[arg(long)]
    corpus: PathBuf,
    /// TOML training config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// JSON training report path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Serialize)]
struct TrainRunConfig<'a> {
    train: &'a TrainConfig,
    corpus: &'a Path,
    images: Vec<String>,
}

fn save_checkpoint(params: &ModelParams, report: &TrainReport, out: &Path) -> CliResult<()> {
    let meta = CheckpointMeta {
        seed: report.seed,
        epochs_run: report.epochs.len(),
        note: String::new(),
    };
    Ok(params.save(out, &meta)?)
}

pub fn train(args: TrainArgs) -> CliResult<ExitCode> {
    let mut config: TrainConfig = read_toml(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.validate()?;
    let corpus = load_dir(&args.corpus)?;
    let _lock = OutputLock::acquire(&parent_dir(&args.out))?;
    let mut run = Run::new(
        "train-dce",
        TrainRunConfig {
            train: &config,
            corpus: &args.corpus,
            images: corpus.iter().map(|(p, _)| file_name(p)).collect(),
        },
        vec![config.seed],
    );
    let images: Vec<GrayImage> = corpus.into_iter().map(|(_, img)| img).collect();
    let manifest = sibling_manifest(&args.out);
    match train_dce(&images, &config) {
        Ok((params, mut report)) => {
            report.checkpoint = Some(args.out.clone());
            save_checkpoint(&params, &report, &args.out)?;
            write_json(&args.report, &report)?;
            run.output(&args.out);
            run.output(&args.report);
            run.finish(&manifest, "ok")?;
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) if failure.error.is_numerical() => {
            let mut report = failure.report;
            report.checkpoint = Some(args.out.clone());
            save_checkpoint(&failure.last_good, &report, &args.out)?;
            write_json(&args.report, &report)?;
            run.output(&args.out);
            run.output(&args.report);
            run.finish(&manifest, &format!("diverged: {}", failure.error))?;
            log::error!("kept the last finite parameters in {}", args.out.display());
            Err(failure.error.into())
        }
        Err(failure) => Err(failure.error.into()),
    }
}

#[derive(Debug, clap::Args)]
pub struct EnhanceArgs {
    /// Enhancement checkpoint from train-dce.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of images to enhance.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Masks named like the inputs; masked pixels are inpainted before
    /// enhancement. Images without a mask file are enhanced as they are.
    #[arg(long)]
    text_mask_dir: Option<PathBuf>,
    /// Histogram bins for the entropy report.
    #[arg(long, default_value_t = 256)]
    bins: usize,
    /// Horizontal shift of the enhancement curve.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    x_shift: f64,
    /// Vertical shift of the enhancement curve.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    y_shift: f64,
}

#[derive(Serialize)]
struct EnhanceRunConfig<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    text_mask_dir: Option<&'a Path>,
    bins: usize,
    shift: CurveShift,
}

struct Enhanced {
    output: String,
    masked_pixels: Option<usize>,
    entropy_original: f64,
    entropy_enhanced: f64,
}

fn enhance_one(
    params: &ModelParams,
    path: &Path,
    mask_dir: Option<&Path>,
    args: &EnhanceArgs,
    shift: CurveShift,
) -> lungforge::Result<Enhanced> {
    let original = load_image(path)?;
    let mut masked_pixels = None;
    let mut input = original.clone();
    if let Some(dir) = mask_dir {
        let mask_path = dir.join(file_name(path));
        if mask_path.is_file() {
            let mask = load_mask(&mask_path)?;
            input = inpaint_mask(&original, &mask)?;
            masked_pixels = Some(mask.count());
        }
    }
    let enhanced = enhance_image(params, &input, shift)?;
    let output = format!("{}.png", enhanced_name(path));
    save_image_png16(&enhanced, args.out.join(&output))?;
    Ok(Enhanced {
        output,
        masked_pixels,
        entropy_original: histogram(&original, args.bins)?.entropy()?,
        entropy_enhanced: histogram(&enhanced, args.bins)?.entropy()?,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Usage(format!("{}: {other:?}", path.display())),
    }
}

pub fn enhance(args: EnhanceArgs) -> CliResult<ExitCode> {
    if args.bins < 2 {
        return usage("--bins must be at least 2");
    }
    let shift = CurveShift {
        x_shift: args.x_shift,
        y_shift: args.y_shift,
    };
    shift.validate()?;
    let (params, _) = ModelParams::load(&args.checkpoint)?;
    if !args.input.is_dir() {
        return usage(format!("{} is not a directory", args.input.display()));
    }
    if let Some(d) = &args.text_mask_dir {
        if !d.is_dir() {
            return usage(format!("{} is not a directory", d.display()));
        }
    }
    let files = list_image_files(&args.input)?;
    let _lock = OutputLock::acquire(&args.out)?;
    let mut run = Run::new(
        "enhance",
        EnhanceRunConfig {
            checkpoint: &args.checkpoint,
            input: &args.input,
            text_mask_dir: args.text_mask_dir.as_deref(),
            bins: args.bins,
            shift,
        },
        Vec::new(),
    );
    let results: Vec<lungforge::Result<Enhanced>> = files
        .par_iter()
        .map(|p| enhance_one(&params, p, args.text_mask_dir.as_deref(), &args, shift))
        .collect();

    let entropy_path = args.out.join("entropy.csv");
    let errors_path = args.out.join("errors.csv");
    let log_path = args.out.join("pipeline.log");
    let mut entropy = csv::Writer::from_path(&entropy_path).map_err(|e| csv_err(&entropy_path, e))?;
    let mut errors = csv::Writer::from_path(&errors_path).map_err(|e| csv_err(&errors_path, e))?;
    entropy
        .write_record(["file", "output", "masked_pixels", "entropy_original", "entropy_enhanced"])
        .map_err(|e| csv_err(&entropy_path, e))?;
    errors.write_record(["file", "error"]).map_err(|e| csv_err(&errors_path, e))?;
    let mut log_text = String::new();
    let mut failed = 0;
    for (path, result) in files.iter().zip(results) {
        let name = file_name(path);
        match result {
            Ok(r) => {
                if let Some(n) = r.masked_pixels {
                    log_text.push_str(&format!("{name}\tinpaint\t{n} pixels\n"));
                }
                log_text.push_str(&format!("{name}\tenhance\t{}\n", r.output));
                entropy
                    .write_record([
                        name.clone(),
                        r.output.clone(),
                        r.masked_pixels.unwrap_or(0).to_string(),
                        format!("{:.17e}", r.entropy_original),
                        format!("{:.17e}", r.entropy_enhanced),
                    ])
                    .map_err(|e| csv_err(&entropy_path, e))?;
                run.output(&args.out.join(&r.output));
            }
            Err(e) => {
                failed += 1;
                log::warn!("{name}: {e}");
                log_text.push_str(&format!("{name}\terror\t{e}\n"));
                errors
                    .write_record([name.as_str(), &e.to_string()])
                    .map_err(|e| csv_err(&errors_path, e))?;
            }
        }
    }
    entropy.flush().map_err(|e| CliError::io(&entropy_path, e))?;
    errors.flush().map_err(|e| CliError::io(&errors_path, e))?;
    std::fs::write(&log_path, log_text).map_err(|e| CliError::io(&log_path, e))?;
    for p in [&entropy_path, &errors_path, &log_path] {
        run.output(p);
    }
    let status = if failed == 0 {
        "ok".to_string()
    } else {
        format!("{failed} of {} files failed", files.len())
    };
    run.finish(&args.out.join("manifest.json"), &status)?;
    Ok(ExitCode::SUCCESS)
}
