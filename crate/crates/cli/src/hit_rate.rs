use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use serde::Serialize;

use lungforge::metrics::{hit_rate_report, read_boxes_csv, read_points_csv, Target};

use crate::error::{usage, CliResult};
use crate::run::{parent_dir, sibling_manifest, write_json, OutputLock, Run};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// CSV of `image,x,y` attention maxima.
    #[arg(long)]
    points: PathBuf,
    /// CSV of `image,x_min,y_min,x_max,y_max[,category]` annotations.
    #[arg(long)]
    boxes: PathBuf,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Config<'a> {
    points: &'a PathBuf,
    boxes: &'a PathBuf,
}

pub fn run(args: Args) -> CliResult<ExitCode> {
    let points = read_points_csv(&args.points)?;
    let boxes = read_boxes_csv(&args.boxes)?;
    if boxes.is_empty() {
        return usage(format!("{} has no annotations", args.boxes.display()));
    }
    // One evaluation per annotated box; images with several boxes count once per box.
    let mut p = Vec::with_capacity(boxes.len());
    let mut targets = Vec::with_capacity(boxes.len());
    let mut categories = Vec::with_capacity(boxes.len());
    let mut images = BTreeMap::new();
    for (image, b, category) in boxes {
        let Some(&pt) = points.get(&image) else {
            return usage(format!("no attention point for annotated image {image:?}"));
        };
        *images.entry(image).or_insert(0usize) += 1;
        p.push(pt);
        targets.push(Target::Box(b));
        categories.push(category);
    }
    let report = hit_rate_report(&p, &targets, &categories)?;
    let _lock = OutputLock::acquire(&parent_dir(&args.out))?;
    let mut run = Run::new(
        "hit-rate",
        Config {
            points: &args.points,
            boxes: &args.boxes,
        },
        Vec::new(),
    );
    write_json(&args.out, &report)?;
    run.output(&args.out);
    run.finish(&sibling_manifest(&args.out), "ok")?;
    log::info!("{} annotations over {} images", report.count, images.len());
    Ok(ExitCode::SUCCESS)
}
