use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rayon::prelude::*;
use serde::Serialize;

use lungforge::domain_gap::{
    classical_mds, domain_distance_matrix, feature_vector, scatter_svg, write_features_csv, Bandwidth,
    DomainFeatureVector, DomainGapReport, Standardization, DEFAULT_DISTANCE, DEFAULT_LEVELS,
};

use crate::error::{usage, CliResult};
use crate::inputs::{file_name, load_dir};
use crate::run::{write_text, write_json, OutputLock, Run};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Datasets as name=directory pairs; at least two.
    #[arg(long, num_args = 1.., required = true)]
    datasets: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Gray levels for the co-occurrence matrices.
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    /// Pixel offset for the co-occurrence matrices.
    #[arg(long, default_value_t = DEFAULT_DISTANCE)]
    distance: usize,
    /// Kernel width: "median" or a positive number.
    #[arg(long, default_value = "median")]
    bandwidth: String,
    /// Standardize features over all datasets at once or per pair.
    #[arg(long, value_enum, default_value_t = Scaling::Global)]
    standardization: Scaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Scaling {
    Global,
    PerPair,
}

#[derive(Serialize)]
struct Config<'a> {
    datasets: &'a [(String, PathBuf)],
    levels: usize,
    distance: usize,
    bandwidth: Bandwidth,
    standardization: Scaling,
}

fn parse_datasets(raw: &[String]) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for item in raw {
        let Some((name, dir)) = item.split_once('=') else {
            return usage(format!("dataset {item:?} must be name=directory"));
        };
        if name.is_empty() || dir.is_empty() {
            return usage(format!("dataset {item:?} must be name=directory"));
        }
        if !seen.insert(name.to_string()) {
            return usage(format!("dataset name {name:?} given twice"));
        }
        out.push((name.to_string(), PathBuf::from(dir)));
    }
    if out.len() < 2 {
        return usage("domain-gap needs at least two datasets");
    }
    Ok(out)
}

fn parse_bandwidth(raw: &str) -> CliResult<Bandwidth> {
    if raw == "median" {
        return Ok(Bandwidth::Median);
    }
    match raw.parse::<f64>() {
        Ok(h) if h > 0.0 && h.is_finite() => Ok(Bandwidth::Fixed(h)),
        _ => usage(format!("--bandwidth must be \"median\" or a positive number, got {raw:?}")),
    }
}

fn dataset_features(dir: &Path, levels: usize, distance: usize) -> CliResult<Vec<(String, DomainFeatureVector)>> {
    load_dir(dir)?
        .par_iter()
        .map(|(p, img)| Ok((file_name(p), feature_vector(img, levels, distance)?)))
        .collect()
}

pub fn run(args: Args) -> CliResult<ExitCode> {
    let datasets = parse_datasets(&args.datasets)?;
    let bandwidth = parse_bandwidth(&args.bandwidth)?;
    if args.levels < 2 || args.distance < 1 {
        return usage("--levels must be at least 2 and --distance at least 1");
    }
    let _lock = OutputLock::acquire(&args.out)?;
    let mut run = Run::new(
        "domain-gap",
        Config {
            datasets: &datasets,
            levels: args.levels,
            distance: args.distance,
            bandwidth,
            standardization: args.standardization,
        },
        Vec::new(),
    );
    let mut rows = Vec::new();
    let mut sets = Vec::new();
    for (name, dir) in &datasets {
        let feats = dataset_features(dir, args.levels, args.distance)?;
        sets.push((name.clone(), feats.iter().map(|(_, f)| f.values.clone()).collect::<Vec<_>>()));
        rows.extend(feats.into_iter().map(|(img, f)| (name.clone(), img, f)));
    }
    let standardization = match args.standardization {
        Scaling::Global => Standardization::Global,
        Scaling::PerPair => Standardization::PerPair,
    };
    let matrix = domain_distance_matrix(&sets, bandwidth, standardization)?;
    let dim = 2.min(datasets.len() - 1);
    let coordinates = classical_mds(&matrix.distances, dim)?;
    let report = DomainGapReport {
        levels: args.levels,
        distance: args.distance,
        degenerate: rows
            .iter()
            .filter(|(_, _, f)| f.degenerate)
            .map(|(d, i, _)| (d.clone(), i.clone()))
            .collect(),
        matrix,
        coordinates,
    };

    let features_path = args.out.join("features.csv");
    write_features_csv(&rows, &features_path)?;
    let distances_path = args.out.join("distances.json");
    write_json(&distances_path, &report)?;
    let mds_path = args.out.join("mds.csv");
    let mut mds = String::from("dataset,x,y\n");
    for (label, c) in report.matrix.labels.iter().zip(&report.coordinates) {
        let y = c.get(1).copied().unwrap_or(0.0);
        mds.push_str(&format!("{label},{:.17e},{y:.17e}\n", c[0]));
    }
    write_text(&mds_path, &mds)?;
    let svg_path = args.out.join("scatter.svg");
    write_text(&svg_path, &scatter_svg(&report.matrix.labels, &report.coordinates))?;
    for p in [&features_path, &distances_path, &mds_path, &svg_path] {
        run.output(p);
    }
    run.finish(&args.out.join("manifest.json"), "ok")?;
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_pairs() {
        let ok = parse_datasets(&["a=x".into(), "b=y/z".into()]).unwrap();
        assert_eq!(ok[1], ("b".to_string(), PathBuf::from("y/z")));
        assert!(parse_datasets(&["a=x".into()]).is_err());
        assert!(parse_datasets(&["a=x".into(), "a=y".into()]).is_err());
        assert!(parse_datasets(&["a".into(), "b=y".into()]).is_err());
    }

    #[test]
    fn bandwidth_forms() {
        assert_eq!(parse_bandwidth("median").unwrap(), Bandwidth::Median);
        assert_eq!(parse_bandwidth("0.5").unwrap(), Bandwidth::Fixed(0.5));
        assert!(parse_bandwidth("-1").is_err());
        assert!(parse_bandwidth("wide").is_err());
    }
}
