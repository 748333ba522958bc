use std::path::PathBuf;
use std::process::ExitCode;

use lungforge::pipeline::{run_experiment, ExperimentSpec};

use crate::error::{usage, CliResult};
use crate::run::{write_json, write_text, OutputLock, Run};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Experiment spec (TOML); the stock phantom benchmark when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for report.json, few_shot.csv and runs/.
    #[arg(long, required_unless_present = "print_spec")]
    out: Option<PathBuf>,
    /// Override the spec's seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Print the effective spec as TOML and exit.
    #[arg(long)]
    print_spec: bool,
}

pub fn run(args: Args) -> CliResult<ExitCode> {
    let mut spec = match &args.spec {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    };
    if let Some(seeds) = args.seeds {
        spec.seeds = seeds;
    }
    spec.validate()?;
    if args.print_spec {
        print!("{}", spec.to_toml_string());
        return Ok(ExitCode::SUCCESS);
    }
    let Some(out) = args.out else {
        return usage("--out is required");
    };
    let _lock = OutputLock::acquire(&out)?;
    let mut run = Run::new("evaluate", &spec, spec.seeds.clone());
    log::info!("spec hash {}", run.config_hash());
    let runs_dir = out.join("runs");
    let report = match run_experiment(&spec, Some(&runs_dir)) {
        Ok(r) => r,
        Err(e) => {
            run.output(&runs_dir);
            run.finish(&out.join("manifest.json"), &format!("failed: {e}"))?;
            return Err(e.into());
        }
    };
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    let csv_path = out.join("few_shot.csv");
    write_text(&csv_path, &report.few_shot_csv())?;
    for p in [&report_path, &csv_path, &runs_dir] {
        run.output(p);
    }
    run.finish(&out.join("manifest.json"), "ok")?;
    Ok(ExitCode::SUCCESS)
}
