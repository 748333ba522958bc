use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;

use lungforge::phantom::{generate_corpus, write_corpus, DomainConfig};

use crate::error::{usage, CliResult};
use crate::run::{OutputLock, Run};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number of images.
    #[arg(long)]
    n: usize,
    /// Corpus seed; every image and label follows from it.
    #[arg(long)]
    seed: u64,
    /// Preset domain (A, B or C) or a TOML domain file.
    #[arg(long)]
    domain: String,
    /// Share of images with a lesion.
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    /// Output directory for PNGs, masks/ and manifest.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct Config<'a> {
    n: usize,
    seed: u64,
    domain: &'a DomainConfig,
    positive_fraction: f64,
}

pub fn resolve_domain(name: &str) -> CliResult<DomainConfig> {
    if let Some(d) = DomainConfig::preset(name) {
        return Ok(d);
    }
    let path = Path::new(name);
    if path.is_file() {
        return Ok(DomainConfig::from_toml_file(path)?);
    }
    usage(format!("unknown domain {name:?}; use A, B, C or a TOML domain file"))
}

pub fn run(args: Args) -> CliResult<ExitCode> {
    let domain = resolve_domain(&args.domain)?;
    domain.validate()?;
    if args.n == 0 {
        return usage("--n must be at least 1");
    }
    if !(0.0..=1.0).contains(&args.positive_fraction) {
        return usage("--positive-fraction must lie in [0, 1]");
    }
    let _lock = OutputLock::acquire(&args.out)?;
    let config = Config {
        n: args.n,
        seed: args.seed,
        domain: &domain,
        positive_fraction: args.positive_fraction,
    };
    let mut run = Run::new("phantom-gen", &config, vec![args.seed]);
    let samples = generate_corpus(args.n, args.seed, &domain, args.positive_fraction)?;
    let rows = write_corpus(&samples, &args.out)?;
    for r in &rows {
        run.output(&args.out.join(&r.file));
    }
    run.output(&args.out.join("manifest.csv"));
    run.finish(&args.out.join("manifest.json"), "ok")?;
    log::info!("wrote {} phantoms to {}", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
