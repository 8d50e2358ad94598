//! `discds` command-line front-end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use discds::config::ExperimentConfig;
use discds::dataset::LabeledSampleSet;
use discds::pipeline::Pipeline;
use discds::selection;
use discds::Error;

#[derive(Parser, Debug)]
#[command(name = "discds", version, about = "Guided diffusion sampling and long-tail augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides DISCDS_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `1,2,3` or `1..5`; overrides the config.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Worker threads; overrides DISCDS_THREADS and the config. 0 = all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the long-tail splits and the CADS reference set.
    GenRef,
    /// Choose each class's negative from reference-set similarity.
    SelectNeg {
        /// Use this reference file instead of the per-seed ones; the map is
        /// written to `<out>/negatives.json`.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Generate the synthetic top-up set for every policy.
    Synth,
    /// Train and evaluate every run, then aggregate.
    TrainEval,
    /// Run every stage in order.
    E2e,
    /// Rebuild the aggregate table from existing run reports.
    Report,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::config("--seed", format!("cannot parse `{s}`; use `1,2,3` or `1..5`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn env_threads() -> Result<Option<usize>, Error> {
    match std::env::var("DISCDS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config("DISCDS_THREADS", format!("not a thread count: `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let c = &cli.common;
    let mut config = match &c.config {
        Some(p) => ExperimentConfig::read_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = &c.seed {
        config.seeds = parse_seeds(s)?;
    }
    let out = c
        .out
        .clone()
        .or_else(|| std::env::var_os("DISCDS_OUT").map(PathBuf::from))
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let threads = match c.threads {
        Some(t) => t,
        None => env_threads()?.unwrap_or(config.threads),
    };
    let resolved = config.resolve()?;
    let pipeline = Pipeline::new(resolved.clone(), out.clone(), threads);

    match cli.command {
        Command::GenRef => {
            let files = pipeline.gen_ref()?;
            eprintln!("gen-ref: wrote {} files under {}", files.len(), out.display());
        }
        Command::SelectNeg { reference: None } => {
            let files = pipeline.select_neg()?;
            eprintln!("select-neg: wrote {} files under {}", files.len(), out.display());
        }
        Command::SelectNeg {
            reference: Some(path),
        } => {
            let set = LabeledSampleSet::read_file(&path)?;
            let dim = resolved.world.dim();
            if set.dim() != dim {
                return Err(Error::Data(format!(
                    "{} has dimension {}, the world has {dim}",
                    path.display(),
                    set.dim()
                )));
            }
            let fmap = resolved.config.extractor(dim).prepare(dim)?;
            let mut map = selection::select_negatives(&set, &fmap, resolved.classes())?;
            map.meta.insert("config_hash".into(), pipeline.config_hash().into());
            map.meta.insert("reference".into(), path.display().to_string());
            let dest = out.join("negatives.json");
            map.write_file(&dest)?;
            for e in &map.entries {
                println!(
                    "{} -> {}{}",
                    resolved.world.class_name(e.class),
                    resolved.world.class_name(e.negative),
                    if e.tie { "  (tie)" } else { "" }
                );
            }
        }
        Command::Synth => {
            let files = pipeline.synth()?;
            eprintln!("synth: wrote {} files under {}", files.len(), out.display());
        }
        Command::TrainEval => print!("{}", pipeline.train_eval()?.to_table()),
        Command::E2e => print!("{}", pipeline.e2e()?.to_table()),
        Command::Report => print!("{}", pipeline.report()?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
