use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hmkg::cohort::load_cohort;
use hmkg::config::{env_seed_override, RunConfig};
use hmkg::cv::{cross_validate, run_ablation};
use hmkg::error::Result;
use hmkg::metrics::c_index;
use hmkg::model::HmkgParams;
use hmkg::report::{build_report, emit_report, load_report, RESULTS_FILE};
use hmkg::synth::{write_cohort, SynthSpec};
use hmkg::train::train;

#[derive(Parser)]
#[command(name = "hmkg", about = "Hierarchical multi-scale graph survival analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort directory from a TOML spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a cohort and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a cohort with a checkpoint and report the concordance.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
    },
    /// Cross-validate one variant and emit reports.
    Cv {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        /// Report directory (results.json, table.txt, km.csv).
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Cross-validate all four ablation variants over shared folds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Re-render table.txt and km.csv from an existing results.json.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn load_config(path: &PathBuf, cohort_flag: Option<&PathBuf>) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(seed) = env_seed_override()? {
        config.seed = seed;
    }
    if let Some(dir) = cohort_flag {
        config.cohort = dir.display().to_string();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let mut spec = SynthSpec::load(&spec)?;
            if let Some(seed) = env_seed_override()? {
                spec.seed = seed;
            }
            let cohort = write_cohort(&spec, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "cohort_id": cohort.manifest.cohort_id,
                    "slides": cohort.slides.len(),
                    "mode": spec.mode,
                    "seed": spec.seed,
                    "out": out.display().to_string(),
                })
            );
        }
        Command::Train {
            config,
            cohort,
            out,
        } => {
            let config = load_config(&config, Some(&cohort))?;
            let loaded = load_cohort(&cohort)?;
            let (params, log) = train(&config, &loaded.slides)?;
            params.save_checkpoint(&out)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": out.display().to_string(),
                    "epochs": log.epoch_losses.len(),
                    "initial_loss": log.epoch_losses.first(),
                    "final_loss": log.epoch_losses.last(),
                })
            );
        }
        Command::Eval { ckpt, cohort } => {
            let params = HmkgParams::load_checkpoint(&ckpt)?;
            let loaded = load_cohort(&cohort)?;
            let mut risks = Vec::with_capacity(loaded.slides.len());
            for slide in &loaded.slides {
                risks.push(params.predict(&slide.bag)?.risk);
            }
            let records: Vec<_> = loaded.slides.iter().map(|s| s.record.clone()).collect();
            let c = c_index(&risks, &records)?;
            println!(
                "{}",
                serde_json::json!({
                    "cohort_id": loaded.manifest.cohort_id,
                    "slides": loaded.slides.len(),
                    "c_index": c,
                })
            );
        }
        Command::Cv {
            config,
            cohort,
            out,
        } => {
            let config = load_config(&config, Some(&cohort))?;
            let loaded = load_cohort(&cohort)?;
            let result = cross_validate(&config, &loaded)?;
            let report = build_report(&config, vec![result])?;
            emit_report(&report, &out)?;
            println!("{}", serde_json::to_string_pretty(&report.results).unwrap());
        }
        Command::Ablate {
            config,
            cohort,
            out,
        } => {
            let config = load_config(&config, Some(&cohort))?;
            let loaded = load_cohort(&cohort)?;
            let results = run_ablation(&config, &loaded)?;
            let report = build_report(&config, results)?;
            emit_report(&report, &out)?;
            println!("{}", serde_json::to_string_pretty(&report.results).unwrap());
        }
        Command::Report { input } => {
            let report = load_report(&input)?;
            let dir = input
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            emit_report(&report, &dir)?;
            println!(
                "{}",
                serde_json::json!({
                    "results": dir.join(RESULTS_FILE).display().to_string(),
                    "rows": report.results.len(),
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": err.kind(),
                    "message": err.to_string(),
                })
            );
            ExitCode::FAILURE
        }
    }
}
