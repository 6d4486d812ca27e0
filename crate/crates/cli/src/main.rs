//! `dcml`: synthesize data, train the three stages, evaluate checkpoints,
//! run the gradient checks and the ablation sweeps.
//!
//! Exit status is 0 on success. Failures print one JSON object
//! `{"error": kind, "message": text}` on stderr and exit nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcml_core::ablation::{parse_modality_list, reduction_grid, run_ablation};
use dcml_core::config::RunConfig;
use dcml_core::data::{read_dataset, write_dataset, Dataset};
use dcml_core::gradcheck::gradcheck_suite;
use dcml_core::io::write_json;
use dcml_core::pipeline::{evaluate_checkpoint, load_modalities, train_pipeline, Layout, Stage};
use dcml_core::Error;
use dcml_tensor::Primitive;

#[derive(Parser)]
#[command(name = "dcml", version, about = "Multi-modal contrastive kinship retrieval on synthetic families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: desk, full or micro.
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => RunConfig::preset(name)?,
            (None, None) => RunConfig::desk(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic family dataset and aging corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; defaults to the config's data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage, or every enabled stage in order.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Parent-to-child retrieval accuracy of a contrastive checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long, default_value = "1,5", value_delimiter = ',')]
        topk: Vec<usize>,
        /// Print the JSON report instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference checks of every primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one primitive's backward rule (e.g. matmul).
        #[arg(long)]
        fault: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Contrastive runs over modality sets and reduction ratios.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated sets, e.g. face,face+race,face+race+deaging.
        #[arg(long, default_value = "face,face+race,face+deaging,face+race+deaging")]
        modalities: String,
        /// Ratio values used on both the r1 and r2 axes, e.g. 2,4,8,16.
        /// Omitted: the configured r1 and r2.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<usize>,
        #[arg(long)]
        fold: Option<usize>,
    },
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    let data = Dataset::generate(cfg.seed, &cfg.data)?;
    write_dataset(out, &data)?;
    print_json(&serde_json::json!({
        "out": out,
        "seed": cfg.seed,
        "family_images": data.family.len(),
        "aging_images": data.aging.len(),
        "folds": data.protocol.folds.len(),
    }))
}

fn parse_fault(name: &str) -> Result<Primitive, Error> {
    Primitive::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown primitive {name:?}")))
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = config.load()?;
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            synth(&cfg, &out)?;
        }
        Command::Train { config, stage } => {
            let cfg = config.load()?;
            let summary = train_pipeline(&cfg, stage.parse::<Stage>()?)?;
            if let Some(eval) = &summary.eval {
                eprint!("{}", eval.to_table());
            }
            print_json(&summary)?;
        }
        Command::Eval { ckpt, fold, topk, json } => {
            let report = evaluate_checkpoint(&ckpt, fold, &topk)?;
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Gradcheck { seed, fault, json } => {
            let fault = fault.as_deref().map(parse_fault).transpose()?;
            let report = gradcheck_suite(seed, fault);
            if json {
                print_json(&report)?;
            } else {
                print!("{}", report.to_table());
            }
            if !report.passed {
                let failed: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
                eprintln!(
                    "{}",
                    serde_json::json!({"error": "gradcheck", "message": format!("{} entries failed", failed.len()), "failed": failed})
                );
                return Ok(false);
            }
        }
        Command::Ablate {
            config,
            modalities,
            grid,
            fold,
        } => {
            let cfg = config.load()?;
            let sets = parse_modality_list(&modalities)?;
            let data = read_dataset(&cfg.paths.data_dir)?;
            let layout = Layout::new(&cfg.paths.out_dir);
            let needed = dcml_core::contrastive::ModalitySet {
                race: sets.iter().any(|s| s.race),
                deaging: sets.iter().any(|s| s.deaging),
            };
            let mods = load_modalities(&cfg, &layout, needed)?;
            let report = run_ablation(&cfg, &data, &mods, &sets, &reduction_grid(&grid), fold.unwrap_or(cfg.eval.fold))?;
            write_json(&layout.dir.join("ablation.json"), &report)?;
            print!("{}", report.to_table());
        }
    }
    Ok(true)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Dependency(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", serde_json::json!({"error": "usage", "message": message.trim()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}
