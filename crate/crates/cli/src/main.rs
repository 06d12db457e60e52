//! Command-line front end: wires corpus generation, pretraining, retrieval
//! fine-tuning, indexing, search, and evaluation into reproducible runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use clir_core::audit::{render_size_report_csv, render_size_report_text, size_report};
use clir_core::error::{Error, Result};
use clir_core::experiment::{
    phase_evaluate, phase_gen_corpus, phase_index, phase_pretrain_adapter,
    phase_pretrain_backbone, phase_search, phase_train, run_experiment, ExperimentConfig, RunDir,
};
use clir_core::model::Variant;
use clir_core::retrieval::TrainMode;

#[derive(Parser)]
#[command(
    name = "adapter-clir",
    version,
    about = "Adapter-based cross-language retrieval experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory for this run.
    #[arg(long)]
    run_dir: PathBuf,
    /// Override every seed in the config with this value.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for corpus generation and index encoding.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic parallel corpus.
    GenCorpus(CommonArgs),
    /// Pretrain the shared encoder with masked-token prediction.
    PretrainBackbone(CommonArgs),
    /// Pretrain language adapters on monolingual text.
    PretrainAdapter {
        #[command(flatten)]
        common: CommonArgs,
        /// Single language to pretrain; defaults to every configured language.
        #[arg(long)]
        lang: Option<String>,
    },
    /// Fine-tune retrieval models on training triples.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Restrict to one retrieval variant (dpr | colbert).
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Restrict to one training mode (adapter | fmft | adapter-no-lang).
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
    },
    /// Encode and store every index the configured grid needs.
    Index(CommonArgs),
    /// Produce ranked run files from stored indexes.
    Search(CommonArgs),
    /// Score run files and write the condition-grid report.
    Evaluate(CommonArgs),
    /// Print the parameter-count audit for the published architectures.
    Audit {
        /// Emit CSV instead of the text table.
        #[arg(long)]
        csv: bool,
    },
    /// Run every phase end to end and print the report.
    Experiment(CommonArgs),
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "dpr" => Ok(Variant::Dpr),
        "colbert" => Ok(Variant::Colbert),
        other => Err(format!("unknown variant '{other}' (expected dpr or colbert)")),
    }
}

fn parse_mode(s: &str) -> std::result::Result<TrainMode, String> {
    match s {
        "adapter" => Ok(TrainMode::Adapter),
        "fmft" => Ok(TrainMode::FullFineTune),
        "adapter-no-lang" => Ok(TrainMode::AdapterNoLang),
        other => Err(format!(
            "unknown training mode '{other}' (expected adapter, fmft, or adapter-no-lang)"
        )),
    }
}

/// Load and validate the config, apply overrides, and open the run directory.
fn open_run(common: &CommonArgs) -> Result<(ExperimentConfig, RunDir)> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(format!("thread pool setup failed: {e}")))?;
    }
    let mut cfg = ExperimentConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        // Phase-internal stream labels keep a shared numeric seed safe.
        cfg.corpus.seed = seed;
        cfg.backbone.init_seed = seed;
        cfg.backbone.mlm.seed = seed;
        cfg.adapters.mlm.seed = seed;
        cfg.retrieval.seed = seed;
        cfg.validate()?;
    }
    let run = RunDir::open(&common.run_dir, &cfg)?;
    Ok((cfg, run))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenCorpus(common) => {
            let (cfg, mut run) = open_run(&common)?;
            phase_gen_corpus(&mut run, &cfg)
        }
        Cmd::PretrainBackbone(common) => {
            let (cfg, mut run) = open_run(&common)?;
            phase_pretrain_backbone(&mut run, &cfg).map(|_| ())
        }
        Cmd::PretrainAdapter { common, lang } => {
            let (cfg, mut run) = open_run(&common)?;
            let tags = match lang {
                Some(tag) => vec![tag],
                None => cfg.corpus.tags(),
            };
            for tag in tags {
                phase_pretrain_adapter(&mut run, &cfg, &tag)?;
            }
            Ok(())
        }
        Cmd::Train { common, variant, mode } => {
            let (cfg, mut run) = open_run(&common)?;
            let variants = match variant {
                Some(v) => vec![v],
                None => cfg.retrieval.variants.clone(),
            };
            let modes = match mode {
                Some(m) => vec![m],
                None => cfg.retrieval.modes.clone(),
            };
            for &v in &variants {
                for &m in &modes {
                    phase_train(&mut run, &cfg, v, m)?;
                }
            }
            Ok(())
        }
        Cmd::Index(common) => {
            let (cfg, mut run) = open_run(&common)?;
            phase_index(&mut run, &cfg)
        }
        Cmd::Search(common) => {
            let (cfg, mut run) = open_run(&common)?;
            phase_search(&mut run, &cfg)
        }
        Cmd::Evaluate(common) => {
            let (cfg, mut run) = open_run(&common)?;
            let outcome = phase_evaluate(&mut run, &cfg)?;
            print!("{}", outcome.report);
            Ok(())
        }
        Cmd::Audit { csv } => {
            let lines = size_report();
            if csv {
                print!("{}", render_size_report_csv(&lines));
            } else {
                print!("{}", render_size_report_text(&lines));
            }
            Ok(())
        }
        Cmd::Experiment(common) => {
            let (cfg, mut run) = open_run(&common)?;
            let outcome = run_experiment(&mut run, &cfg)?;
            print!("{}", outcome.report);
            println!("report written to {}", run.rel("reports/report.txt").display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("ADAPTER_CLIR_LOG", "info"),
    )
    .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
