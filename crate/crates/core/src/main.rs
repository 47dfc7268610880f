use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use callqa::config::load_config;
use callqa::fixtures::write_call_fixture;
use callqa::pipeline::{run_stages, PipelineError, RunOptions, RunReport, Stage};

const EXIT_STAGE_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "callqa",
    version,
    about = "Turn two-channel call recordings into an instruction-tuning Q&A dataset"
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "callqa.toml")]
    config: PathBuf,
    /// Skip stages whose inputs are unchanged since their last run.
    #[arg(long, global = true)]
    resume: bool,
    /// Log progress and per-call warnings.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode, resample and denoise the input recordings.
    Ingest,
    /// Detect and trim the IVR head of every call.
    DetectIvr,
    /// Transcribe both channels and merge them into one timeline.
    Transcribe,
    /// Remove disfluencies and normalize the transcripts.
    Clean,
    /// Replace personal data with placeholder tokens.
    Anonymize,
    /// Extract and rewrite customer demands and agent responses.
    Extract,
    /// Embed demands and responses.
    Embed,
    /// Build the vector index.
    Index,
    /// Build Q&A pairs and the instruction dataset.
    Generate,
    /// Run the quality gates and write the report.
    Validate {
        /// Also write a curated dataset without flagged records.
        #[arg(long)]
        drop_flagged: bool,
    },
    /// Run every stage in order.
    RunAll {
        /// Also write a curated dataset without flagged records.
        #[arg(long)]
        drop_flagged: bool,
    },
    /// Write the 20-call demo corpus (recordings, config, mock ASR table).
    MakeFixture {
        /// Target directory; created if missing.
        dir: PathBuf,
    },
}

fn print_report(report: &RunReport) {
    for s in &report.stages {
        println!(
            "{:<10} {:<8} items={:<6} {:>7} ms  warnings={}",
            s.stage.name(),
            format!("{:?}", s.status).to_lowercase(),
            s.work_items,
            s.duration_ms,
            s.warnings.len()
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (stages, drop_flagged): (Vec<Stage>, bool) = match cli.command {
        Command::MakeFixture { dir } => {
            return match write_call_fixture(&dir) {
                Ok(f) => {
                    println!("wrote fixture; run with --config {}", f.config_path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_STAGE_FAILURE)
                }
            };
        }
        Command::Ingest => (vec![Stage::Ingest], false),
        Command::DetectIvr => (vec![Stage::Ivr], false),
        Command::Transcribe => (vec![Stage::Asr], false),
        Command::Clean => (vec![Stage::Clean], false),
        Command::Anonymize => (vec![Stage::Anonymize], false),
        Command::Extract => (vec![Stage::Extract], false),
        Command::Embed => (vec![Stage::Embed], false),
        Command::Index => (vec![Stage::Index], false),
        Command::Generate => (vec![Stage::Generate], false),
        Command::Validate { drop_flagged } => (vec![Stage::Validate], drop_flagged),
        Command::RunAll { drop_flagged } => (Stage::ALL.to_vec(), drop_flagged),
    };

    let cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let opts = RunOptions {
        resume: cli.resume,
        drop_flagged,
    };
    match run_stages(&cfg, &stages, opts) {
        Ok(report) => {
            print_report(&report);
            match report.gate_exit_code {
                0 => ExitCode::SUCCESS,
                code => {
                    eprintln!("validation gate failed (exit {code})");
                    ExitCode::from(code as u8)
                }
            }
        }
        Err(PipelineError::Setup(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE_FAILURE)
        }
    }
}
