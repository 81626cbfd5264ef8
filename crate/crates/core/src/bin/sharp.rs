use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use sharp::experiment::{
    cmd_eval, cmd_latency, cmd_plan, cmd_pretrain, cmd_probe, cmd_sft, cmd_slw, CliError, ExperimentConfig, Overrides,
    ProbeChoice, Report, ScheduleSpec,
};
use sharp::sharing::TransformKind;

#[derive(Parser)]
#[command(name = "sharp", version, about = "Adjacent-layer MLP sharing with low-rank recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy base model and record its held-out perplexity.
    Pretrain(Common),
    /// Print a replacement schedule and its storage accounting.
    Plan(Common),
    /// Single-layer warmup of the recovery factors.
    Slw(Common),
    /// Supervised fine-tuning of the recovery factors.
    Sft(Common),
    /// Perplexity of every variant found in the output directory.
    Eval(Common),
    /// Layer-redundancy probes.
    Probe {
        /// replace, relative-error or zero-out
        #[arg(value_parser = parse_probe)]
        probe: ProbeChoice,
        #[command(flatten)]
        common: Common,
    },
    /// Load and forward-time estimates.
    Latency(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    only_sft: bool,
    #[arg(long)]
    full_lora: bool,
    #[arg(long)]
    rank: Option<usize>,
    /// g0, g1, g2 or g3
    #[arg(long, value_parser = parse_kind)]
    kind: Option<TransformKind>,
    /// next, next2, back, front, more, max, ori or custom=FILE
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleSpec>,
    #[arg(long)]
    no_lora: bool,
}

fn parse_probe(s: &str) -> Result<ProbeChoice, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_kind(s: &str) -> Result<TransformKind, String> {
    s.parse().map_err(|e: sharp::sharing::SharingError| e.to_string())
}

fn parse_schedule(s: &str) -> Result<ScheduleSpec, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, CliError> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(base.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            only_sft: self.only_sft,
            full_lora: self.full_lora,
            rank: self.rank,
            kind: self.kind,
            schedule: self.schedule.clone(),
            no_lora: self.no_lora,
        }))
    }
}

fn run(cli: Cli) -> Result<Report, CliError> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&c.config()?),
        Command::Plan(c) => cmd_plan(&c.config()?),
        Command::Slw(c) => cmd_slw(&c.config()?),
        Command::Sft(c) => cmd_sft(&c.config()?),
        Command::Eval(c) => cmd_eval(&c.config()?),
        Command::Probe { probe, common } => cmd_probe(&common.config()?, probe),
        Command::Latency(c) => cmd_latency(&c.config()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprintln!("error: usage: missing command (try --help)");
            return ExitCode::from(2);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default();
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report.result).expect("report serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
