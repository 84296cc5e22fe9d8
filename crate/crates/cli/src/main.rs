mod commands;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use ssdg_core::config::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "ssdg", version, about = "Semi-supervised domain-generalized segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic multi-domain dataset.
    Generate(GenerateArgs),
    /// Train a student/teacher pair; every config key is also a `--key` flag.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out domains through the inference path.
    Eval(EvalArgs),
    /// Plot per-domain running statistics of normalization sites.
    PlotStats(PlotStatsArgs),
    /// Compare pseudo-label quality under per-domain and mixed normalization.
    DiagnosePseudo(DiagnoseArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    /// Images per domain.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// 2 (background, object) or 3 (adds an inner core).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root containing manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML file with config keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Held-out domain id (1-based); same as --unseen-domain.
    #[arg(long)]
    pub unseen: Option<usize>,
    /// Run name; defaults to a prefix of the config hash.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Continue the run in this directory from its latest checkpoints.
    #[arg(long, conflicts_with_all = ["config", "name", "force"])]
    pub resume: Option<PathBuf>,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    /// Suppress per-step progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "describe")]
    pub data: Option<PathBuf>,
    /// Test domain ids (1-based, repeatable); defaults to the checkpoint's held-out domain.
    #[arg(long = "unseen", action = ArgAction::Append)]
    pub unseen: Vec<usize>,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Print training and inference parameter counts instead of evaluating.
    #[arg(long)]
    pub describe: bool,
}

#[derive(Args, Debug)]
pub struct PlotStatsArgs {
    /// Converted (student or teacher) checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root, used for domain names.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Normalization site to plot (repeatable); all sites when omitted.
    #[arg(long = "site", action = ArgAction::Append)]
    pub sites: Vec<String>,
    #[arg(long, value_enum, default_value_t = plot::Format::Png)]
    pub format: plot::Format,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Converted teacher checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Take the mixed column from this plain-network checkpoint instead.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Weight of the individual branch in the ensemble; defaults to the run's value.
    #[arg(long)]
    pub t: Option<f32>,
    /// Unlabeled images per domain in each diagnostic batch.
    #[arg(long, default_value_t = 2)]
    pub per_domain: usize,
    /// Directory for the CSV table and bar plot.
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = plot::Format::Png)]
    pub format: plot::Format,
}

fn config_flag(key: &str) -> String {
    key.replace('_', "-")
}

fn command() -> Command {
    let cmd = <Cli as clap::CommandFactory>::command();
    cmd.mut_subcommand("train", |mut train| {
        for key in TrainConfig::keys() {
            let flag = config_flag(&key);
            train = train.arg(
                Arg::new(key.clone())
                    .long(flag)
                    .value_name("VALUE")
                    .help_heading("Config keys")
                    .help(format!("Override `{key}`")),
            );
        }
        train
    })
}

/// Config overrides in the order given on the command line.
fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for key in TrainConfig::keys() {
        if let (Some(v), Some(i)) = (m.get_one::<String>(&key), m.index_of(&key)) {
            out.push((i, key.clone(), v.clone()));
        }
    }
    out.sort();
    out.into_iter().map(|(_, k, v)| (k, v)).collect()
}

/// Clap's message folded onto one line, without the usage and help hints.
fn clap_message(e: &clap::Error) -> String {
    let text = e.to_string();
    let parts: Vec<&str> = text
        .lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .filter(|l| !l.is_empty())
        .collect();
    parts.join(" ").trim_start_matches("error: ").to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("error: {}", clap_message(&e));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", clap_message(&e));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Cmd::Generate(a) => commands::generate(&a),
        Cmd::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train subcommand");
            run::train(&a, &overrides(sub))
        }
        Cmd::Eval(a) => commands::eval(&a),
        Cmd::PlotStats(a) => commands::plot_stats(&a),
        Cmd::DiagnosePseudo(a) => commands::diagnose_pseudo(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
