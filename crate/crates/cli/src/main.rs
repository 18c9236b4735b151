//! `marginlab` command-line driver.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{flag_name, RunConfig, KEYS};
use error::CliError;

const AFTER_HELP: &str = "\
Every command reads defaults, then --config FILE (`key = value` lines, `#` comments), \
then flags. The effective configuration is written to effective_config.txt in the \
output directory before any work starts.

Trials are accepted when score ≥ threshold. EER is printed as a percentage.

Exit codes: 0 success, 2 config error, 3 path or I/O error, 4 numerical failure.";

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value config file"),
    );
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(
            Arg::new(*key)
                .long(flag_name(key))
                .value_name("VALUE")
                .help(*help)
                .help_heading("Config keys"),
        )
    })
}

fn cli() -> Command {
    let sub =
        |name: &'static str, about: &'static str| config_args(Command::new(name).about(about));
    Command::new("marginlab")
        .about("Margin-based softmax losses: data generation, training, evaluation and diagnostics")
        .version(env!("CARGO_PKG_VERSION"))
        .after_help(AFTER_HELP)
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub(
            "gen-data",
            "Generate a synthetic speaker dataset and its trial list",
        ))
        .subcommand(sub(
            "train",
            "Train the encoder and class weights; writes a checkpoint and history.csv",
        ))
        .subcommand(sub(
            "eval",
            "Score heldout trials; prints the EER and writes scores.csv and det.csv",
        ))
        .subcommand(
            sub(
                "grad-check",
                "Finite-difference check of every loss variant, per logit and per parameter",
            )
            .arg(
                Arg::new("corrupt-gradient")
                    .long("corrupt-gradient")
                    .action(ArgAction::SetTrue)
                    .hide(true),
            ),
        )
        .subcommand(sub(
            "loss-probe",
            "Tabulate loss against Δ for a two-class sample",
        ))
        .subcommand(sub(
            "diag",
            "Easy/hard partition of the training split under a checkpoint",
        ))
}

fn resolve(matches: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = matches.get_one::<PathBuf>("config") {
        cfg.apply_file(path)?;
    }
    for (key, _) in KEYS {
        if let Some(value) = matches.get_one::<String>(key) {
            cfg.set(key, value)
                .map_err(|e| CliError::Config(format!("--{}: {e}", flag_name(key))))?;
        }
    }
    Ok(cfg)
}

fn run(matches: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = resolve(sub)?;
    match name {
        "gen-data" => commands::gen_data(&cfg),
        "train" => commands::train(&cfg),
        "eval" => commands::eval(&cfg),
        "grad-check" => commands::grad_check(&cfg, sub.get_flag("corrupt-gradient")),
        "loss-probe" => commands::loss_probe(&cfg),
        "diag" => commands::diag(&cfg),
        other => unreachable!("unhandled subcommand {other}"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("marginlab: {e}");
            e.exit_code()
        }
    }
}
