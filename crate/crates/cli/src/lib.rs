//! The `demoe` command line.
//!
//! Every subcommand reads its options from an optional flat config file
//! (`--config`), then from flags, which win. Outputs land in `--out-dir`
//! (default `$DEMOE_OUT_ROOT/<subcommand>`, or `runs/<subcommand>`) along
//! with `config.txt`, the effective settings, and `outputs.json`, the list
//! of files written. A failed run removes what it wrote.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

pub mod commands;
pub mod opts;
pub mod outputs;
pub mod report;

use std::ffi::OsString;

use clap::error::ErrorKind;

pub use opts::{parse_config, OUT_ROOT_ENV};
pub use outputs::{CONFIG_ECHO, FILE_LIST};
pub use report::{emit_report, infer_batch, Aggregate, Format, ImageRecord, Report};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
    /// Some work failed but the rest was written and is kept.
    Incomplete(String),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<demoe::Error> for CliError {
    fn from(e: demoe::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

/// Run with full argv (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match opts::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let (name, sub_m) = matches.subcommand().expect("subcommand is required");
    let sub = opts::SUBCOMMANDS
        .iter()
        .find(|s| s.name == name)
        .expect("registered subcommand");
    let mut settings = match opts::Settings::from_matches(sub, sub_m) {
        Ok(s) => s,
        Err(e) => return report_error(name, e),
    };
    let mut out = outputs::Outputs::new(&settings.out_dir);
    let result = match name {
        "synth" => commands::synth(&mut settings, &mut out),
        "curate" => commands::curate(&mut settings, &mut out),
        "train" => commands::train(&mut settings, &mut out),
        "infer" => commands::infer(&mut settings, &mut out),
        "eval" => commands::eval(&mut settings, &mut out),
        "analyze" => commands::analyze(&mut settings, &mut out),
        "macs" => commands::macs(&mut settings, &mut out),
        _ => unreachable!("unhandled subcommand {name}"),
    };
    for k in settings.unused() {
        eprintln!("warning: --{} has no effect here", k.replace('_', "-"));
    }
    let echo = opts::format_config(settings.effective());
    match result {
        Ok(()) => match out.finish(&echo) {
            Ok(_) => EXIT_OK,
            Err(e) => report_error(name, CliError::Runtime(e)),
        },
        Err(CliError::Incomplete(msg)) => {
            let _ = out.finish(&echo);
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
        Err(e) => {
            out.discard();
            report_error(name, e)
        }
    }
}

fn report_error(name: &str, e: CliError) -> i32 {
    match e {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}\n\nFor more information, try 'demoe {name} --help'.");
            EXIT_USAGE
        }
        CliError::Runtime(err) => {
            eprintln!("error: {err:#}");
            EXIT_RUNTIME
        }
        CliError::Incomplete(msg) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
