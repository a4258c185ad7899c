mod args;
mod config;
mod stages;
mod workdir;

use std::fmt;
use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::Parser;

use crate::args::{Cli, Command};
use crate::config::FileConfig;
use crate::workdir::{Workdir, WorkdirLock};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

/// Invariant checks that did not hold.
#[derive(Debug)]
pub struct CheckFailure {
    pub numerical: bool,
    pub names: Vec<&'static str>,
}

impl fmt::Display for CheckFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "failed checks: {}", self.names.join(", "))
    }
}

impl std::error::Error for CheckFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<CheckFailure>() {
        return if f.numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION };
    }
    let core = err.chain().find_map(|e| e.downcast_ref::<swcl_core::Error>());
    match core {
        Some(swcl_core::Error::Numerical(_) | swcl_core::Error::NonFinite { .. }) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.global.threads {
        anyhow::ensure!(k > 0, swcl_core::Error::InvalidArgument {
            arg: "threads",
            reason: "must be at least 1".into(),
        });
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global()?;
    }
    let file = FileConfig::load(cli.global.config.as_deref())?;
    let seed = cli.global.seed;
    if let Command::Verify(a) = &cli.command {
        return stages::verify_stage(a);
    }
    let _lock = WorkdirLock::acquire(&cli.global.workdir)?;
    let wd = Workdir::new(cli.global.workdir.clone());
    match &cli.command {
        Command::Synth(a) => stages::synth(&wd, &file, a, seed),
        Command::TrainLabeler(a) => stages::train(&wd, &file, a, seed),
        Command::ExtractCams => stages::cams(&wd),
        Command::GenPatches(a) => stages::patches(&wd, &file, a),
        Command::Pretrain(a) => stages::pretrain_stage(&wd, &file, a, seed),
        Command::Probe(a) => stages::probe(&wd, &file, a, seed),
        Command::Ablate(a) => stages::ablate(&wd, &file, a, seed),
        Command::Verify(_) => unreachable!("handled before locking"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        let missing = anyhow::Error::from(swcl_core::Error::MissingArtifact { path: "x".into() });
        assert_eq!(exit_code(&missing), EXIT_VALIDATION);
        let nan = anyhow::Error::from(swcl_core::Error::Numerical("diverged".into())).context("pretrain");
        assert_eq!(exit_code(&nan), EXIT_NUMERICAL);
        let failed = anyhow::Error::from(CheckFailure {
            numerical: false,
            names: vec!["sampler-contract"],
        });
        assert_eq!(exit_code(&failed), EXIT_VALIDATION);
    }
}
