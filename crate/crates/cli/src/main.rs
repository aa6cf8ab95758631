use std::process::ExitCode;

use attndistill::cli::{execute, Cli};
use attndistill::{ConfigError, RunError};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = if let Some(e) = err.downcast_ref::<RunError>() {
                e.exit_code()
            } else if err.downcast_ref::<ConfigError>().is_some() {
                2
            } else if err.downcast_ref::<attndistill::BackboneError>().is_some() {
                3
            } else if err.downcast_ref::<attndistill::IoError>().is_some() {
                4
            } else if err.downcast_ref::<attndistill_core::Error>().is_some() {
                5
            } else {
                1
            };
            ExitCode::from(code)
        }
    }
}
