mod args;
mod run;
mod validate;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATO_LOG", level))
        .format_timestamp(None)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    init_logging(cli.verbose);
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }

    let outcome = match &cli.command {
        Command::Synth(a) => run::synth(a).map(|_| true),
        Command::Fit(a) => run::fit(a).map(|_| true),
        Command::Efficiency(a) => run::efficiency(a).map(|_| true),
        Command::EvalFeatures(a) => run::eval_features(a).map(|_| true),
        Command::Causal(a) => run::causal(a).map(|_| true),
        Command::Validate(a) => run::validate_file(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_DATA),
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ato: error[{}]: {msg}", e.kind());
            ExitCode::from(EXIT_DATA)
        }
    }
}
