//! Library surface of the CLI so integration tests can drive commands
//! in-process.

pub mod cli;
pub mod commands;
pub mod config;

use gnnmoe::error::Result;

pub fn run(cli: cli::Cli) -> Result<()> {
    match cli.command {
        cli::Command::Gen(args) => commands::cmd_gen(&args),
        cli::Command::Train(args) => {
            let settings = commands::resolve_settings(&args)?;
            commands::cmd_train(&settings).map(|_| ())
        }
        cli::Command::Eval(args) => commands::cmd_eval(&args).map(|_| ()),
        cli::Command::SweepDepth(args) => commands::cmd_sweep_depth(&args).map(|_| ()),
        cli::Command::Bench(args) => {
            let settings = commands::resolve_settings(&args)?;
            commands::cmd_bench(&settings)
        }
    }
}
