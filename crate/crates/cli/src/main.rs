use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use hbformer::io::Task;
use hbformer_cli::{run, Invocation, EXIT_CONFIG};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Train,
    Eval,
    Gradcheck,
    Synth,
}

impl From<Command> for Task {
    fn from(c: Command) -> Self {
        match c {
            Command::Train => Task::Train,
            Command::Eval => Task::Eval,
            Command::Gradcheck => Task::Gradcheck,
            Command::Synth => Task::Synth,
        }
    }
}

/// Train, evaluate and gradient-check HBFormer segmentation models.
#[derive(Debug, Parser)]
#[command(name = "hbformer", version)]
struct Args {
    #[arg(value_enum, required_unless_present = "print_config")]
    command: Option<Command>,
    /// `key = value` run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Corrupt the backward rule of this operation before checking gradients.
    #[arg(long, value_name = "OP", hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let inv = Invocation {
        task: args.command.map(Task::from),
        config: args.config,
        checkpoint: args.checkpoint,
        print_config: args.print_config,
        inject_fault: args.inject_fault,
    };
    ExitCode::from(run(&inv))
}
