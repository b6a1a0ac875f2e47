use clap::{CommandFactory, FromArgMatches};
use hetfuse_cli::{run, settings::help_table, Cli};

fn main() {
    let table = help_table();
    let mut cmd = Cli::command().after_help(table.clone());
    for name in ["generate", "preprocess", "train", "eval", "sweep", "plot"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(table.clone()));
    }
    let cli = Cli::from_arg_matches(&cmd.get_matches()).unwrap_or_else(|e| e.exit());
    if let Err(e) = run(&cli.command) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}
