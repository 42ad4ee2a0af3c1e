use clap::Parser;
use exa_cli::{commands, exit_code, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXA_LOG", "warn")).init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(err) = commands::run(&cli, &mut stdout) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
