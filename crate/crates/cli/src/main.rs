use clap::Parser;

use graspalign_cli::{run, Cli, EXIT_OK};

fn main() {
    let env = env_logger::Env::new().filter_or("GRASPALIGN_LOG", "warn");
    env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    };
    std::process::exit(code);
}
