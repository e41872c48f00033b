use clap::Parser;
use rf_sslkit::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(dir) => println!("{}", dir.path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(e.category()));
        }
    }
}
