use clap::Parser;
use dynexit_cli::{run, Cli, EXIT_USAGE};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            std::process::exit(EXIT_USAGE);
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("error: {}", e.message.replace('\n', " "));
        std::process::exit(e.code);
    }
}
