use clap::Parser;

fn main() {
    let cli = cinfer_cli::Cli::parse();
    let env_seed = std::env::var("CF_SEED").ok();
    if let Err(e) = cinfer_cli::run(&cli, env_seed.as_deref()) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
