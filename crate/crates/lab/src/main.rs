use clap::Parser;

fn main() {
    let cli = clip_lab::cli::Cli::parse();
    if let Err(e) = clip_lab::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
