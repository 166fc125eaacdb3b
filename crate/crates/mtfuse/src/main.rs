use clap::Parser;

fn main() {
    let cli = mtfuse::cli::Cli::parse();
    if let Err(e) = mtfuse::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
