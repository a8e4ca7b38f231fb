use clap::Parser;

fn main() {
    let cli = rtl_cli::Cli::parse();
    if let Err(e) = rtl_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
