use clap::Parser;

fn main() {
    let cli = knode_mpc::cli::Cli::parse();
    if let Err(err) = knode_mpc::cli::run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
