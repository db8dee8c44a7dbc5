use clap::Parser;
use locret_cli::Cli;

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match locret_cli::run(cli, &argv) {
        Ok(m) => println!("{} run complete: {} outputs", m.command, m.outputs.len()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
