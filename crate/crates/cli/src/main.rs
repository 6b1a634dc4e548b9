use clap::Parser;
use omla_lab::commands::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = omla_lab::init_threads().and_then(|()| run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
