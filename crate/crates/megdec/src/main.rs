use clap::Parser;

use megdec::cli::{run, Cli};

fn main() {
    megdec::init_thread_pool_from_env();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
