use clap::Parser;

use sfk::cli::{run, Cli};
use sfk::SfkError;

fn main() {
    // SFK_THREADS caps worker parallelism; per-run determinism does not
    // depend on the thread count.
    if let Ok(threads) = std::env::var("SFK_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                SfkError::Usage(_) | SfkError::InvalidArgument(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}
