use clap::Parser;
use fskws::cli::{run, Cli};

fn main() {
    // clap's own error path would exit 2; the contract is 1 for usage errors
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { 1 } else { 0 };
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(2);
    }
}
