use clap::Parser;

use flowkl::cli::{run, Cli};
use flowkl::Error;

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => {}
        Ok(false) => {
            eprintln!("flowkl: verification criteria not satisfied");
            std::process::exit(1);
        }
        Err(e) => {
            eprintln!("flowkl: {e}");
            let code = match e {
                Error::Usage(_) | Error::Argument(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}
