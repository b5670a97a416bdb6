use clap::Parser;
use oiad::cli::{execute, Cli};
use oiad::config::ConfigError;
use oiad::data::DataError;

fn main() {
    let cli = Cli::parse(); // clap exits 2 on usage errors
    if let Err(err) = execute(cli) {
        // One machine-parseable line: "error: <code>: <message>".
        let code = if err.downcast_ref::<ConfigError>().is_some() {
            2
        } else {
            1
        };
        let kind = match code {
            2 => "config",
            _ => {
                if err.downcast_ref::<DataError>().is_some() {
                    "data"
                } else {
                    "runtime"
                }
            }
        };
        eprintln!("error: {kind}: {err:#}");
        std::process::exit(code);
    }
}
