use clap::Parser;

use lesion_cli::{exit, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            if cli.global.json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            }
        }
        Err(e) => {
            eprintln!("lesionrev: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
