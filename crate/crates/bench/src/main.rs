use std::fs;
use std::process::ExitCode;

use clap::Parser;
use ptg_bench::{run, BenchConfig};

fn main() -> ExitCode {
    env_logger::init();
    let cfg = BenchConfig::parse();
    let report = match run(&cfg) {
        Ok(report) => report,
        Err(e) => {
            eprintln!("ptg-bench: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut text = report.table.to_string();
    if cfg.trace && !report.trace.is_empty() {
        text.push_str("\n# rank rep label thread start_s stop_s\n");
        report.trace.iter().for_each(|line| {
            text.push_str(line);
            text.push('\n');
        });
    }
    match &cfg.output {
        Some(path) => {
            if let Err(e) = fs::write(path, text) {
                eprintln!("ptg-bench: writing {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        }
        None => print!("{text}"),
    }
    ExitCode::SUCCESS
}
