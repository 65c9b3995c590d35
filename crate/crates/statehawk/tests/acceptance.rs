//! Runs every acceptance criterion at full size and prints one line each.

use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use statehawk::pipeline::TrainConfig;
use statehawk::repro::{run_criterion, Check, Runs};

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    statehawk::logs::init_logging();
    let runs = Runs::new(TrainConfig::default());
    let mut failed = 0;
    for id in 1..=12u8 {
        let start = Instant::now();
        let check = run_criterion(id, &runs).unwrap_or_else(|e| Check {
            id,
            name: "error",
            passed: false,
            detail: e.to_string(),
        });
        if !check.passed {
            failed += 1;
        }
        println!("{check} ({:.0}s)", start.elapsed().as_secs_f64());
        let _ = std::io::stdout().flush();
    }
    println!("acceptance: {} passed, {failed} failed", 12 - failed);
    let strict = std::env::var("STATEHAWK_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
