//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines are printed whether or not they pass.

use std::process::ExitCode;
use std::time::Instant;

use basilic_core::harness::suites::CRITERIA;

fn main() -> ExitCode {
    // `cargo test -- <filter>` passes libtest flags through; keep only a filter
    let filter: Vec<u8> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (id, _, f) in CRITERIA {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        println!("{} ({:.1?})", v.line(), start.elapsed());
        if !v.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
