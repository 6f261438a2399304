//! Measures instrumentation overhead for every kernel in a directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cat_cli::bench::{render_csv, render_table, run_bench};
use cat_cli::{fail, parse_args};

#[derive(Parser)]
#[command(name = "catbench", about = "Size and dynamic-instruction overhead per policy granularity")]
struct Args {
    /// Directory of `*.s` kernels.
    kernels: PathBuf,
    /// Machine-readable report path.
    #[arg(long, default_value = "bench.csv")]
    csv: PathBuf,
}

fn main() -> ExitCode {
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    let rows = match run_bench(&args.kernels) {
        Ok(r) => r,
        Err(e) => return fail(format_args!("{}: {e}", args.kernels.display())),
    };
    print!("{}", render_table(&rows));
    if let Err(e) = std::fs::write(&args.csv, render_csv(&rows)) {
        return fail(format_args!("{}: {e}", args.csv.display()));
    }
    for r in rows.iter().filter(|r| !r.ok()) {
        eprintln!("{} {}: {}", r.name, r.policy_set, r.status);
    }
    ExitCode::SUCCESS
}
