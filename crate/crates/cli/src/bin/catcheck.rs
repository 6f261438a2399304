//! Loads and verifies a code-proof bundle without running it.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cat_cli::{fail, layout_from, parse_args, read_file, EXIT_REJECTED};
use cat_core::bundle::decode_bundle;
use cat_core::loader::load;
use cat_core::verifier::verify;

#[derive(Parser)]
#[command(name = "catcheck", about = "Verify a code-proof bundle: 0 accepted, 2 rejected, 1 unreadable")]
struct Args {
    bundle: PathBuf,
    /// Layout configuration (TOML); defaults to the standard layout.
    #[arg(long)]
    layout: Option<PathBuf>,
}

fn main() -> ExitCode {
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    let layout = match layout_from(args.layout.as_deref()) {
        Ok(l) => l,
        Err(e) => return fail(e),
    };
    let bundle = match read_file(&args.bundle).and_then(|b| decode_bundle(&b).map_err(|e| e.to_string())) {
        Ok(b) => b,
        Err(e) => return fail(e),
    };
    let img = match load(&bundle, &layout) {
        Ok(i) => i,
        Err(e) => {
            println!("rejected: {e}");
            return ExitCode::from(EXIT_REJECTED);
        }
    };
    let report = verify(&img, &bundle.manifest);
    if report.accepted {
        println!(
            "accepted: {} instructions, {} guards, policies {}",
            report.coverage.len(),
            report.matches.len(),
            bundle.manifest.policies
        );
        ExitCode::SUCCESS
    } else {
        println!("rejected: {} violations", report.violations.len());
        print!("{}", report.to_text());
        ExitCode::from(EXIT_REJECTED)
    }
}
