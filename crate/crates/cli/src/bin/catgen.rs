//! Instruments and links an assembly source into a code-proof bundle.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cat_cli::{fail, parse_args};
use cat_core::bundle::{encode_bundle, PolicyManifest, PolicySet, ServiceMode, DEFAULT_AEX_THRESHOLD, DEFAULT_SSA_STRIDE};
use cat_core::instrument::build_bundle;

#[derive(Parser)]
#[command(name = "catgen", about = "Instrument assembly and emit a code-proof bundle")]
struct Args {
    /// Assembly source file.
    source: PathBuf,
    /// Output bundle path.
    #[arg(short, long)]
    out: PathBuf,
    /// Comma-separated policies, e.g. `p1,p2,p5`, or `none`.
    #[arg(long, default_value = "p1,p2,p3,p4,p5,p6", value_parser = clap::value_parser!(PolicySet))]
    policies: PolicySet,
    #[arg(long, default_value = "ccaas", value_parser = clap::value_parser!(ServiceMode))]
    mode: ServiceMode,
    #[arg(long, default_value_t = 256)]
    pad_length: u32,
    #[arg(long, default_value_t = 1)]
    max_sends: u32,
    #[arg(long, default_value_t = 8)]
    max_output_bits: u32,
    #[arg(long, default_value_t = DEFAULT_SSA_STRIDE)]
    ssa_k: u32,
    #[arg(long, default_value_t = DEFAULT_AEX_THRESHOLD)]
    aex_threshold: u32,
}

fn main() -> ExitCode {
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    let source = match std::fs::read_to_string(&args.source) {
        Ok(s) => s,
        Err(e) => return fail(format_args!("{}: {e}", args.source.display())),
    };
    let manifest = PolicyManifest {
        policies: args.policies,
        mode: args.mode,
        pad_length: args.pad_length,
        max_sends: args.max_sends,
        max_output_bits: args.max_output_bits,
        ssa_stride_k: args.ssa_k,
        aex_threshold: args.aex_threshold,
    };
    let bundle = match build_bundle(&source, &manifest) {
        Ok(b) => b,
        Err(e) => return fail(format_args!("{}: {e}", args.source.display())),
    };
    if let Err(e) = std::fs::write(&args.out, encode_bundle(&bundle)) {
        return fail(format_args!("{}: {e}", args.out.display()));
    }
    println!("wrote {} ({} code bytes, policies {})", args.out.display(), bundle.code.len(), manifest.policies);
    ExitCode::SUCCESS
}
