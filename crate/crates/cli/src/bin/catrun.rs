//! Runs a bundle through the whole consumer: attestation, encrypted
//! upload, verification, immediate rewriting and emulated execution.
//!
//! Exit codes: 0 completed, 3 policy violation, 4 fault, 5 step limit,
//! 2 rejected at admission, 1 other errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cat_cli::service::{run_session, SessionOptions};
use cat_cli::{fail, layout_from, parse_args, read_file, EXIT_REJECTED};
use cat_core::bundle::decode_bundle;
use cat_core::emulator::{parse_aex_schedule, RunConfig, Status, DEFAULT_STEP_LIMIT};
use cat_core::gateway::{write_frame, ServiceError};
use cat_core::pipeline::PipelineError;

#[derive(Parser)]
#[command(name = "catrun", about = "Attest, upload, verify, rewrite and run a bundle")]
struct Args {
    bundle: PathBuf,
    /// Input data placed at the base of the data region.
    data: PathBuf,
    /// One step index per line; an AEX is delivered before that step.
    #[arg(long)]
    aex_schedule: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_STEP_LIMIT)]
    step_limit: u64,
    /// Write every host-boundary frame to this file.
    #[arg(long)]
    emit_frames: Option<PathBuf>,
    /// Queue this file as a message for `ocall_recv` (repeatable).
    #[arg(long)]
    recv: Vec<PathBuf>,
    /// Layout configuration (TOML).
    #[arg(long)]
    layout: Option<PathBuf>,
    /// Seed for the mock attestation keys.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let args: Args = match parse_args() {
        Ok(a) => a,
        Err(code) => return code,
    };
    match run(args) {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}

fn run(args: Args) -> Result<ExitCode, String> {
    let layout = layout_from(args.layout.as_deref())?;
    let bundle = decode_bundle(&read_file(&args.bundle)?).map_err(|e| e.to_string())?;
    let data = read_file(&args.data)?;
    let aex_schedule = match &args.aex_schedule {
        Some(p) => parse_aex_schedule(&String::from_utf8_lossy(&read_file(p)?))?,
        None => Default::default(),
    };
    let queued = args.recv.iter().map(|p| read_file(p)).collect::<Result<Vec<_>, _>>()?;
    let opts = SessionOptions {
        seed: args.seed,
        run: RunConfig { aex_schedule, step_limit: args.step_limit },
        queued,
        tamper_code: false,
    };
    let record = match run_session(&bundle, &data, &layout, &opts) {
        Ok(r) => r,
        Err(ServiceError::Pipeline(PipelineError::Rejected(report))) => {
            println!("rejected: {} violations", report.violations.len());
            print!("{}", report.to_text());
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
        Err(ServiceError::Pipeline(PipelineError::Load(e))) => {
            println!("rejected: {e}");
            return Ok(ExitCode::from(EXIT_REJECTED));
        }
        Err(e) => return Err(e.to_string()),
    };
    if let Some(path) = &args.emit_frames {
        let mut buf = Vec::new();
        for f in &record.frames {
            write_frame(&mut buf, f).map_err(|e| e.to_string())?;
        }
        std::fs::write(path, buf).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let out = &record.outcome;
    match out.status {
        Status::Completed => println!("status: completed"),
        Status::Violation(code) => println!("status: violation code=0x{code:08X}"),
        Status::Fault(kind) => match out.fault_address {
            Some(a) => println!("status: fault {kind:?} at 0x{a:X}"),
            None => println!("status: fault {kind:?}"),
        },
        Status::StepLimit => println!("status: step limit"),
    }
    println!("steps: {}", out.steps);
    println!("escaped writes: {}", out.untrusted_writes_outside(layout.writable_window()).len());
    if let Some(e) = &record.gateway_error {
        println!("gateway: {e}");
    }
    let sends = record.frames.iter().filter(|f| f.kind == cat_core::gateway::FrameType::Send);
    for (i, (frame, plain)) in sends.zip(&record.decrypted).enumerate() {
        println!("output[{i}]: {} ({} byte frame)", hex::encode(plain), frame.payload.len());
    }
    println!("data digest: {}", hex::encode(out.data_snapshot));
    Ok(ExitCode::from(out.status.exit_code() as u8))
}
