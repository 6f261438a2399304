//! Size and dynamic-instruction overhead over the four policy granularities.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cat_core::bundle::{Policy, PolicyManifest, PolicySet};
use cat_core::emulator::{RecordingHost, RunConfig, Status};
use cat_core::instrument::{build_baseline, build_bundle};
use cat_core::loader::EnclaveLayout;
use cat_core::pipeline::execute;

/// The granularity ladder, cheapest first.
pub const LADDER: [(&str, Policy); 4] =
    [("P1", Policy::P1), ("P1+P2", Policy::P2), ("P1-P5", Policy::P5), ("P1-P6", Policy::P6)];

pub const CSV_HEADER: &str = "kernel,policy_set,size_base,size_instrumented,size_overhead_pct,\
dinsn_base,dinsn_instrumented,dinsn_overhead_pct,status";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub policy_set: &'static str,
    pub size_base: u64,
    pub size_instrumented: u64,
    pub dinsn_base: u64,
    pub dinsn_instrumented: u64,
    /// `ok`, or why the row could not be measured.
    pub status: String,
}

impl BenchRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn size_overhead(&self) -> f64 {
        overhead(self.size_base, self.size_instrumented)
    }

    pub fn dinsn_overhead(&self) -> f64 {
        overhead(self.dinsn_base, self.dinsn_instrumented)
    }
}

/// `(instrumented - base) / base` in percent.
pub fn overhead(base: u64, instrumented: u64) -> f64 {
    if base == 0 {
        return 0.0;
    }
    100.0 * (instrumented as f64 - base as f64) / base as f64
}

/// Deterministic input every benchmark kernel runs on.
pub fn bench_input() -> Vec<u8> {
    (0..256u32).map(|i| (i.wrapping_mul(37).wrapping_add(11) % 251) as u8).collect()
}

pub fn manifest_for(last: Policy) -> PolicyManifest {
    PolicyManifest::with_policies(PolicySet::up_to(last))
}

/// Sorted `*.s` files directly inside `dir`.
pub fn kernel_paths(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "s"))
        .collect();
    out.sort();
    Ok(out)
}

fn measure(source: &str, last: Policy, input: &[u8], layout: &EnclaveLayout) -> Result<(u64, u64), String> {
    let bundle = build_bundle(source, &manifest_for(last)).map_err(|e| format!("build: {e}"))?;
    let out = execute(&bundle, layout, input, &mut RecordingHost::default(), &RunConfig::default())
        .map_err(|e| e.to_string().lines().next().unwrap_or_default().to_string())?;
    match out.status {
        Status::Completed => Ok((bundle.code.len() as u64, out.steps)),
        other => Err(format!("{other:?}")),
    }
}

/// All four rows for one kernel; failures are recorded per row.
pub fn bench_kernel(name: &str, source: &str) -> Vec<BenchRow> {
    let input = bench_input();
    let layout = EnclaveLayout::default();
    let base = build_baseline(source).map_err(|e| format!("baseline build: {e}")).and_then(|b| {
        let out = execute(&b, &layout, &input, &mut RecordingHost::default(), &RunConfig::default())
            .map_err(|e| format!("baseline: {e}"))?;
        match out.status {
            Status::Completed => Ok((b.code.len() as u64, out.steps)),
            other => Err(format!("baseline {other:?}")),
        }
    });
    LADDER
        .iter()
        .map(|&(label, last)| {
            let mut row = BenchRow {
                name: name.to_string(),
                policy_set: label,
                size_base: 0,
                size_instrumented: 0,
                dinsn_base: 0,
                dinsn_instrumented: 0,
                status: "ok".into(),
            };
            match &base {
                Ok((size, steps)) => {
                    row.size_base = *size;
                    row.dinsn_base = *steps;
                    match measure(source, last, &input, &layout) {
                        Ok((size, steps)) => {
                            row.size_instrumented = size;
                            row.dinsn_instrumented = steps;
                        }
                        Err(e) => row.status = e,
                    }
                }
                Err(e) => row.status = e.clone(),
            }
            row
        })
        .collect()
}

/// Benchmarks every kernel in `dir`, spreading kernels over worker threads.
pub fn run_bench(dir: &Path) -> std::io::Result<Vec<BenchRow>> {
    let mut jobs = Vec::new();
    for path in kernel_paths(dir)? {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        jobs.push((name, std::fs::read_to_string(&path)?));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let chunk = jobs.len().div_ceil(workers).max(1);
    let rows = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().flat_map(|(n, src)| bench_kernel(n, src)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("bench worker panicked")).collect()
    });
    Ok(rows)
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<6} {:>9} {:>9} {:>9} {:>11} {:>11} {:>9}  status",
        "kernel", "set", "size", "size'", "size +%", "dinsn", "dinsn'", "dinsn +%"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<16} {:<6} {:>9} {:>9} {:>9.1} {:>11} {:>11} {:>9.1}  {}",
            r.name,
            r.policy_set,
            r.size_base,
            r.size_instrumented,
            r.size_overhead(),
            r.dinsn_base,
            r.dinsn_instrumented,
            r.dinsn_overhead(),
            r.status
        );
    }
    out
}

pub fn render_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let status = r.status.replace([',', '\n'], ";");
        let _ = writeln!(
            out,
            "{},{},{},{},{:.2},{},{},{:.2},{}",
            r.name,
            r.policy_set,
            r.size_base,
            r.size_instrumented,
            r.size_overhead(),
            r.dinsn_base,
            r.dinsn_instrumented,
            r.dinsn_overhead(),
            status
        );
    }
    out
}
