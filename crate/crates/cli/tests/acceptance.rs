//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line to the
//! real stderr (bypassing capture) and then asserts.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cat_cli::bench::{bench_input, manifest_for, CSV_HEADER, LADDER};
use cat_cli::service::{run_session, SessionOptions};
use cat_core::bundle::{encode_bundle, PlaceholderField, Policy, PolicyManifest, ServiceMode};
use cat_core::corpus::{generate_corpus, mutants, with_attack, Attack, MutationKind};
use cat_core::emulator::{RecordingHost, RunConfig, Status};
use cat_core::gateway::{padded_ciphertext_len, FrameType, GatewayError, ServiceError};
use cat_core::instrument::{build_baseline, build_bundle};
use cat_core::loader::{load, scan_placeholders, EnclaveLayout};
use cat_core::pipeline::{admit, execute};
use cat_core::templates::VIOLATION_CODE;

const SOUNDNESS_MIN_VALID: usize = 20;
const SOUNDNESS_MIN_MUTANTS: usize = 100;
const SOUNDNESS_TIME_LIMIT: Duration = Duration::from_secs(60);
const DIFFERENTIAL_MIN_KERNELS: usize = 10;
const MEMCPY_SIZE_BAND: (f64, f64) = (20.0, 230.0);
const BENCH_TIME_LIMIT: Duration = Duration::from_secs(300);
const AEX_THRESHOLD: u32 = 22;
const SSA_K: u32 = 20;
const CORPUS_SEED: u64 = 2024;

fn report(n: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[acceptance] criterion {n} ({title}): {verdict} - {detail}");
}

fn kernels_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../kernels")
}

fn kernel_sources() -> Vec<(String, String)> {
    cat_cli::bench::kernel_paths(&kernels_dir())
        .unwrap()
        .into_iter()
        .map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect()
}

fn adversarial(name: &str) -> String {
    std::fs::read_to_string(kernels_dir().join("adversarial").join(name)).unwrap()
}

fn bin(name: &str) -> Command {
    Command::new(match name {
        "catgen" => env!("CARGO_BIN_EXE_catgen"),
        "catcheck" => env!("CARGO_BIN_EXE_catcheck"),
        "catrun" => env!("CARGO_BIN_EXE_catrun"),
        "catbench" => env!("CARGO_BIN_EXE_catbench"),
        other => panic!("unknown tool {other}"),
    })
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn all_policies() -> PolicyManifest {
    manifest_for(Policy::P6)
}

#[test]
fn criterion_1_verifier_soundness() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut valid = Vec::new();
    for k in generate_corpus(CORPUS_SEED, 24) {
        valid.push((k.name.clone(), k.source.clone()));
    }
    valid.extend(kernel_sources());
    let m = all_policies();

    let mut accepted = 0;
    let mut failures = Vec::new();
    for (i, (name, src)) in valid.iter().enumerate() {
        let path = dir.path().join(format!("valid_{i}.cat"));
        std::fs::write(&path, encode_bundle(&build_bundle(src, &m).unwrap())).unwrap();
        let out = bin("catcheck").arg(&path).output().unwrap();
        if out.status.code() == Some(0) {
            accepted += 1;
        } else {
            failures.push(format!("{name} rejected: {}", stdout(&out)));
        }
    }

    let mut all_mutants = Vec::new();
    for (i, (_, src)) in valid.iter().enumerate() {
        all_mutants.extend(mutants(src, &m, i as u64, 1).unwrap());
    }
    let kinds: BTreeSet<MutationKind> = all_mutants.iter().map(|x| x.kind).collect();
    let mut rejected = 0;
    for (i, x) in all_mutants.iter().enumerate() {
        let path = dir.path().join(format!("mutant_{i}.cat"));
        std::fs::write(&path, encode_bundle(&x.bundle)).unwrap();
        let out = bin("catcheck").arg(&path).output().unwrap();
        let text = stdout(&out);
        let named = x.kind.expected().iter().any(|k| text.contains(&format!(" {k}")));
        if out.status.code() == Some(2) && named {
            rejected += 1;
        } else {
            failures.push(format!("{:?} `{}` not rejected as expected: {text}", x.kind, x.description));
        }
    }
    let elapsed = start.elapsed();
    let pass = valid.len() >= SOUNDNESS_MIN_VALID
        && all_mutants.len() >= SOUNDNESS_MIN_MUTANTS
        && accepted == valid.len()
        && rejected == all_mutants.len()
        && kinds.len() == MutationKind::ALL.len()
        && elapsed < SOUNDNESS_TIME_LIMIT;
    report(
        1,
        "verifier soundness",
        pass,
        &format!(
            "{accepted}/{} valid accepted, {rejected}/{} mutants rejected over {} edit kinds in {:.1}s",
            valid.len(),
            all_mutants.len(),
            kinds.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{failures:#?}");
}

#[test]
fn criterion_2_runtime_confinement() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.bin");
    std::fs::write(&data, bench_input()).unwrap();
    let layout = EnclaveLayout::default();
    let m = all_policies();

    let mut variants: Vec<(String, String)> = Vec::new();
    for (name, src) in kernel_sources() {
        for attack in Attack::ALL {
            variants.push((format!("{name}+{attack:?}"), with_attack(&src, attack).unwrap()));
        }
    }
    for file in ["oob_store.s", "offlist_jump.s", "ret_corrupt.s"] {
        variants.push((file.to_string(), adversarial(file)));
    }

    let mut failures = Vec::new();
    for (i, (name, src)) in variants.iter().enumerate() {
        let bundle = build_bundle(src, &m).unwrap();
        let path = dir.path().join(format!("v{i}.cat"));
        std::fs::write(&path, encode_bundle(&bundle)).unwrap();
        let out = bin("catrun").arg(&path).arg(&data).output().unwrap();
        let text = stdout(&out);
        let lib = execute(&bundle, &layout, &bench_input(), &mut RecordingHost::default(), &RunConfig::default()).unwrap();
        let escaped = lib.untrusted_writes_outside(layout.writable_window()).len();
        let ok = out.status.code() == Some(3)
            && text.contains("violation code=0xFFFFFFFF")
            && text.contains("escaped writes: 0")
            && lib.status == Status::Violation(VIOLATION_CODE)
            && escaped == 0;
        if !ok {
            failures.push(format!("{name}: exit {:?}, {escaped} escaped writes\n{text}", out.status.code()));
        }
    }
    let pass = failures.is_empty();
    report(
        2,
        "confinement at runtime",
        pass,
        &format!("{}/{} attack variants exited 3 with zero escaped writes", variants.len() - failures.len(), variants.len()),
    );
    assert!(pass, "{failures:#?}");
}

#[test]
fn criterion_3_aex_threshold_exactness() {
    let dir = tempfile::tempdir().unwrap();
    let src = "main:\n mov rcx, 200\nspin:\n add rax, rcx\n sub rcx, 1\n cmp rcx, 0\n jne spin\n mov [rdi], rax\n ret\n";
    let m = PolicyManifest { ssa_stride_k: SSA_K, aex_threshold: AEX_THRESHOLD, ..all_policies() };
    let bundle_path = dir.path().join("spin.cat");
    std::fs::write(&bundle_path, encode_bundle(&build_bundle(src, &m).unwrap())).unwrap();
    let data = dir.path().join("data.bin");
    std::fs::write(&data, [0u8; 8]).unwrap();

    let run_with = |count: u32| {
        let sched = dir.path().join(format!("aex_{count}.txt"));
        std::fs::write(&sched, "100\n".repeat(count as usize)).unwrap();
        bin("catrun").arg(&bundle_path).arg(&data).arg("--aex-schedule").arg(&sched).output().unwrap()
    };
    let below = run_with(AEX_THRESHOLD - 1);
    let at = run_with(AEX_THRESHOLD);
    let pass = below.status.code() == Some(0)
        && at.status.code() == Some(3)
        && stdout(&at).contains("violation code=0xFFFFFFFF");
    report(
        3,
        "AEX threshold exactness",
        pass,
        &format!(
            "k={SSA_K}, threshold={AEX_THRESHOLD}: {} AEXes exit {:?}, {} AEXes exit {:?}",
            AEX_THRESHOLD - 1,
            below.status.code(),
            AEX_THRESHOLD,
            at.status.code()
        ),
    );
    assert!(pass, "{}\n{}", stdout(&below), stdout(&at));
}

#[test]
fn criterion_4_gateway_quotas() {
    let layout = EnclaveLayout::default();
    let cdaas = PolicyManifest { mode: ServiceMode::CDaaS, max_sends: 1, max_output_bits: 8, ..all_policies() };
    let twice = "main:\n mov rbx, rdi\n mov rsi, 1\n call ocall_send\n mov rdi, rbx\n mov rsi, 1\n call ocall_send\n ret\n";
    let r = run_session(&build_bundle(twice, &cdaas).unwrap(), &[1; 8], &layout, &SessionOptions::default()).unwrap();
    let second_rejected = matches!(r.outcome.status, Status::Fault(_))
        && r.gateway_error == Some(GatewayError::SendQuotaExceeded(1))
        && r.decrypted == vec![vec![1u8]];

    let wide = "main:\n mov rsi, 2\n call ocall_send\n ret\n";
    let r = run_session(&build_bundle(wide, &cdaas).unwrap(), &[1; 8], &layout, &SessionOptions::default()).unwrap();
    let budget_rejected = matches!(r.gateway_error, Some(GatewayError::OutputBudgetExceeded { bits: 16, remaining: 8 }))
        && r.decrypted.is_empty();

    let ccaas = PolicyManifest { max_sends: 8, ..all_policies() };
    let sizes = "main:\n mov rbx, rdi\n mov rsi, 0\n call ocall_send\n mov rdi, rbx\n mov rsi, 1\n call ocall_send\n \
                 mov rdi, rbx\n mov rsi, 100\n call ocall_send\n mov rdi, rbx\n mov rsi, 256\n call ocall_send\n ret\n";
    let mut lengths = BTreeSet::new();
    for seed in 0..3 {
        let opts = SessionOptions { seed, ..SessionOptions::default() };
        let r = run_session(&build_bundle(sizes, &ccaas).unwrap(), &[7; 256], &layout, &opts).unwrap();
        assert_eq!(r.outcome.status, Status::Completed);
        assert_eq!(r.decrypted.iter().map(Vec::len).collect::<Vec<_>>(), [0, 1, 100, 256]);
        lengths.extend(r.frames.iter().filter(|f| f.kind == FrameType::Send).map(|f| f.payload.len()));
    }
    let constant = lengths.len() == 1 && lengths.contains(&padded_ciphertext_len(ccaas.pad_length));

    let pass = second_rejected && budget_rejected && constant;
    report(
        4,
        "gateway quotas",
        pass,
        &format!(
            "second send rejected: {second_rejected}, 16-bit output over 8-bit budget rejected: {budget_rejected}, \
             send frame lengths {lengths:?}"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_5_placeholder_hygiene() {
    let layout = EnclaveLayout::default();
    let mut checked = 0;
    let mut failures = Vec::new();
    for (name, src) in kernel_sources() {
        for (label, last) in LADDER {
            let m = manifest_for(last);
            let bundle = build_bundle(&src, &m).unwrap();
            let before: BTreeSet<PlaceholderField> =
                scan_placeholders(&load(&bundle, &layout).unwrap().bytes).into_iter().map(|(_, f)| f).collect();
            let missing: Vec<_> =
                PlaceholderField::required_by(m.policies).into_iter().filter(|f| !before.contains(f)).collect();
            let after = scan_placeholders(&admit(&bundle, &layout).unwrap().image.bytes);
            if !missing.is_empty() || !after.is_empty() {
                failures.push(format!("{name} {label}: missing before {missing:?}, left after {after:?}"));
            }
            checked += 1;
        }
    }
    let pass = failures.is_empty();
    report(5, "placeholder hygiene", pass, &format!("{checked} images: all selected placeholders present before, none after"));
    assert!(pass, "{failures:#?}");
}

#[test]
fn criterion_6_differential_correctness() {
    let layout = EnclaveLayout::default();
    let input = bench_input();
    let kernels = kernel_sources();
    let mut failures = Vec::new();
    for (name, src) in &kernels {
        let mut base_host = RecordingHost::default();
        let base = execute(&build_baseline(src).unwrap(), &layout, &input, &mut base_host, &RunConfig::default()).unwrap();
        if base.status != Status::Completed {
            failures.push(format!("{name}: baseline {:?}", base.status));
            continue;
        }
        for (label, last) in LADDER {
            let mut host = RecordingHost::default();
            let b = build_bundle(src, &manifest_for(last)).unwrap();
            let out = execute(&b, &layout, &input, &mut host, &RunConfig::default()).unwrap();
            if out.status != Status::Completed || out.data_snapshot != base.data_snapshot || host.sent != base_host.sent {
                failures.push(format!("{name} {label}: {:?}", out.status));
            }
        }
    }
    let pass = kernels.len() >= DIFFERENTIAL_MIN_KERNELS && failures.is_empty();
    report(
        6,
        "differential correctness",
        pass,
        &format!("{} kernels x {} granularities match the uninstrumented digest and outputs", kernels.len(), LADDER.len()),
    );
    assert!(pass, "{failures:#?}");
}

#[test]
fn criterion_7_overhead_trends() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let start = Instant::now();
    let out = bin("catbench").arg(kernels_dir()).arg("--csv").arg(&csv).output().unwrap();
    let elapsed = start.elapsed();
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_HEADER));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();

    let memcpy = rows.iter().find(|r| r[0] == "memcpy" && r[1] == "P1-P5").expect("memcpy row");
    let memcpy_size: f64 = memcpy[4].parse().unwrap();
    let in_band = memcpy[8] == "ok" && memcpy_size >= MEMCPY_SIZE_BAND.0 && memcpy_size <= MEMCPY_SIZE_BAND.1;

    let mut non_monotone = Vec::new();
    for chunk in rows.chunks(LADDER.len()) {
        let dinsn: Vec<u64> = chunk.iter().map(|r| r[6].parse().unwrap()).collect();
        if chunk.iter().any(|r| r[8] != "ok") || dinsn.windows(2).any(|w| w[0] > w[1]) {
            non_monotone.push(format!("{}: {dinsn:?}", chunk[0][0]));
        }
    }
    let pass = in_band && non_monotone.is_empty() && elapsed < BENCH_TIME_LIMIT;
    report(
        7,
        "overhead trends",
        pass,
        &format!(
            "memcpy P1-P5 size overhead {memcpy_size:.1}% (band {}-{}%), dinsn monotone for {}/{} kernels, bench {:.1}s",
            MEMCPY_SIZE_BAND.0,
            MEMCPY_SIZE_BAND.1,
            rows.len() / LADDER.len() - non_monotone.len(),
            rows.len() / LADDER.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{non_monotone:#?}\n{}", stdout(&out));
}

#[test]
fn criterion_8_guard_pages() {
    let layout = EnclaveLayout::default();
    let src = adversarial("stack_overflow.s");
    let mut details = Vec::new();
    let mut pass = true;
    for (label, last) in LADDER {
        let b = build_bundle(&src, &manifest_for(last)).unwrap();
        let out = execute(&b, &layout, &[], &mut RecordingHost::default(), &RunConfig::default()).unwrap();
        let fault_in_guard = out.fault_address.is_some_and(|a| layout.stack_guard_low.contains(a));
        let outside = out.write_log.iter().filter(|w| !w.trusted && !layout.stack.contains_range(w.addr, w.len)).count();
        let ok = matches!(out.status, Status::Fault(_)) && fault_in_guard && outside == 0;
        pass &= ok;
        details.push(format!("{label}: {:?}, {outside} kernel writes outside stack", out.status));
    }
    report(8, "guard pages", pass, &details.join("; "));
    assert!(pass);
}

/// Independent model of `echo_digest.s`.
fn echo_digest_oracle(input: &[u8]) -> [u8; 8] {
    let mut acc: u64 = 0x6A09_E667_F3BC_C908;
    for chunk in input.chunks(8) {
        let mut w = [0u8; 8];
        w[..chunk.len()].copy_from_slice(chunk);
        acc ^= u64::from_le_bytes(w);
        acc = acc.wrapping_add(acc >> 13);
    }
    acc.to_le_bytes()
}

/// Independent model of `one_bit.s`.
fn one_bit_oracle(input: &[u8]) -> u8 {
    let sum: u64 = input.chunks(8).map(|c| c[0] as u64).sum();
    u8::from(sum > 0x400)
}

#[test]
fn criterion_9_end_to_end_pipeline() {
    let layout = EnclaveLayout::default();
    let sources: std::collections::BTreeMap<String, String> = kernel_sources().into_iter().collect();
    let input: Vec<u8> = (0..512u32).map(|i| (i * 131 % 256) as u8).collect();

    let echo = build_bundle(&sources["echo_digest"], &all_policies()).unwrap();
    let r = run_session(&echo, &input, &layout, &SessionOptions::default()).unwrap();
    let echo_ok = r.outcome.status == Status::Completed && r.decrypted == vec![echo_digest_oracle(&input).to_vec()];

    let cdaas = PolicyManifest { mode: ServiceMode::CDaaS, ..all_policies() };
    let one_bit = build_bundle(&sources["one_bit"], &cdaas).unwrap();
    let mut bits_ok = true;
    for data in [vec![0u8; 256], vec![255u8; 256], input.clone()] {
        let r = run_session(&one_bit, &data, &layout, &SessionOptions { seed: 3, ..SessionOptions::default() }).unwrap();
        bits_ok &= r.outcome.status == Status::Completed && r.decrypted == vec![vec![one_bit_oracle(&data)]];
    }

    let tampered = run_session(&echo, &input, &layout, &SessionOptions { tamper_code: true, ..SessionOptions::default() });
    let tamper_ok = matches!(tampered, Err(ServiceError::Gateway(GatewayError::AuthFailure)));

    let pass = echo_ok && bits_ok && tamper_ok;
    report(
        9,
        "end-to-end pipeline",
        pass,
        &format!("CCaaS echo digest: {echo_ok}, CDaaS one-bit answers: {bits_ok}, tampered upload rejected: {tamper_ok}"),
    );
    assert!(pass);
}
