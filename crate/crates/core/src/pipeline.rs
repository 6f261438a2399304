//! Consumer stages in their fixed order: load, verify, rewrite, execute.

use thiserror::Error;

use crate::bundle::CodeProofBundle;
use crate::emulator::{run, EmuError, ExecutionOutcome, Host, RunConfig};
use crate::loader::{load, rewrite_immediates, EnclaveLayout, LoadError, LoadedImage, RewriteError};
use crate::verifier::{verify, VerificationReport};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("verification rejected the image:\n{}", .0.to_text())]
    Rejected(Box<VerificationReport>),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Emu(#[from] EmuError),
}

#[derive(Debug, Clone)]
pub struct Admitted {
    pub image: LoadedImage,
    pub report: VerificationReport,
}

/// Loads, verifies against the bundle's own manifest, and rewrites.
pub fn admit(bundle: &CodeProofBundle, layout: &EnclaveLayout) -> Result<Admitted, PipelineError> {
    let img = load(bundle, layout)?;
    let report = verify(&img, &bundle.manifest);
    if !report.accepted {
        return Err(PipelineError::Rejected(Box::new(report)));
    }
    let image = rewrite_immediates(&img, &report)?;
    Ok(Admitted { image, report })
}

pub fn execute(
    bundle: &CodeProofBundle,
    layout: &EnclaveLayout,
    inputs: &[u8],
    host: &mut dyn Host,
    config: &RunConfig,
) -> Result<ExecutionOutcome, PipelineError> {
    let admitted = admit(bundle, layout)?;
    Ok(run(&admitted.image, inputs, host, config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{Policy, PolicyManifest, PolicySet};
    use crate::emulator::{RecordingHost, Status};
    use crate::instrument::{build_baseline, build_bundle};
    use crate::loader::scan_placeholders;
    use crate::templates::VIOLATION_CODE;

    const SUM: &str = "
main:
    mov rcx, rsi
    xor rax, rax
    mov rbx, rdi
loop:
    cmp rcx, 0
    je done
    add rax, [rbx]
    add rbx, 8
    sub rcx, 8
    jmp loop
done:
    mov [rdi+0x100], rax
    ret
";

    fn all(p: Policy) -> PolicyManifest {
        PolicyManifest::with_policies(PolicySet::up_to(p))
    }

    #[test]
    fn instrumented_run_matches_baseline() {
        let layout = EnclaveLayout::default();
        let input: Vec<u8> = (1..=64u8).collect();
        let base = execute(&build_baseline(SUM).unwrap(), &layout, &input, &mut RecordingHost::default(), &RunConfig::default()).unwrap();
        for last in [Policy::P1, Policy::P2, Policy::P5, Policy::P6] {
            let b = build_bundle(SUM, &all(last)).unwrap();
            let out = execute(&b, &layout, &input, &mut RecordingHost::default(), &RunConfig::default()).unwrap();
            assert_eq!(out.status, Status::Completed, "{last}");
            assert_eq!(out.data_snapshot, base.data_snapshot);
            assert!(out.steps > base.steps);
        }
    }

    #[test]
    fn placeholders_gone_after_rewrite() {
        let b = build_bundle(SUM, &all(Policy::P6)).unwrap();
        let before = scan_placeholders(&load(&b, &EnclaveLayout::default()).unwrap().bytes);
        assert!(!before.is_empty());
        let admitted = admit(&b, &EnclaveLayout::default()).unwrap();
        assert!(scan_placeholders(&admitted.image.bytes).is_empty());
        assert!(admitted.image.rewritten);
    }

    #[test]
    fn out_of_window_store_aborts_before_writing() {
        let layout = EnclaveLayout::default();
        let src = "main:\n mov rbx, rdi\n sub rbx, 8\n mov [rbx], rax\n ret\n";
        let b = build_bundle(src, &all(Policy::P1)).unwrap();
        let out = execute(&b, &layout, &[], &mut RecordingHost::default(), &RunConfig::default()).unwrap();
        assert_eq!(out.status, Status::Violation(VIOLATION_CODE));
        assert_eq!(out.writes_to(layout.data.base - 8, 8), 0);
    }

    #[test]
    fn corrupted_return_address_aborts() {
        let src = "f:\n mov rax, 0\n mov [rsp], rax\n ret\nmain:\n call f\n ret\n";
        let b = build_bundle(src, &all(Policy::P5)).unwrap();
        let out = execute(&b, &EnclaveLayout::default(), &[], &mut RecordingHost::default(), &RunConfig::default()).unwrap();
        assert_eq!(out.status, Status::Violation(VIOLATION_CODE));
    }
}
