//! Seeded random kernels and single-edit mutants for soundness testing.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bundle::{CodeProofBundle, PlaceholderField, Policy, PolicyManifest};
use crate::instrument::{instrument, link, Attach, InstrumentError, Item, Program};
use crate::isa::{Instruction, Mem, Mnemonic, Operand, Reg, Sym};
use crate::loader::scan_placeholders;
use crate::templates::GuardKind;
use crate::verifier::ViolationKind;

/// A generated program and the input it is meant to run on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedKernel {
    pub name: String,
    pub source: String,
    pub input: Vec<u8>,
}

const VALUE_REGS: [&str; 5] = ["rax", "rbx", "rdx", "r13", "r14"];

struct Gen {
    rng: ChaCha20Rng,
    out: String,
    labels: usize,
    helpers: usize,
    called: Vec<bool>,
}

impl Gen {
    fn reg(&mut self) -> &'static str {
        VALUE_REGS.choose(&mut self.rng).copied().expect("non-empty")
    }

    fn line(&mut self, s: &str) {
        let _ = writeln!(self.out, "    {s}");
    }

    fn fresh(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}_{}", self.labels)
    }

    fn simple(&mut self) {
        let (a, b) = (self.reg(), self.reg());
        let line = match self.rng.gen_range(0..9) {
            0 => format!("mov {a}, {}", self.rng.gen_range(0..1000)),
            1 => format!("add {a}, {b}"),
            2 => format!("xor {a}, {b}"),
            3 => format!("and {a}, {}", self.rng.gen_range(1..0x7fff)),
            4 => format!("shr {a}, {}", self.rng.gen_range(1..8)),
            5 => format!("sub {a}, {b}"),
            6 => format!("mov {a}, [r12+{}]", 8 * self.rng.gen_range(0..32)),
            7 => format!("mov [r12+{}], {a}", 256 + 8 * self.rng.gen_range(0..96)),
            _ => format!("lea {a}, [{b}+{}]", self.rng.gen_range(0..64)),
        };
        self.line(&line);
    }

    fn block(&mut self, depth: u32) {
        match self.rng.gen_range(0..10) {
            0..=2 => self.simple(),
            3 => {
                let (v, i) = (self.reg(), self.reg());
                self.line(&format!("mov rcx, {i}"));
                self.line("and rcx, 31");
                self.line(&format!("mov [r12+rcx*8+1024], {v}"));
            }
            4 => {
                let (a, b) = (self.reg(), self.reg());
                self.line(&format!("push {a}"));
                self.simple();
                self.line(&format!("pop {b}"));
            }
            5 => {
                let a = self.reg();
                self.line("sub rsp, 16");
                self.line(&format!("mov [rsp+8], {a}"));
                self.simple();
                self.line(&format!("mov {a}, [rsp+8]"));
                self.line("add rsp, 16");
            }
            6 if self.helpers > 0 => {
                let h = self.rng.gen_range(0..self.helpers);
                self.called[h] = true;
                if self.rng.gen_bool(0.5) {
                    self.line(&format!("call helper_{h}"));
                } else {
                    self.line(&format!("movabs rcx, helper_{h}"));
                    self.line("call rcx");
                }
            }
            7 if depth == 0 => {
                let l = self.fresh("loop");
                let n = self.rng.gen_range(1..6);
                self.line(&format!("mov r15, {n}"));
                let _ = writeln!(self.out, "{l}:");
                for _ in 0..self.rng.gen_range(1..4) {
                    self.block(depth + 1);
                }
                self.line("sub r15, 1");
                self.line("cmp r15, 0");
                self.line(&format!("jne {l}"));
            }
            8 if depth == 0 => {
                let l = self.fresh("skip");
                let a = self.reg();
                let jcc = ["ja", "jb", "je", "jne", "jg", "jl", "jae", "jbe"].choose(&mut self.rng).copied().expect("jcc");
                let n = self.rng.gen_range(0..500);
                self.line(&format!("cmp {a}, {n}"));
                self.line(&format!("{jcc} {l}"));
                for _ in 0..self.rng.gen_range(1..4) {
                    self.block(depth + 1);
                }
                let _ = writeln!(self.out, "{l}:");
            }
            _ => {
                self.line("pushf");
                self.simple();
                self.line("popf");
            }
        }
    }
}

/// A terminating, violation-free kernel over a 256-byte input at `rdi`.
pub fn generate_kernel(seed: u64) -> GeneratedKernel {
    let mut g = Gen { rng: ChaCha20Rng::seed_from_u64(seed), out: String::new(), labels: 0, helpers: 0, called: Vec::new() };
    let helpers = g.rng.gen_range(0..3);
    g.called = vec![false; helpers];
    g.out.push_str("main:\n");
    g.line("mov r12, rdi");
    for r in VALUE_REGS {
        g.line(&format!("xor {r}, {r}"));
    }
    let mut body = std::mem::take(&mut g.out);
    g.helpers = helpers;
    for _ in 0..g.rng.gen_range(4..12) {
        g.block(0);
    }
    body.push_str(&g.out);
    g.out.clear();
    let uncalled: Vec<usize> = (0..helpers).filter(|h| !g.called[*h]).collect();
    for h in uncalled {
        g.line(&format!("call helper_{h}"));
    }
    g.line("mov [r12+0x800], rax");
    g.line("mov [r12+0x808], rbx");
    g.line("mov [r12+0x810], rdx");
    if g.rng.gen_bool(0.5) {
        g.line("lea rdi, [r12+0x800]");
        g.line("mov rsi, 8");
        g.line("call ocall_send");
    }
    g.line("ret");
    body.push_str(&g.out);
    for h in 0..helpers {
        g.out.clear();
        g.helpers = 0;
        let _ = writeln!(g.out, "helper_{h}:");
        for _ in 0..g.rng.gen_range(1..5) {
            g.block(1);
        }
        g.line("ret");
        body.push_str(&g.out);
    }
    let input = (0..256).map(|_| g.rng.gen()).collect();
    GeneratedKernel { name: format!("gen_{seed:04}"), source: body, input }
}

pub fn generate_corpus(seed: u64, count: usize) -> Vec<GeneratedKernel> {
    (0..count as u64).map(|i| generate_kernel(seed.wrapping_mul(1_000_003).wrapping_add(i))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MutationKind {
    GuardDeletion,
    PlaceholderAlteration,
    BranchIntoGuard,
    UnguardedStore,
    EpilogRemoval,
}

impl MutationKind {
    pub const ALL: [MutationKind; 5] = [
        MutationKind::GuardDeletion,
        MutationKind::PlaceholderAlteration,
        MutationKind::BranchIntoGuard,
        MutationKind::UnguardedStore,
        MutationKind::EpilogRemoval,
    ];

    /// Violations of which at least one must be reported.
    pub fn expected(self) -> &'static [ViolationKind] {
        use ViolationKind::*;
        match self {
            MutationKind::GuardDeletion => &[MissingGuard, UnverifiedIndirect],
            MutationKind::PlaceholderAlteration => &[WrongPlaceholder, MalformedGuard],
            MutationKind::BranchIntoGuard => &[TargetInsideGuard],
            MutationKind::UnguardedStore => &[MissingGuard],
            MutationKind::EpilogRemoval => &[MissingEpilog],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mutant {
    pub kind: MutationKind,
    pub description: String,
    pub bundle: CodeProofBundle,
}

/// (function, item) positions of annotations matching `pred`.
fn annotation_sites(p: &Program, pred: impl Fn(GuardKind) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        for (ii, item) in f.items.iter().enumerate() {
            if let Item::Annotation(a) = item {
                if pred(a.kind) {
                    out.push((fi, ii));
                }
            }
        }
    }
    out
}

/// Applies one edit of `kind` to the instrumented program; `None` when the
/// program offers no site for it.
pub fn mutate(
    source: &str,
    manifest: &PolicyManifest,
    kind: MutationKind,
    rng: &mut impl Rng,
) -> Result<Option<Mutant>, InstrumentError> {
    let mut p = instrument(Program::parse(source)?, manifest)?;
    let description = match kind {
        MutationKind::GuardDeletion => {
            let sites = annotation_sites(&p, |k| {
                matches!(k, GuardKind::StoreGuard | GuardKind::RspGuard | GuardKind::CfiGuard | GuardKind::ShadowProlog)
            });
            let Some(&(fi, ii)) = sites.choose(rng) else { return Ok(None) };
            let Item::Annotation(a) = p.functions[fi].items.remove(ii) else { unreachable!() };
            format!("deleted {} in {}", a.kind, p.functions[fi].name)
        }
        MutationKind::EpilogRemoval => {
            let sites = annotation_sites(&p, |k| k == GuardKind::ShadowEpilog);
            let Some(&(fi, ii)) = sites.choose(rng) else { return Ok(None) };
            p.functions[fi].items.remove(ii);
            format!("removed epilog in {}", p.functions[fi].name)
        }
        MutationKind::BranchIntoGuard => {
            // entry-sequence guards stay put so only the planted branch is wrong
            let sites: Vec<_> = annotation_sites(&p, |k| k != GuardKind::SsaCheck)
                .into_iter()
                .filter(|&(fi, ii)| p.functions[fi].items[..ii].iter().any(|i| matches!(i, Item::Instr(_))))
                .collect();
            let Some(&(fi, ii)) = sites.choose(rng) else { return Ok(None) };
            let Item::Annotation(a) = p.functions[fi].items.remove(ii) else { unreachable!() };
            let split = rng.gen_range(1..a.instrs.len().max(2)).min(a.instrs.len());
            let mut head = a.clone();
            let mut tail = a.clone();
            head.instrs.truncate(split);
            tail.instrs.drain(..split);
            let jump = Instruction::op1(Mnemonic::Je, Operand::Label(Sym::new("mutant_target")));
            let attach = a.attach;
            let items = &mut p.functions[fi].items;
            items.insert(ii, Item::Annotation(tail));
            items.insert(ii, Item::Label("mutant_target".into()));
            items.insert(ii, Item::Annotation(head));
            // the jump goes ahead of the whole guarded unit
            let mut at = if attach == Attach::After { ii - 1 } else { ii };
            while at > 0 && matches!(&items[at - 1], Item::Annotation(b) if b.attach == Attach::Before) {
                at -= 1;
            }
            items.insert(at, Item::Instr(jump));
            format!("branch to offset {split} of {} in {}", a.kind, p.functions[fi].name)
        }
        MutationKind::UnguardedStore => {
            let mut sites = Vec::new();
            for (fi, f) in p.functions.iter().enumerate().filter(|(_, f)| !f.is_data) {
                for ii in 1..f.items.len() {
                    let after_before = matches!(&f.items[ii - 1], Item::Annotation(a) if a.attach == Attach::Before);
                    let at_after = matches!(&f.items[ii], Item::Annotation(a) if a.attach == Attach::After);
                    let reachable = matches!(&f.items[ii - 1], Item::Instr(i)
                        if !matches!(i.mnemonic, Mnemonic::Ret | Mnemonic::Jmp | Mnemonic::Hlt));
                    if !after_before && !at_after && reachable {
                        sites.push((fi, ii));
                    }
                }
            }
            let Some(&(fi, ii)) = sites.choose(rng) else { return Ok(None) };
            let disp = 8 * rng.gen_range(0..16);
            let store = Instruction::op2(
                Mnemonic::Mov,
                Operand::Mem(Mem { base: Reg::Rdi, index: None, disp }),
                Operand::Reg(Reg::Rax),
            );
            p.functions[fi].items.insert(ii, Item::Instr(store));
            format!("unguarded store at item {ii} of {}", p.functions[fi].name)
        }
        MutationKind::PlaceholderAlteration => {
            let mut bundle = link(&p, manifest)?;
            let slots = scan_placeholders(&bundle.code);
            let Some(&(offset, field)) = slots.choose(rng) else { return Ok(None) };
            let replacement = if rng.gen_bool(0.5) {
                let others: Vec<_> = PlaceholderField::ALL.iter().filter(|f| **f != field).collect();
                others.choose(rng).expect("nine fields").value()
            } else {
                field.value() ^ (1 << rng.gen_range(0..40))
            };
            let o = offset as usize;
            bundle.code[o..o + 8].copy_from_slice(&replacement.to_le_bytes());
            return Ok(Some(Mutant {
                kind,
                description: format!("placeholder {} at 0x{offset:x} set to 0x{replacement:x}", field.name()),
                bundle,
            }));
        }
    };
    Ok(Some(Mutant { kind, description, bundle: link(&p, manifest)? }))
}

/// Up to `per_kind` mutants of each kind; kinds without a site are skipped.
pub fn mutants(source: &str, manifest: &PolicyManifest, seed: u64, per_kind: usize) -> Result<Vec<Mutant>, InstrumentError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in MutationKind::ALL {
        if kind == MutationKind::EpilogRemoval && !manifest.policies.contains(Policy::P5) {
            continue;
        }
        for _ in 0..per_kind {
            if let Some(m) = mutate(source, manifest, kind, &mut rng)? {
                out.push(m);
            }
        }
    }
    Ok(out)
}

/// Runtime attacks planted at the start of a kernel's `main`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Attack {
    /// Store one qword just below the data region.
    OutOfWindowStore,
    /// Indirect jump to an address that is not a function entry.
    OffListJump,
    /// A callee overwrites its return address.
    ReturnAddressCorruption,
}

impl Attack {
    pub const ALL: [Attack; 3] = [Attack::OutOfWindowStore, Attack::OffListJump, Attack::ReturnAddressCorruption];
}

/// `source` with `attack` inserted right after the `main:` label; `None`
/// when there is no `main`.
pub fn with_attack(source: &str, attack: Attack) -> Option<String> {
    let (snippet, tail) = match attack {
        Attack::OutOfWindowStore => ("    mov rbx, rdi\n    sub rbx, 8\n    mov [rbx], rdi\n", ""),
        Attack::OffListJump => ("    movabs rax, main\n    add rax, 1\n    jmp rax\n", ""),
        Attack::ReturnAddressCorruption => {
            ("    call attack_victim\n", "attack_victim:\n    mov [rsp], rdi\n    ret\n")
        }
    };
    let mut out = String::with_capacity(source.len() + snippet.len() + tail.len());
    let mut planted = false;
    for line in source.lines() {
        out.push_str(line);
        out.push('\n');
        if !planted && line.split(';').next().is_some_and(|l| l.trim() == "main:") {
            out.push_str(snippet);
            planted = true;
        }
    }
    out.push_str(tail);
    planted.then_some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::PolicySet;
    use crate::emulator::{RecordingHost, RunConfig, Status};
    use crate::loader::{load, EnclaveLayout};
    use crate::pipeline::execute;
    use crate::verifier::verify;
    use crate::instrument::build_bundle;

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_kernel(5), generate_kernel(5));
        assert_ne!(generate_kernel(5).source, generate_kernel(6).source);
    }

    #[test]
    fn generated_kernels_verify_and_complete() {
        let m = PolicyManifest::with_policies(PolicySet::up_to(Policy::P6));
        for k in generate_corpus(1, 8) {
            let b = build_bundle(&k.source, &m).unwrap_or_else(|e| panic!("{e}\n{}", k.source));
            let out = execute(&b, &EnclaveLayout::default(), &k.input, &mut RecordingHost::default(), &RunConfig::default())
                .unwrap_or_else(|e| panic!("{e}\n{}", k.source));
            assert_eq!(out.status, Status::Completed, "{}", k.source);
        }
    }

    #[test]
    fn every_mutation_kind_is_rejected() {
        let m = PolicyManifest::with_policies(PolicySet::up_to(Policy::P6));
        let layout = EnclaveLayout::default();
        let src = generate_kernel(3).source;
        let all = mutants(&src, &m, 11, 2).unwrap();
        for kind in MutationKind::ALL {
            assert!(all.iter().any(|x| x.kind == kind), "{kind:?}");
        }
        for x in all {
            let report = verify(&load(&x.bundle, &layout).unwrap(), &m);
            assert!(!report.accepted, "{}", x.description);
            assert!(x.kind.expected().iter().any(|k| report.has(*k)), "{}: {}", x.description, report.to_text());
        }
    }

    #[test]
    fn attacks_are_planted_after_main() {
        let src = "helper:\n ret\nmain: ; entry\n call helper\n ret\n";
        let out = with_attack(src, Attack::ReturnAddressCorruption).unwrap();
        assert!(out.contains("main: ; entry\n    call attack_victim\n call helper"));
        assert!(out.ends_with("attack_victim:\n    mov [rsp], rdi\n    ret\n"));
        assert_eq!(with_attack("f:\n ret\n", Attack::OffListJump), None);
    }

    #[test]
    fn planted_attacks_abort() {
        let m = PolicyManifest::with_policies(PolicySet::up_to(Policy::P5));
        let layout = EnclaveLayout::default();
        for attack in Attack::ALL {
            let src = with_attack(&generate_kernel(9).source, attack).unwrap();
            let out = execute(&build_bundle(&src, &m).unwrap(), &layout, &[0; 256], &mut RecordingHost::default(), &RunConfig::default())
                .unwrap();
            assert_eq!(out.status, Status::Violation(crate::templates::VIOLATION_CODE), "{attack:?}");
            assert!(out.untrusted_writes_outside(layout.writable_window()).is_empty());
        }
    }
}
