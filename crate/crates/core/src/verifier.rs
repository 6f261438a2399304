//! Recursive-descent disassembly and byte-exact guard matching over a
//! loaded, not yet rewritten image.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::bundle::{PlaceholderField, Policy, PolicyManifest};
use crate::isa::{decode_instruction, Instruction, Mnemonic, Operand, Reg, Stmt};
use crate::loader::{LoadedImage, TrustedRange, TrustedRole};
use crate::templates::{
    self, instantiate, GuardKind, Instantiated, SymbolResolver, CFI_CHECK, EXIT_LABEL, SCRATCH_ALTERNATE,
    SCRATCH_PRIMARY, SSA_CHECK, SSA_PAGE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    MissingGuard,
    MalformedGuard,
    TargetInsideGuard,
    UndecodableInstruction,
    UnverifiedIndirect,
    MissingEpilog,
    MissingSsaCheck,
    WrongPlaceholder,
    /// Direct branch leaving the code region other than to a host-call stub.
    ExternalTarget,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Violation {
    pub offset: u64,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuardMatch {
    pub kind: GuardKind,
    pub start: u64,
    pub length: u64,
    pub guarded_instruction: Option<u64>,
    /// Image offsets of placeholder immediates.
    pub immediate_slots: Vec<(u64, PlaceholderField)>,
}

/// A runtime-support routine verified at its symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutineMatch {
    pub name: &'static str,
    pub start: u64,
    pub length: u64,
    pub immediate_slots: Vec<(u64, PlaceholderField)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VerificationReport {
    pub accepted: bool,
    pub violations: Vec<Violation>,
    pub coverage: BTreeSet<u64>,
    pub matches: Vec<GuardMatch>,
    pub routines: Vec<RoutineMatch>,
    pub decode_attempts: usize,
}

impl VerificationReport {
    pub fn immediate_slots(&self) -> impl Iterator<Item = (u64, PlaceholderField)> + '_ {
        self.matches
            .iter()
            .flat_map(|m| m.immediate_slots.iter().copied())
            .chain(self.routines.iter().flat_map(|r| r.immediate_slots.iter().copied()))
    }

    pub fn count(&self, kind: GuardKind) -> usize {
        self.matches.iter().filter(|m| m.kind == kind).count()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    /// Code ranges allowed to write privileged regions, as absolute addresses.
    pub fn trusted_ranges(&self, base: u64) -> Vec<TrustedRange> {
        let mut out = Vec::new();
        for m in &self.matches {
            if matches!(m.kind, GuardKind::ShadowProlog | GuardKind::ShadowEpilog) {
                out.push(TrustedRange {
                    start: base + m.start,
                    end: base + m.start + m.length,
                    role: TrustedRole::ShadowStack,
                });
            }
        }
        for r in &self.routines {
            let role = if r.name == SSA_CHECK { TrustedRole::SsaPage } else { TrustedRole::Stack };
            out.push(TrustedRange { start: base + r.start, end: base + r.start + r.length, role });
        }
        out.sort_by_key(|r| r.start);
        out
    }

    /// One `<offset> <kind>` line per violation.
    pub fn to_text(&self) -> String {
        self.violations.iter().map(|v| format!("0x{:x} {}\n", v.offset, v.kind)).collect()
    }
}

/// Result of comparing image bytes with a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchOutcome {
    Exact(GuardMatch),
    /// Bytes differ only inside placeholder slots.
    WrongPlaceholder { start: u64 },
    /// Same instruction boundaries, different bytes.
    Malformed { start: u64 },
    Absent,
}

impl MatchOutcome {
    fn rank(&self) -> u8 {
        match self {
            MatchOutcome::Exact(_) => 3,
            MatchOutcome::WrongPlaceholder { .. } => 2,
            MatchOutcome::Malformed { .. } => 1,
            MatchOutcome::Absent => 0,
        }
    }
}

struct ImageResolver {
    exit: Option<i64>,
    cfi: Option<i64>,
    ssa: Option<i64>,
    ssa_page: u64,
}

impl SymbolResolver for ImageResolver {
    fn branch_target(&self, name: &str) -> Option<i64> {
        match name {
            EXIT_LABEL => self.exit,
            CFI_CHECK => self.cfi,
            SSA_CHECK => self.ssa,
            _ => None,
        }
    }

    fn absolute(&self, name: &str) -> Option<u64> {
        (name == SSA_PAGE).then_some(self.ssa_page)
    }
}

fn stmts(instrs: Vec<Instruction>) -> Vec<Stmt> {
    templates::as_stmts(instrs)
}

struct Matcher<'a> {
    img: &'a LoadedImage,
    resolver: ImageResolver,
}

impl Matcher<'_> {
    fn code(&self) -> &[u8] {
        &self.img.bytes
    }

    fn instantiate(&self, stmts: &[Stmt], origin: u64) -> Option<Instantiated> {
        instantiate(stmts, origin, &self.resolver).ok()
    }

    fn template_len(&self, stmts: &[Stmt]) -> Option<u64> {
        self.instantiate(stmts, 0).map(|i| i.bytes.len() as u64)
    }

    /// Compares `stmts` placed at `start` with the image.
    fn compare(&self, kind: GuardKind, stmts: &[Stmt], start: u64, guarded: Option<u64>) -> MatchOutcome {
        let Some(expected) = self.instantiate(stmts, start) else {
            return MatchOutcome::Absent;
        };
        let len = expected.bytes.len();
        let Some(actual) = start
            .checked_add(len as u64)
            .and_then(|end| self.code().get(start as usize..end as usize))
        else {
            return MatchOutcome::Absent;
        };
        if actual == expected.bytes.as_slice() {
            return MatchOutcome::Exact(GuardMatch {
                kind,
                start,
                length: len as u64,
                guarded_instruction: guarded,
                immediate_slots: expected.slots.iter().map(|(o, f)| (start + *o as u64, *f)).collect(),
            });
        }
        let in_slot = |i: usize| expected.slots.iter().any(|(o, _)| i >= *o && i < o + 8);
        if (0..len).all(|i| actual[i] == expected.bytes[i] || in_slot(i)) {
            return MatchOutcome::WrongPlaceholder { start };
        }
        let mut at = start;
        for window in expected.boundaries.windows(2).map(|w| w[1] - w[0]).chain(std::iter::once(
            len - expected.boundaries.last().copied().unwrap_or(0),
        )) {
            match decode_instruction(self.code(), at) {
                Ok(i) if i.length as usize == window => at = i.end(),
                _ => return MatchOutcome::Absent,
            }
        }
        MatchOutcome::Malformed { start }
    }

    /// Template that must end exactly at `end`.
    fn compare_before(&self, kind: GuardKind, stmts: &[Stmt], end: u64, guarded: Option<u64>) -> MatchOutcome {
        match self.template_len(stmts).and_then(|len| end.checked_sub(len)) {
            Some(start) => self.compare(kind, stmts, start, guarded),
            None => MatchOutcome::Absent,
        }
    }

    /// Best outcome over the StoreGuard scratch-register variants.
    fn store_guard(&self, store: &Instruction) -> MatchOutcome {
        let Some(dest) = store.memory_write() else {
            return MatchOutcome::Absent;
        };
        let mut best = MatchOutcome::Absent;
        for scratch in [SCRATCH_PRIMARY, SCRATCH_ALTERNATE] {
            if dest.uses(scratch.addr) || dest.uses(scratch.bound) {
                continue;
            }
            let Ok(instrs) = templates::store_guard(dest, scratch) else { continue };
            let outcome = self.compare_before(GuardKind::StoreGuard, &stmts(instrs), store.offset, Some(store.offset));
            if outcome.rank() > best.rank() {
                best = outcome;
            }
        }
        best
    }
}

/// Public entry to template matching at a known guard start.
///
/// `subject` is the guarded instruction for StoreGuard and CfiGuard, whose
/// templates depend on its operand.
pub fn match_guard(img: &LoadedImage, start: u64, kind: GuardKind, subject: Option<&Instruction>) -> MatchOutcome {
    let matcher = Matcher { img, resolver: resolver_for(img) };
    let instrs = match (kind, subject) {
        (GuardKind::StoreGuard, Some(s)) => {
            let Some(dest) = s.memory_write() else { return MatchOutcome::Absent };
            let mut best = MatchOutcome::Absent;
            for scratch in [SCRATCH_PRIMARY, SCRATCH_ALTERNATE] {
                if let Ok(t) = templates::store_guard(dest, scratch) {
                    let o = matcher.compare(kind, &stmts(t), start, Some(s.offset));
                    if o.rank() > best.rank() {
                        best = o;
                    }
                }
            }
            return best;
        }
        (GuardKind::CfiGuard, Some(s)) => templates::cfi_guard(&s.operands[0]),
        (GuardKind::RspGuard, _) => templates::rsp_guard(),
        (GuardKind::ShadowProlog, _) => templates::shadow_prolog(),
        (GuardKind::ShadowEpilog, _) => templates::shadow_epilog(),
        (GuardKind::SsaCheck, _) => templates::ssa_check_call(),
        (GuardKind::ExitStub, _) => {
            return matcher.compare(kind, &templates::exit_stub(), start, None);
        }
        _ => return MatchOutcome::Absent,
    };
    matcher.compare(kind, &stmts(instrs), start, subject.map(|s| s.offset))
}

fn resolver_for(img: &LoadedImage) -> ImageResolver {
    let off = |name: &str| img.symbol_offset(name).map(|o| o as i64);
    ImageResolver { exit: off(EXIT_LABEL), cfi: off(CFI_CHECK), ssa: off(SSA_CHECK), ssa_page: img.layout.ssa.base }
}

/// Instructions reached from the entry point and the listed targets.
#[derive(Debug, Clone, Default)]
pub struct ControlFlowMap {
    pub instructions: BTreeMap<u64, Instruction>,
    /// (source offset, target offset) for every in-image successor edge.
    pub edges: Vec<(u64, u64)>,
    pub roots: Vec<u64>,
    pub violations: Vec<Violation>,
    pub decode_attempts: usize,
}

/// Worklist traversal; `opaque` offsets (verified runtime routines) are
/// reached but not decoded.
pub fn disassemble_reachable(img: &LoadedImage, opaque: &BTreeSet<u64>) -> ControlFlowMap {
    let len = img.bytes.len() as u64;
    let mut map = ControlFlowMap::default();
    let mut roots: Vec<u64> = Vec::new();
    let mut work: Vec<u64> = Vec::new();
    for addr in std::iter::once(img.entry).chain(img.resolved_targets.iter().copied()) {
        match img.offset_of(addr) {
            Some(o) => {
                roots.push(o);
                work.push(o);
            }
            None => map.violations.push(Violation { offset: addr.wrapping_sub(img.base), kind: ViolationKind::ExternalTarget }),
        }
    }
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    while let Some(off) = work.pop() {
        if opaque.contains(&off) || !seen.insert(off) {
            continue;
        }
        map.decode_attempts += 1;
        let instr = match decode_instruction(&img.bytes, off) {
            Ok(i) => i,
            Err(_) => {
                map.violations.push(Violation { offset: off, kind: ViolationKind::UndecodableInstruction });
                continue;
            }
        };
        let mut successors = Vec::with_capacity(2);
        if !instr.ends_flow() {
            successors.push(instr.end() as i64);
        }
        if let Some(t) = instr.direct_target() {
            successors.push(t);
        }
        for t in successors {
            if t >= 0 && (t as u64) < len {
                map.edges.push((off, t as u64));
                work.push(t as u64);
            } else if img.gateway_stub(img.base.wrapping_add(t as u64)).is_none() {
                let kind = if t as u64 == len && !instr.ends_flow() && instr.direct_target() != Some(t) {
                    ViolationKind::UndecodableInstruction
                } else {
                    ViolationKind::ExternalTarget
                };
                map.violations.push(Violation { offset: off, kind });
            }
        }
        map.instructions.insert(off, instr);
    }
    roots.sort_unstable();
    roots.dedup();
    map.roots = roots;
    map
}

/// Half-open byte range a guard protects, with its guarded instruction.
#[derive(Debug, Clone, Copy)]
struct Span {
    lo: u64,
    hi: u64,
}

fn span_of(m: &GuardMatch, instrs: &BTreeMap<u64, Instruction>) -> Span {
    let end = m.start + m.length;
    match m.guarded_instruction.and_then(|g| instrs.get(&g)) {
        Some(g) if g.offset >= end => Span { lo: m.start, hi: g.end() },
        Some(g) => Span { lo: g.offset.min(m.start), hi: end.max(g.end()) },
        None => Span { lo: m.start, hi: end },
    }
}

fn record(
    outcome: MatchOutcome,
    missing: Violation,
    matches: &mut Vec<GuardMatch>,
    violations: &mut Vec<Violation>,
) -> Option<u64> {
    match outcome {
        MatchOutcome::Exact(m) => {
            let end = m.start + m.length;
            matches.push(m);
            Some(end)
        }
        MatchOutcome::WrongPlaceholder { start } => {
            violations.push(Violation { offset: start, kind: ViolationKind::WrongPlaceholder });
            None
        }
        MatchOutcome::Malformed { start } => {
            violations.push(Violation { offset: start, kind: ViolationKind::MalformedGuard });
            None
        }
        MatchOutcome::Absent => {
            violations.push(missing);
            None
        }
    }
}

pub fn verify(img: &LoadedImage, manifest: &PolicyManifest) -> VerificationReport {
    let policies = manifest.policies;
    let p5 = policies.contains(Policy::P5);
    let p6 = policies.contains(Policy::P6);
    let p2 = policies.contains(Policy::P2);
    let matcher = Matcher { img, resolver: resolver_for(img) };
    let mut violations: Vec<Violation> = Vec::new();
    let mut matches: Vec<GuardMatch> = Vec::new();
    let mut routines: Vec<RoutineMatch> = Vec::new();

    // Runtime support, byte-exact at its symbol.
    let required: Vec<(&'static str, Vec<Stmt>)> = [
        (!policies.is_empty(), EXIT_LABEL, templates::exit_stub()),
        (p5, CFI_CHECK, templates::cfi_check_routine()),
        (p6, SSA_CHECK, templates::ssa_check_routine(manifest.aex_threshold)),
    ]
    .into_iter()
    .filter(|(needed, ..)| *needed)
    .map(|(_, name, body)| (name, body))
    .collect();
    for (name, body) in &required {
        let Some(start) = img.symbol_offset(name) else {
            violations.push(Violation { offset: 0, kind: ViolationKind::MissingGuard });
            continue;
        };
        match matcher.compare(GuardKind::ExitStub, body, start, None) {
            MatchOutcome::Exact(m) => routines.push(RoutineMatch {
                name,
                start,
                length: m.length,
                immediate_slots: m.immediate_slots,
            }),
            MatchOutcome::WrongPlaceholder { .. } => {
                violations.push(Violation { offset: start, kind: ViolationKind::WrongPlaceholder })
            }
            _ => violations.push(Violation { offset: start, kind: ViolationKind::MalformedGuard }),
        }
    }
    let opaque: BTreeSet<u64> = routines.iter().map(|r| r.start).collect();
    let ssa_routine = routines.iter().find(|r| r.name == SSA_CHECK).map(|r| r.start);

    let cfg = disassemble_reachable(img, &opaque);
    violations.extend(cfg.violations.iter().copied());
    let instrs = &cfg.instructions;

    // Every `call ssa_check` is an annotation in its own right.
    if let Some(ssa) = ssa_routine {
        for i in instrs.values() {
            if i.mnemonic == Mnemonic::Call && i.direct_target() == Some(ssa as i64) {
                matches.push(GuardMatch {
                    kind: GuardKind::SsaCheck,
                    start: i.offset,
                    length: i.length as u64,
                    guarded_instruction: None,
                    immediate_slots: Vec::new(),
                });
            }
        }
    }
    let ssa_starts: BTreeSet<u64> = matches.iter().map(|m| m.start).collect();


    // Function entries: [call ssa_check] [ShadowProlog] [RspGuard at program entry].
    let entry_off = img.offset_of(img.entry);
    let mut entries: BTreeSet<u64> = cfg.roots.iter().copied().collect();
    for i in instrs.values() {
        if let (Mnemonic::Call, Some(t)) = (i.mnemonic, i.direct_target()) {
            if t >= 0 && (t as u64) < img.bytes.len() as u64 && !opaque.contains(&(t as u64)) {
                entries.insert(t as u64);
            }
        }
    }
    for &e in &entries {
        let mut pos = e;
        if p6 {
            if ssa_starts.contains(&pos) {
                pos += instrs[&pos].length as u64;
            } else {
                violations.push(Violation { offset: e, kind: ViolationKind::MissingSsaCheck });
            }
        }
        if p5 {
            let outcome = matcher.compare(GuardKind::ShadowProlog, &stmts(templates::shadow_prolog()), pos, None);
            let missing = Violation { offset: pos, kind: ViolationKind::MissingGuard };
            if let Some(end) = record(outcome, missing, &mut matches, &mut violations) {
                pos = end;
            }
        }
        if p2 && Some(e) == entry_off {
            let outcome = matcher.compare(GuardKind::RspGuard, &stmts(templates::rsp_guard()), pos, None);
            record(outcome, Violation { offset: pos, kind: ViolationKind::MissingGuard }, &mut matches, &mut violations);
        }
    }

    let covered = |matches: &[GuardMatch], off: u64| {
        matches.iter().any(|m| off >= m.start && off < m.start + m.length)
    };

    if p5 {
        for i in instrs.values() {
            if i.mnemonic == Mnemonic::Ret && !covered(&matches, i.offset) {
                let outcome =
                    matcher.compare_before(GuardKind::ShadowEpilog, &stmts(templates::shadow_epilog()), i.offset, Some(i.offset));
                record(outcome, Violation { offset: i.offset, kind: ViolationKind::MissingEpilog }, &mut matches, &mut violations);
            }
        }
        for i in instrs.values() {
            if !i.is_indirect_branch() || covered(&matches, i.offset) {
                continue;
            }
            let unsafe_operand = match &i.operands[0] {
                Operand::Mem(m) => m.uses(Reg::Rsp) || m.uses(Reg::Rdi),
                _ => false,
            };
            if unsafe_operand {
                violations.push(Violation { offset: i.offset, kind: ViolationKind::UnverifiedIndirect });
                continue;
            }
            let outcome = matcher.compare_before(
                GuardKind::CfiGuard,
                &stmts(templates::cfi_guard(&i.operands[0])),
                i.offset,
                Some(i.offset),
            );
            record(outcome, Violation { offset: i.offset, kind: ViolationKind::UnverifiedIndirect }, &mut matches, &mut violations);
        }
    }

    if policies.guards_stores() {
        for i in instrs.values() {
            if i.memory_write().is_some() && !covered(&matches, i.offset) {
                let outcome = matcher.store_guard(i);
                record(outcome, Violation { offset: i.offset, kind: ViolationKind::MissingGuard }, &mut matches, &mut violations);
            }
        }
    }

    if p2 {
        for i in instrs.values() {
            if i.writes_rsp_explicitly() && !covered(&matches, i.offset) {
                let outcome =
                    matcher.compare(GuardKind::RspGuard, &stmts(templates::rsp_guard()), i.end(), Some(i.offset));
                record(outcome, Violation { offset: i.offset, kind: ViolationKind::MissingGuard }, &mut matches, &mut violations);
            }
        }
    }

    // No flow may enter a guard anywhere but its first instruction.
    let mut spans: Vec<Span> = matches.iter().map(|m| span_of(m, instrs)).collect();
    spans.extend(routines.iter().map(|r| Span { lo: r.start, hi: r.start + r.length }));
    let mut interior: Vec<Option<u32>> = vec![None; img.bytes.len()];
    for (id, s) in spans.iter().enumerate() {
        for o in s.lo + 1..s.hi.min(img.bytes.len() as u64) {
            interior[o as usize] = Some(id as u32);
        }
    }
    for &(from, to) in &cfg.edges {
        if let Some(id) = interior[to as usize] {
            let s = spans[id as usize];
            if !(from >= s.lo && from < s.hi) {
                violations.push(Violation { offset: to, kind: ViolationKind::TargetInsideGuard });
            }
        }
    }
    for &r in &cfg.roots {
        if interior[r as usize].is_some() {
            violations.push(Violation { offset: r, kind: ViolationKind::TargetInsideGuard });
        }
    }

    if p6 {
        // Instructions that belong to annotations rather than the program.
        let guarded: BTreeSet<u64> = matches.iter().filter_map(|m| m.guarded_instruction).collect();
        let annotation = |off: u64| !guarded.contains(&off) && covered(&matches, off);
        let len = img.bytes.len() as u64;
        let mut leaders: BTreeSet<u64> = cfg.roots.iter().copied().collect();
        for i in instrs.values() {
            if annotation(i.offset) || !i.is_control_transfer() {
                continue;
            }
            if let Some(t) = i.direct_target().filter(|t| *t >= 0 && (*t as u64) < len) {
                leaders.insert(t as u64);
            }
            if !i.ends_flow() && i.end() < len {
                leaders.insert(i.end());
            }
        }
        leaders.retain(|l| !opaque.contains(l));
        let k = manifest.ssa_stride_k;
        for &leader in &leaders {
            if !instrs.contains_key(&leader) {
                continue;
            }
            if !ssa_starts.contains(&leader) {
                violations.push(Violation { offset: leader, kind: ViolationKind::MissingSsaCheck });
            }
            let mut count = 0u32;
            let mut cur = leader;
            while let Some(i) = instrs.get(&cur) {
                if cur != leader && leaders.contains(&cur) {
                    break;
                }
                if ssa_starts.contains(&cur) {
                    count = 0;
                } else if !annotation(cur) {
                    count += 1;
                    if count > k {
                        violations.push(Violation { offset: cur, kind: ViolationKind::MissingSsaCheck });
                        break;
                    }
                    if i.is_control_transfer() {
                        break;
                    }
                }
                if i.ends_flow() {
                    break;
                }
                cur = i.end();
            }
        }
    }

    violations.sort();
    violations.dedup();
    VerificationReport {
        accepted: violations.is_empty(),
        violations,
        coverage: instrs.keys().copied().collect(),
        matches,
        routines,
        decode_attempts: cfg.decode_attempts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::PolicySet;
    use crate::instrument::build_bundle;
    use crate::loader::{load, EnclaveLayout};

    fn loaded(src: &str, policies: PolicySet) -> LoadedImage {
        let manifest = PolicyManifest::with_policies(policies);
        load(&build_bundle(src, &manifest).unwrap(), &EnclaveLayout::default()).unwrap()
    }

    #[test]
    fn straight_line_coverage() {
        let img = loaded("main:\n nop\n nop\n add rax, 1\n nop\n ret\n", PolicySet::default());
        let r = verify(&img, &img.manifest.clone());
        assert!(r.accepted, "{}", r.to_text());
        assert_eq!(r.coverage.len(), 5);
    }

    #[test]
    fn store_guard_match_has_two_slots() {
        let img = loaded("main:\n mov [rdi+8], rax\n ret\n", PolicySet::of(&[Policy::P1]));
        let r = verify(&img, &img.manifest.clone());
        assert!(r.accepted, "{}", r.to_text());
        let m: Vec<_> = r.matches.iter().filter(|m| m.kind == GuardKind::StoreGuard).collect();
        assert_eq!(m.len(), 1);
        let fields: Vec<_> = m[0].immediate_slots.iter().map(|s| s.1).collect();
        assert_eq!(fields, vec![PlaceholderField::UpperDataBound, PlaceholderField::LowerDataBound]);
    }

    #[test]
    fn undecodable_escape_reported() {
        let mut img = loaded("main:\n nop\n nop\n ret\n", PolicySet::default());
        img.bytes[1] = 0x0F;
        img.bytes[2] = 0x0B;
        let r = verify(&img, &img.manifest.clone());
        assert_eq!(r.violations, vec![Violation { offset: 1, kind: ViolationKind::UndecodableInstruction }]);
    }

    #[test]
    fn every_policy_accepts_producer_output() {
        let src = "main:\n sub rsp, 16\n mov [rsp+8], rdi\n movabs rax, f\n call rax\n add rsp, 16\n ret\nf:\n mov [rdi], rax\n ret\n";
        let img = loaded(src, PolicySet::up_to(Policy::P6));
        let r = verify(&img, &img.manifest.clone());
        assert!(r.accepted, "{}", r.to_text());
        assert!(r.decode_attempts <= 10 * img.bytes.len());
    }

    #[test]
    fn report_text_format() {
        let r = VerificationReport {
            violations: vec![Violation { offset: 0x1a, kind: ViolationKind::MissingGuard }],
            ..Default::default()
        };
        assert_eq!(r.to_text(), "0x1a MissingGuard\n");
    }
}
