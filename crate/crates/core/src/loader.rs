//! Simulated-enclave layout, relocation, and placeholder rewriting.

use std::collections::BTreeMap;

use serde::Deserialize;
use thiserror::Error;

use crate::bundle::{CodeProofBundle, PlaceholderField, PolicyManifest, RelocKind};
use crate::isa::decode_instruction;
use crate::templates::{OCALL_RECV, OCALL_SEND, SSA_PAGE};
use crate::verifier::VerificationReport;

pub const PAGE: u64 = 0x1000;
pub const MIB: u64 = 1 << 20;
pub const DEFAULT_BASE: u64 = 0x1000_0000;
pub const DEFAULT_LOADER_HEAP: u64 = 0x27000;

/// Offsets of the host-call stubs inside the gateway page.
pub const SEND_STUB_OFFSET: u64 = 0x00;
pub const RECV_STUB_OFFSET: u64 = 0x10;
pub const HOST_RETURN_OFFSET: u64 = 0x20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("regions `{0}` and `{1}` overlap")]
    RegionsOverlap(&'static str, &'static str),
    #[error("`{0}` is not a multiple of the page size")]
    SizeNotPageAligned(&'static str),
    #[error("`{0}` must not be empty")]
    EmptyRegion(&'static str),
    #[error("layout does not fit the address space")]
    AddressOverflow,
    #[error("invalid layout config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error("undefined symbol `{0}`")]
    UndefinedSymbol(String),
    #[error("code image of {size} bytes exceeds the {capacity}-byte code region")]
    ImageTooLarge { size: u64, capacity: u64 },
    #[error("relocation at 0x{0:X} does not fit in 32 bits")]
    RelocationOverflow(u64),
    #[error("{0} indirect targets exceed the target table")]
    TargetTableFull(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewriteError {
    #[error("image was not accepted by the verifier")]
    NotVerified,
    #[error("image was already rewritten")]
    AlreadyRewritten,
    #[error("placeholder {field} at 0x{offset:X} lies outside a verified immediate slot")]
    PlaceholderOutsideGuard { offset: u64, field: PlaceholderField },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub base: u64,
    pub size: u64,
}

impl Region {
    pub const fn new(base: u64, size: u64) -> Region {
        Region { base, size }
    }

    pub const fn end(&self) -> u64 {
        self.base + self.size
    }

    pub const fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.base + self.size
    }

    pub fn contains_range(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|e| e <= self.end())
    }

    fn overlaps(&self, other: &Region) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

/// Region sizes and optional fixed bases, read from a key-value file.
///
/// Regions without an explicit base are packed upward from `base` in the
/// order code, data, stack, shadow, target table, SSA, loader heap, gateway,
/// with a guard page before and after the stack and after the shadow stack.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub base: u64,
    pub code_size: u64,
    pub data_size: u64,
    pub stack_size: u64,
    pub shadow_size: u64,
    pub target_table_size: u64,
    pub loader_heap_size: u64,
    pub code_base: Option<u64>,
    pub data_base: Option<u64>,
    pub stack_base: Option<u64>,
    pub shadow_base: Option<u64>,
    pub target_table_base: Option<u64>,
    pub ssa_base: Option<u64>,
    pub loader_heap_base: Option<u64>,
    pub gateway_base: Option<u64>,
}

impl Default for LayoutConfig {
    fn default() -> LayoutConfig {
        LayoutConfig {
            base: DEFAULT_BASE,
            code_size: 32 * MIB,
            data_size: 32 * MIB,
            stack_size: 4 * MIB,
            shadow_size: 4 * MIB,
            target_table_size: 4 * MIB,
            loader_heap_size: DEFAULT_LOADER_HEAP,
            code_base: None,
            data_base: None,
            stack_base: None,
            shadow_base: None,
            target_table_base: None,
            ssa_base: None,
            loader_heap_base: None,
            gateway_base: None,
        }
    }
}

impl LayoutConfig {
    pub fn from_toml(text: &str) -> Result<LayoutConfig, LayoutError> {
        toml::from_str(text).map_err(|e| LayoutError::Config(e.message().to_string()))
    }

    /// Canonical text used in the enclave measurement.
    pub fn canonical_text(&self) -> String {
        format!("{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveLayout {
    pub elrange: Region,
    pub code: Region,
    pub data: Region,
    pub stack_guard_low: Region,
    pub stack: Region,
    pub stack_guard_high: Region,
    pub shadow: Region,
    pub target_table: Region,
    pub ssa: Region,
    pub loader_heap: Region,
    pub gateway: Region,
    pub config: LayoutConfig,
}

impl EnclaveLayout {
    /// Range untrusted stores may target: data region through stack top.
    pub fn writable_window(&self) -> Region {
        Region::new(self.data.base, self.stack.end() - self.data.base)
    }

    pub fn named_regions(&self) -> [(&'static str, Region); 10] {
        [
            ("code", self.code),
            ("data", self.data),
            ("stack_guard_low", self.stack_guard_low),
            ("stack", self.stack),
            ("stack_guard_high", self.stack_guard_high),
            ("shadow", self.shadow),
            ("target_table", self.target_table),
            ("ssa", self.ssa),
            ("loader_heap", self.loader_heap),
            ("gateway", self.gateway),
        ]
    }

    pub fn send_stub(&self) -> u64 {
        self.gateway.base + SEND_STUB_OFFSET
    }

    pub fn recv_stub(&self) -> u64 {
        self.gateway.base + RECV_STUB_OFFSET
    }

    pub fn host_return(&self) -> u64 {
        self.gateway.base + HOST_RETURN_OFFSET
    }
}

impl Default for EnclaveLayout {
    fn default() -> EnclaveLayout {
        build_layout(&LayoutConfig::default()).expect("default layout is valid")
    }
}

pub fn build_layout(config: &LayoutConfig) -> Result<EnclaveLayout, LayoutError> {
    let sizes = [
        ("base", config.base),
        ("code_size", config.code_size),
        ("data_size", config.data_size),
        ("stack_size", config.stack_size),
        ("shadow_size", config.shadow_size),
        ("target_table_size", config.target_table_size),
        ("loader_heap_size", config.loader_heap_size),
    ];
    for (name, v) in sizes {
        if v % PAGE != 0 {
            return Err(LayoutError::SizeNotPageAligned(name));
        }
        if v == 0 && name != "base" {
            return Err(LayoutError::EmptyRegion(name));
        }
    }
    let bases = [
        ("code_base", config.code_base),
        ("data_base", config.data_base),
        ("stack_base", config.stack_base),
        ("shadow_base", config.shadow_base),
        ("target_table_base", config.target_table_base),
        ("ssa_base", config.ssa_base),
        ("loader_heap_base", config.loader_heap_base),
        ("gateway_base", config.gateway_base),
    ];
    for (name, b) in bases {
        if b.is_some_and(|b| b % PAGE != 0) {
            return Err(LayoutError::SizeNotPageAligned(name));
        }
    }

    let mut cursor = config.base;
    let mut place = |fixed: Option<u64>, size: u64, gap_before: u64, gap_after: u64| -> Result<Region, LayoutError> {
        let base = match fixed {
            Some(b) => b,
            None => cursor.checked_add(gap_before).ok_or(LayoutError::AddressOverflow)?,
        };
        let end = base.checked_add(size).ok_or(LayoutError::AddressOverflow)?;
        cursor = end.checked_add(gap_after).ok_or(LayoutError::AddressOverflow)?.max(cursor);
        Ok(Region::new(base, size))
    };
    let code = place(config.code_base, config.code_size, 0, 0)?;
    let data = place(config.data_base, config.data_size, 0, 0)?;
    let stack = place(config.stack_base, config.stack_size, PAGE, PAGE)?;
    let shadow = place(config.shadow_base, config.shadow_size, 0, PAGE)?;
    let target_table = place(config.target_table_base, config.target_table_size, 0, 0)?;
    let ssa = place(config.ssa_base, PAGE, 0, 0)?;
    let loader_heap = place(config.loader_heap_base, config.loader_heap_size, 0, 0)?;
    let gateway = place(config.gateway_base, PAGE, 0, 0)?;
    let stack_guard_low = Region::new(stack.base.checked_sub(PAGE).ok_or(LayoutError::AddressOverflow)?, PAGE);
    let stack_guard_high = Region::new(stack.end(), PAGE);
    if stack.end().checked_add(PAGE).is_none() {
        return Err(LayoutError::AddressOverflow);
    }

    let lo = [code, data, stack_guard_low, shadow, target_table, ssa, loader_heap, gateway]
        .iter()
        .map(|r| r.base)
        .min()
        .expect("non-empty");
    let hi = [code, data, stack_guard_high, shadow, target_table, ssa, loader_heap, gateway]
        .iter()
        .map(|r| r.end())
        .max()
        .expect("non-empty");
    let layout = EnclaveLayout {
        elrange: Region::new(lo, hi - lo),
        code,
        data,
        stack_guard_low,
        stack,
        stack_guard_high,
        shadow,
        target_table,
        ssa,
        loader_heap,
        gateway,
        config: config.clone(),
    };
    let regions = layout.named_regions();
    for (i, (a, ra)) in regions.iter().enumerate() {
        for (b, rb) in &regions[i + 1..] {
            if ra.overlaps(rb) {
                return Err(LayoutError::RegionsOverlap(a, b));
            }
        }
    }
    // Shadow, target table, SSA and loader heap must stay outside the
    // writable window even when placed explicitly.
    let window = layout.writable_window();
    for (name, r) in regions {
        if !matches!(name, "data" | "stack" | "stack_guard_low") && r.overlaps(&window) {
            return Err(LayoutError::RegionsOverlap("writable window", name));
        }
    }
    Ok(layout)
}

/// A bundle placed at the code-region base with relocations applied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedImage {
    pub bytes: Vec<u8>,
    pub base: u64,
    pub entry: u64,
    pub resolved_targets: Vec<u64>,
    pub layout: EnclaveLayout,
    pub rewritten: bool,
    pub manifest: PolicyManifest,
    /// Defined symbols → absolute address.
    pub symbols: BTreeMap<String, u64>,
    /// Code ranges whose stores are trusted, filled in by rewriting.
    pub trusted: Vec<TrustedRange>,
}

/// Which privileged region a trusted code range may write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrustedRole {
    ShadowStack,
    SsaPage,
    /// Guard or runtime code that writes only the ordinary stack.
    Stack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrustedRange {
    pub start: u64,
    pub end: u64,
    pub role: TrustedRole,
}

impl LoadedImage {
    pub fn code_end(&self) -> u64 {
        self.base + self.bytes.len() as u64
    }

    /// Absolute address → image offset, if inside the loaded code.
    pub fn offset_of(&self, addr: u64) -> Option<u64> {
        (addr >= self.base && addr < self.code_end()).then(|| addr - self.base)
    }

    pub fn symbol_offset(&self, name: &str) -> Option<u64> {
        self.symbols.get(name).and_then(|a| self.offset_of(*a).or((*a == self.code_end()).then(|| a - self.base)))
    }

    /// Name of the host-call stub at `addr`, if any.
    pub fn gateway_stub(&self, addr: u64) -> Option<&'static str> {
        if addr == self.layout.send_stub() {
            Some(OCALL_SEND)
        } else if addr == self.layout.recv_stub() {
            Some(OCALL_RECV)
        } else {
            None
        }
    }

    /// Value the rewriter substitutes for each placeholder.
    pub fn placeholder_binding(&self, field: PlaceholderField) -> u64 {
        let l = &self.layout;
        match field {
            PlaceholderField::UpperDataBound => l.writable_window().end() - 8,
            PlaceholderField::LowerDataBound => l.writable_window().base,
            PlaceholderField::UpperStackBound => l.stack.end(),
            PlaceholderField::LowerStackBound => l.stack.base,
            PlaceholderField::UpperCodeBound => self.code_end().saturating_sub(1).max(self.base),
            PlaceholderField::LowerCodeBound => self.base,
            PlaceholderField::BranchTargetCount => self.resolved_targets.len() as u64,
            PlaceholderField::BranchTargetList => l.target_table.base,
            PlaceholderField::ShadowStackBase => l.shadow.base,
        }
    }

    /// Contents of the target table: count, then sorted addresses.
    pub fn target_table_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (self.resolved_targets.len() + 1));
        out.extend_from_slice(&(self.resolved_targets.len() as u64).to_le_bytes());
        for t in &self.resolved_targets {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }
}

/// Resolves an undefined symbol to the address the enclave provides.
fn external_address(name: &str, layout: &EnclaveLayout) -> Option<u64> {
    match name {
        OCALL_SEND => Some(layout.send_stub()),
        OCALL_RECV => Some(layout.recv_stub()),
        SSA_PAGE => Some(layout.ssa.base),
        _ => None,
    }
}

pub fn load(bundle: &CodeProofBundle, layout: &EnclaveLayout) -> Result<LoadedImage, LoadError> {
    let size = bundle.code.len() as u64;
    if size > layout.code.size {
        return Err(LoadError::ImageTooLarge { size, capacity: layout.code.size });
    }
    let base = layout.code.base;
    let mut addresses = Vec::with_capacity(bundle.symbols.len());
    let mut symbols = BTreeMap::new();
    for s in &bundle.symbols {
        let addr = if s.defined {
            symbols.insert(s.name.clone(), base + s.value);
            base + s.value
        } else {
            external_address(&s.name, layout).ok_or_else(|| LoadError::UndefinedSymbol(s.name.clone()))?
        };
        addresses.push(addr);
    }
    let mut bytes = bundle.code.clone();
    for r in &bundle.relocations {
        let target = addresses[r.symbol_index as usize].wrapping_add(r.addend as u64);
        let at = r.offset as usize;
        match r.kind {
            RelocKind::Abs64 => bytes[at..at + 8].copy_from_slice(&target.to_le_bytes()),
            RelocKind::Rel32 => {
                let place = base + r.offset;
                let disp = target.wrapping_sub(place) as i64;
                let disp = i32::try_from(disp).map_err(|_| LoadError::RelocationOverflow(r.offset))?;
                bytes[at..at + 4].copy_from_slice(&disp.to_le_bytes());
            }
        }
    }
    let mut resolved_targets: Vec<u64> = bundle.indirect_targets.iter().map(|t| symbols[t.as_str()]).collect();
    resolved_targets.sort_unstable();
    resolved_targets.dedup();
    if 8 * (resolved_targets.len() as u64 + 1) > layout.target_table.size {
        return Err(LoadError::TargetTableFull(resolved_targets.len()));
    }
    let entry = symbols
        .get(&bundle.entry_symbol)
        .copied()
        .ok_or_else(|| LoadError::UndefinedSymbol(bundle.entry_symbol.clone()))?;
    Ok(LoadedImage {
        bytes,
        base,
        entry,
        resolved_targets,
        layout: layout.clone(),
        rewritten: false,
        manifest: bundle.manifest,
        symbols,
        trusted: Vec::new(),
    })
}

const HLT: u8 = 0xF4;

/// Every offset where one of the nine canonical constants appears.
pub fn scan_placeholders(bytes: &[u8]) -> Vec<(u64, PlaceholderField)> {
    if bytes.len() < 8 {
        return Vec::new();
    }
    (0..=bytes.len() - 8)
        .filter_map(|i| {
            let v = u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
            PlaceholderField::from_value(v).map(|f| (i as u64, f))
        })
        .collect()
}

/// Replaces the placeholder slots the verifier located with real bounds.
///
/// Canonical constants left in bytes the verifier never reached are
/// overwritten with `hlt`.
pub fn rewrite_immediates(img: &LoadedImage, report: &VerificationReport) -> Result<LoadedImage, RewriteError> {
    if img.rewritten {
        return Err(RewriteError::AlreadyRewritten);
    }
    if !report.accepted {
        return Err(RewriteError::NotVerified);
    }
    let mut out = img.clone();
    for (offset, field) in report.immediate_slots() {
        let at = offset as usize;
        let current = out.bytes.get(at..at + 8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")));
        if current != Some(field.value()) {
            return Err(RewriteError::PlaceholderOutsideGuard { offset, field });
        }
        out.bytes[at..at + 8].copy_from_slice(&img.placeholder_binding(field).to_le_bytes());
    }
    let mut covered = vec![false; img.bytes.len()];
    for &start in &report.coverage {
        let len = decode_instruction(&img.bytes, start).map_or(1, |i| i.length as usize);
        let s = start as usize;
        covered[s..(s + len).min(img.bytes.len())].fill(true);
    }
    for (offset, field) in scan_placeholders(&out.bytes) {
        let at = offset as usize;
        // stray constants in verified code are an error; unreachable ones are neutralized
        if covered[at..at + 8].iter().any(|c| *c) {
            return Err(RewriteError::PlaceholderOutsideGuard { offset, field });
        }
        out.bytes[at..at + 8].fill(HLT);
    }
    if let Some(&(offset, field)) = scan_placeholders(&out.bytes).first() {
        return Err(RewriteError::PlaceholderOutsideGuard { offset, field });
    }
    out.trusted = report.trusted_ranges(img.base);
    out.rewritten = true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{Relocation, Symbol};

    #[test]
    fn default_layout_sizes() {
        let l = EnclaveLayout::default();
        assert_eq!(l.stack.size, 4 * 1024 * 1024);
        assert_eq!(l.loader_heap.size, 0x27000);
        assert_eq!(l.shadow.size, 4 * MIB);
        assert_eq!(l.target_table.size, 4 * MIB);
        assert_eq!(l.code.size + l.data.size, 64 * MIB);
        assert_eq!(l.stack_guard_low.end(), l.stack.base);
        assert_eq!(l.stack_guard_high.base, l.stack.end());
        let w = l.writable_window();
        for r in [l.shadow, l.target_table, l.code, l.ssa, l.loader_heap] {
            assert!(!r.overlaps(&w));
        }
        assert!(l.named_regions().iter().all(|(_, r)| l.elrange.contains_range(r.base, r.size)));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let cfg = LayoutConfig { shadow_base: Some(DEFAULT_BASE), ..LayoutConfig::default() };
        assert!(matches!(build_layout(&cfg), Err(LayoutError::RegionsOverlap(..))));
        let cfg = LayoutConfig { stack_size: 4 * MIB + 1, ..LayoutConfig::default() };
        assert_eq!(build_layout(&cfg), Err(LayoutError::SizeNotPageAligned("stack_size")));
    }

    #[test]
    fn config_from_toml() {
        let cfg = LayoutConfig::from_toml("code_size = 0x100000\ndata_size = 0x200000\n").unwrap();
        let l = build_layout(&cfg).unwrap();
        assert_eq!(l.code.size, 0x10_0000);
        assert_eq!(l.data.base, l.code.end());
        assert!(LayoutConfig::from_toml("bogus = 1").is_err());
    }

    fn bundle_with(code: Vec<u8>, relocs: Vec<Relocation>, symbols: Vec<Symbol>, targets: Vec<&str>) -> CodeProofBundle {
        CodeProofBundle::new(
            code,
            relocs,
            symbols,
            targets.into_iter().map(String::from).collect(),
            PolicyManifest::default(),
            "main".into(),
        )
        .unwrap()
    }

    #[test]
    fn abs64_relocation_arithmetic() {
        let cfg = LayoutConfig { base: 0x10000, code_size: 0x10000, ..LayoutConfig::default() };
        let layout = build_layout(&cfg).unwrap();
        let symbols = vec![
            Symbol { name: "main".into(), defined: true, value: 0 },
            Symbol { name: "f".into(), defined: true, value: 0x40 },
        ];
        let relocs = vec![Relocation { offset: 8, symbol_index: 1, kind: RelocKind::Abs64, addend: 0 }];
        let img = load(&bundle_with(vec![0; 0x48], relocs, symbols, vec![]), &layout).unwrap();
        assert_eq!(u64::from_le_bytes(img.bytes[8..16].try_into().unwrap()), 0x10040);
        assert!(!img.rewritten);
    }

    #[test]
    fn targets_sorted_by_address() {
        let symbols = vec![
            Symbol { name: "main".into(), defined: true, value: 0 },
            Symbol { name: "f".into(), defined: true, value: 0x20 },
            Symbol { name: "g".into(), defined: true, value: 0x10 },
        ];
        let img = load(&bundle_with(vec![0x90; 0x30], vec![], symbols, vec!["f", "g"]), &EnclaveLayout::default()).unwrap();
        assert_eq!(img.resolved_targets, vec![img.base + 0x10, img.base + 0x20]);
    }

    #[test]
    fn unknown_external_rejected() {
        let symbols = vec![
            Symbol { name: "main".into(), defined: true, value: 0 },
            Symbol { name: "system".into(), defined: false, value: 0 },
        ];
        let relocs = vec![Relocation { offset: 1, symbol_index: 1, kind: RelocKind::Rel32, addend: -4 }];
        let err = load(&bundle_with(vec![0xE8, 0, 0, 0, 0], relocs, symbols, vec![]), &EnclaveLayout::default());
        assert_eq!(err, Err(LoadError::UndefinedSymbol("system".into())));
    }

    #[test]
    fn oversized_image_rejected() {
        let cfg = LayoutConfig { code_size: PAGE, ..LayoutConfig::default() };
        let layout = build_layout(&cfg).unwrap();
        let symbols = vec![Symbol { name: "main".into(), defined: true, value: 0 }];
        let err = load(&bundle_with(vec![0x90; PAGE as usize + 1], vec![], symbols, vec![]), &layout);
        assert!(matches!(err, Err(LoadError::ImageTooLarge { .. })));
    }

    #[test]
    fn scan_finds_unaligned_constants() {
        let mut bytes = vec![0u8; 3];
        bytes.extend_from_slice(&PlaceholderField::ShadowStackBase.value().to_le_bytes());
        assert_eq!(scan_placeholders(&bytes), vec![(3, PlaceholderField::ShadowStackBase)]);
        assert!(scan_placeholders(&[0; 7]).is_empty());
    }

    #[test]
    fn unreachable_placeholders_are_neutralized() {
        use crate::bundle::{Policy, PolicySet};
        use crate::instrument::build_bundle;
        use crate::verifier::verify;
        let m = PolicyManifest::with_policies(PolicySet::of(&[Policy::P1]));
        let layout = EnclaveLayout::default();
        let b = build_bundle("main:\n ret\n mov [rdi], rax\n ret\n", &m).unwrap();
        let img = load(&b, &layout).unwrap();
        let report = verify(&img, &m);
        assert!(report.accepted);
        let out = rewrite_immediates(&img, &report).unwrap();
        assert!(scan_placeholders(&out.bytes).is_empty());
        assert!(out.bytes.windows(8).any(|w| w == [HLT; 8]));

        let b = build_bundle("main:\n movabs rax, 0x3FFFFFFFFFFFFFFF\n ret\n", &m).unwrap();
        let img = load(&b, &layout).unwrap();
        let report = verify(&img, &m);
        assert!(matches!(rewrite_immediates(&img, &report), Err(RewriteError::PlaceholderOutsideGuard { .. })));
    }
}
