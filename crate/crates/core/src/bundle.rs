//! The "code + proof" container exchanged between producer and consumer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CATB" | version: u16 | section count: u16
//! section table: { kind: u8, offset: u64, length: u64 } * count
//! section payloads
//! ```
//!
//! Section kinds: 1 code, 2 relocations, 3 symbols, 4 indirect-target
//! names, 5 manifest, 6 entry symbol. Strings are a `u32` byte length
//! followed by UTF-8.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CATB";
pub const VERSION: u16 = 1;

const SECTION_CODE: u8 = 1;
const SECTION_RELOCATIONS: u8 = 2;
const SECTION_SYMBOLS: u8 = 3;
const SECTION_TARGETS: u8 = 4;
const SECTION_MANIFEST: u8 = 5;
const SECTION_ENTRY: u8 = 6;
const SECTION_ENTRY_SIZE: usize = 17;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BundleError {
    #[error("bad magic {0:02X?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated or out-of-bounds section: {0}")]
    TruncatedSection(String),
    #[error("relocation {reloc} refers to symbol index {index} (only {count} symbols)")]
    DanglingSymbolIndex { reloc: usize, index: u32, count: usize },
    #[error("indirect target `{0}` does not name a defined symbol")]
    UnresolvedIndirectTarget(String),
    #[error("entry symbol `{0}` is not defined")]
    UndefinedEntry(String),
    #[error("duplicate symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("section kind {0} is missing")]
    MissingSection(u8),
    #[error("section kind {0} appears twice")]
    DuplicateSection(u8),
    #[error("unknown section kind {0}")]
    UnknownSection(u8),
    #[error("invalid string encoding")]
    BadString,
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid relocation kind {0}")]
    BadRelocKind(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelocKind {
    Abs64,
    Rel32,
}

impl RelocKind {
    pub fn width(self) -> u64 {
        match self {
            RelocKind::Abs64 => 8,
            RelocKind::Rel32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relocation {
    pub offset: u64,
    pub symbol_index: u32,
    pub kind: RelocKind,
    pub addend: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Symbol {
    pub name: String,
    pub defined: bool,
    /// Offset into the code section; meaningful only when `defined`.
    pub value: u64,
}

/// The enforcement policies a bundle is instrumented for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    /// Explicit memory stores stay inside the writable window.
    P1,
    /// Explicit stack-pointer updates stay inside the stack.
    P2,
    /// Security-critical enclave data is never written.
    P3,
    /// Code pages are never written (software DEP).
    P4,
    /// Forward-edge CFI and a shadow stack.
    P5,
    /// AEX-frequency monitoring through the SSA.
    P6,
}

impl Policy {
    pub const ALL: [Policy; 6] = [Policy::P1, Policy::P2, Policy::P3, Policy::P4, Policy::P5, Policy::P6];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", *self as u8 + 1)
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Policy, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p1" => Ok(Policy::P1),
            "p2" => Ok(Policy::P2),
            "p3" => Ok(Policy::P3),
            "p4" => Ok(Policy::P4),
            "p5" => Ok(Policy::P5),
            "p6" => Ok(Policy::P6),
            other => Err(format!("unknown policy `{}`", other)),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct PolicySet(u8);

impl PolicySet {
    pub const EMPTY: PolicySet = PolicySet(0);

    pub fn of(policies: &[Policy]) -> PolicySet {
        policies.iter().fold(PolicySet::EMPTY, |s, p| s.with(*p))
    }

    /// P1 through `last`, inclusive.
    pub fn up_to(last: Policy) -> PolicySet {
        PolicySet::of(&Policy::ALL[..=last as usize])
    }

    pub fn with(self, p: Policy) -> PolicySet {
        PolicySet(self.0 | p.bit())
    }

    pub fn contains(self, p: Policy) -> bool {
        self.0 & p.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn from_bits(bits: u8) -> Option<PolicySet> {
        (bits & !0x3F == 0).then_some(PolicySet(bits))
    }

    pub fn iter(self) -> impl Iterator<Item = Policy> {
        Policy::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Any of the store-confinement policies (they share one guard).
    pub fn guards_stores(self) -> bool {
        self.contains(Policy::P1) || self.contains(Policy::P3) || self.contains(Policy::P4)
    }
}

impl fmt::Display for PolicySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<String> = self.iter().map(|p| p.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for PolicySet {
    type Err = String;

    fn from_str(s: &str) -> Result<PolicySet, String> {
        let mut set = PolicySet::EMPTY;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if part.eq_ignore_ascii_case("none") {
                continue;
            }
            set = set.with(part.parse()?);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServiceMode {
    /// Confidential computing as a service: the data owner receives results.
    CCaaS,
    /// Confidential data as a service: output to the code provider is rationed.
    CDaaS,
}

impl FromStr for ServiceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<ServiceMode, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ccaas" => Ok(ServiceMode::CCaaS),
            "cdaas" => Ok(ServiceMode::CDaaS),
            other => Err(format!("unknown mode `{}`", other)),
        }
    }
}

impl fmt::Display for ServiceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceMode::CCaaS => "ccaas",
            ServiceMode::CDaaS => "cdaas",
        })
    }
}

pub const DEFAULT_SSA_STRIDE: u32 = 20;
pub const DEFAULT_AEX_THRESHOLD: u32 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyManifest {
    pub policies: PolicySet,
    pub mode: ServiceMode,
    pub pad_length: u32,
    pub max_sends: u32,
    pub max_output_bits: u32,
    pub ssa_stride_k: u32,
    pub aex_threshold: u32,
}

impl Default for PolicyManifest {
    fn default() -> Self {
        PolicyManifest {
            policies: PolicySet::EMPTY,
            mode: ServiceMode::CCaaS,
            pad_length: 256,
            max_sends: 1,
            max_output_bits: 8,
            ssa_stride_k: DEFAULT_SSA_STRIDE,
            aex_threshold: DEFAULT_AEX_THRESHOLD,
        }
    }
}

impl PolicyManifest {
    pub fn with_policies(policies: PolicySet) -> PolicyManifest {
        PolicyManifest { policies, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: &str| Err(BundleError::InvalidManifest(m.to_string()));
        if self.pad_length == 0 {
            return bad("pad_length must be positive");
        }
        if self.mode == ServiceMode::CDaaS && self.max_sends == 0 {
            return bad("CDaaS mode needs max_sends >= 1");
        }
        if self.ssa_stride_k == 0 {
            return bad("ssa_stride_k must be >= 1");
        }
        if self.aex_threshold == 0 {
            return bad("aex_threshold must be >= 1");
        }
        Ok(())
    }
}

/// The nine immediates the loader rewrites after verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlaceholderField {
    UpperDataBound,
    LowerDataBound,
    UpperStackBound,
    LowerStackBound,
    UpperCodeBound,
    LowerCodeBound,
    BranchTargetCount,
    BranchTargetList,
    ShadowStackBase,
}

impl PlaceholderField {
    pub const ALL: [PlaceholderField; 9] = [
        PlaceholderField::UpperDataBound,
        PlaceholderField::LowerDataBound,
        PlaceholderField::UpperStackBound,
        PlaceholderField::LowerStackBound,
        PlaceholderField::UpperCodeBound,
        PlaceholderField::LowerCodeBound,
        PlaceholderField::BranchTargetCount,
        PlaceholderField::BranchTargetList,
        PlaceholderField::ShadowStackBase,
    ];

    /// Canonical 64-bit constant emitted by the producer.
    pub const fn value(self) -> u64 {
        match self {
            PlaceholderField::UpperDataBound => 0x3FFF_FFFF_FFFF_FFFF,
            PlaceholderField::LowerDataBound => 0x4FFF_FFFF_FFFF_FFFF,
            PlaceholderField::UpperStackBound => 0x5FFF_FFFF_FFFF_FFFF,
            PlaceholderField::LowerStackBound => 0x6FFF_FFFF_FFFF_FFFF,
            PlaceholderField::UpperCodeBound => 0x7FFF_FFFF_FFFF_FFFF,
            PlaceholderField::LowerCodeBound => 0x8FFF_FFFF_FFFF_FFFF,
            PlaceholderField::BranchTargetCount => 0x1_FFFF_FFFF,
            PlaceholderField::BranchTargetList => 0x1FFF_FFFF_FFFF_FFFF,
            PlaceholderField::ShadowStackBase => 0x2FFF_FFFF_FFFF_FFFF,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaceholderField::UpperDataBound => "upper_data_bound",
            PlaceholderField::LowerDataBound => "lower_data_bound",
            PlaceholderField::UpperStackBound => "upper_stack_bound",
            PlaceholderField::LowerStackBound => "lower_stack_bound",
            PlaceholderField::UpperCodeBound => "upper_code_bound",
            PlaceholderField::LowerCodeBound => "lower_code_bound",
            PlaceholderField::BranchTargetCount => "branch_target_count",
            PlaceholderField::BranchTargetList => "branch_target_list",
            PlaceholderField::ShadowStackBase => "shadow_stack_base",
        }
    }

    pub fn from_value(value: u64) -> Option<PlaceholderField> {
        PlaceholderField::ALL.into_iter().find(|f| f.value() == value)
    }

    /// Placeholders a linked bundle carries for each selected policy.
    pub fn required_by(policies: PolicySet) -> Vec<PlaceholderField> {
        use PlaceholderField::*;
        let mut out = Vec::new();
        if policies.guards_stores() {
            out.extend([UpperDataBound, LowerDataBound]);
        }
        if policies.contains(Policy::P2) {
            out.extend([UpperStackBound, LowerStackBound]);
        }
        if policies.contains(Policy::P5) {
            out.extend([UpperCodeBound, LowerCodeBound, BranchTargetCount, BranchTargetList, ShadowStackBase]);
        }
        out
    }
}

impl fmt::Display for PlaceholderField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown placeholder field `{0}`")]
pub struct UnknownField(pub String);

impl FromStr for PlaceholderField {
    type Err = UnknownField;

    fn from_str(s: &str) -> Result<PlaceholderField, UnknownField> {
        PlaceholderField::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| UnknownField(s.to_string()))
    }
}

/// Canonical placeholder constant for a field name.
pub fn placeholder_value(field: &str) -> Result<u64, UnknownField> {
    field.parse::<PlaceholderField>().map(PlaceholderField::value)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeProofBundle {
    pub magic: [u8; 4],
    pub version: u16,
    pub code: Vec<u8>,
    pub relocations: Vec<Relocation>,
    pub symbols: Vec<Symbol>,
    pub indirect_targets: Vec<String>,
    pub manifest: PolicyManifest,
    pub entry_symbol: String,
}

impl CodeProofBundle {
    /// Builds a bundle and checks every structural invariant.
    pub fn new(
        code: Vec<u8>,
        relocations: Vec<Relocation>,
        symbols: Vec<Symbol>,
        indirect_targets: Vec<String>,
        manifest: PolicyManifest,
        entry_symbol: String,
    ) -> Result<CodeProofBundle, BundleError> {
        let bundle = CodeProofBundle {
            magic: MAGIC,
            version: VERSION,
            code,
            relocations,
            symbols,
            indirect_targets,
            manifest,
            entry_symbol,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        if self.magic != MAGIC {
            return Err(BundleError::BadMagic(self.magic.to_vec()));
        }
        if self.version != VERSION {
            return Err(BundleError::UnsupportedVersion(self.version));
        }
        let mut names = HashSet::new();
        for s in &self.symbols {
            if !names.insert(s.name.as_str()) {
                return Err(BundleError::DuplicateSymbol(s.name.clone()));
            }
            if s.defined && s.value > self.code.len() as u64 {
                return Err(BundleError::TruncatedSection(format!(
                    "symbol `{}` at 0x{:X} is outside the code section",
                    s.name, s.value
                )));
            }
        }
        for (i, r) in self.relocations.iter().enumerate() {
            if r.symbol_index as usize >= self.symbols.len() {
                return Err(BundleError::DanglingSymbolIndex {
                    reloc: i,
                    index: r.symbol_index,
                    count: self.symbols.len(),
                });
            }
            let end = r.offset.checked_add(r.kind.width());
            if end.is_none_or(|e| e > self.code.len() as u64) {
                return Err(BundleError::TruncatedSection(format!(
                    "relocation {} at 0x{:X} runs past the code section",
                    i, r.offset
                )));
            }
        }
        for t in &self.indirect_targets {
            if !self.symbols.iter().any(|s| s.defined && &s.name == t) {
                return Err(BundleError::UnresolvedIndirectTarget(t.clone()));
            }
        }
        if !self.symbols.iter().any(|s| s.defined && s.name == self.entry_symbol) {
            return Err(BundleError::UndefinedEntry(self.entry_symbol.clone()));
        }
        self.manifest.validate()
    }

    pub fn symbol(&self, name: &str) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.name == name)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

/// Deterministic encoding of a bundle.
pub fn encode_bundle(bundle: &CodeProofBundle) -> Vec<u8> {
    let mut sections: Vec<(u8, Vec<u8>)> = Vec::with_capacity(6);
    sections.push((SECTION_CODE, bundle.code.clone()));

    let mut w = Writer(Vec::new());
    w.u32(bundle.relocations.len() as u32);
    for r in &bundle.relocations {
        w.u64(r.offset);
        w.u32(r.symbol_index);
        w.u8(match r.kind {
            RelocKind::Abs64 => 1,
            RelocKind::Rel32 => 2,
        });
        w.u64(r.addend as u64);
    }
    sections.push((SECTION_RELOCATIONS, w.0));

    let mut w = Writer(Vec::new());
    w.u32(bundle.symbols.len() as u32);
    for s in &bundle.symbols {
        w.str(&s.name);
        w.u8(s.defined as u8);
        w.u64(s.value);
    }
    sections.push((SECTION_SYMBOLS, w.0));

    let mut w = Writer(Vec::new());
    w.u32(bundle.indirect_targets.len() as u32);
    for t in &bundle.indirect_targets {
        w.str(t);
    }
    sections.push((SECTION_TARGETS, w.0));

    let m = &bundle.manifest;
    let mut w = Writer(Vec::new());
    w.u8(m.policies.bits());
    w.u8(match m.mode {
        ServiceMode::CCaaS => 1,
        ServiceMode::CDaaS => 2,
    });
    w.u32(m.pad_length);
    w.u32(m.max_sends);
    w.u32(m.max_output_bits);
    w.u32(m.ssa_stride_k);
    w.u32(m.aex_threshold);
    sections.push((SECTION_MANIFEST, w.0));

    let mut w = Writer(Vec::new());
    w.str(&bundle.entry_symbol);
    sections.push((SECTION_ENTRY, w.0));

    let header_len = 8 + sections.len() * SECTION_ENTRY_SIZE;
    let mut out = Writer(Vec::new());
    out.0.extend_from_slice(&bundle.magic);
    out.u16(bundle.version);
    out.u16(sections.len() as u16);
    let mut offset = header_len as u64;
    for (kind, payload) in &sections {
        out.u8(*kind);
        out.u64(offset);
        out.u64(payload.len() as u64);
        offset += payload.len() as u64;
    }
    for (_, payload) in sections {
        out.0.extend_from_slice(&payload);
    }
    out.0
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], what: &'static str) -> Self {
        Reader { data, pos: 0, what }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.data.len())
            .ok_or_else(|| BundleError::TruncatedSection(self.what.to_string()))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, BundleError> {
        Ok(self.bytes(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, BundleError> {
        let len = self.u32()? as usize;
        let raw = self.bytes(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| BundleError::BadString)
    }

    /// Element count, bounded by what the remaining bytes could hold.
    fn count(&mut self, min_elem: usize) -> Result<usize, BundleError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_elem) > self.data.len() - self.pos {
            return Err(BundleError::TruncatedSection(self.what.to_string()));
        }
        Ok(n)
    }

    fn finish(&self) -> Result<(), BundleError> {
        if self.pos == self.data.len() {
            Ok(())
        } else {
            Err(BundleError::TruncatedSection(format!("{}: trailing bytes", self.what)))
        }
    }
}

/// Parses and validates a bundle. Never reads past `bytes`.
pub fn decode_bundle(bytes: &[u8]) -> Result<CodeProofBundle, BundleError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(BundleError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let mut header = Reader::new(bytes, "header");
    header.bytes(4)?;
    let version = header.u16()?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let count = header.u16()? as usize;
    let mut found: [Option<&[u8]>; 7] = [None; 7];
    for _ in 0..count {
        let kind = header.u8()?;
        let offset = header.u64()?;
        let length = header.u64()?;
        if !(SECTION_CODE..=SECTION_ENTRY).contains(&kind) {
            return Err(BundleError::UnknownSection(kind));
        }
        let end = offset
            .checked_add(length)
            .filter(|e| *e <= bytes.len() as u64)
            .ok_or_else(|| BundleError::TruncatedSection(format!("section {} exceeds input", kind)))?;
        if found[kind as usize].is_some() {
            return Err(BundleError::DuplicateSection(kind));
        }
        found[kind as usize] = Some(&bytes[offset as usize..end as usize]);
    }
    let section = |k: u8| found[k as usize].ok_or(BundleError::MissingSection(k));

    let code = section(SECTION_CODE)?.to_vec();

    let mut r = Reader::new(section(SECTION_RELOCATIONS)?, "relocations");
    let n = r.count(21)?;
    let mut relocations = Vec::with_capacity(n);
    for _ in 0..n {
        let offset = r.u64()?;
        let symbol_index = r.u32()?;
        let kind = match r.u8()? {
            1 => RelocKind::Abs64,
            2 => RelocKind::Rel32,
            k => return Err(BundleError::BadRelocKind(k)),
        };
        let addend = r.u64()? as i64;
        relocations.push(Relocation { offset, symbol_index, kind, addend });
    }
    r.finish()?;

    let mut r = Reader::new(section(SECTION_SYMBOLS)?, "symbols");
    let n = r.count(13)?;
    let mut symbols = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let defined = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(BundleError::TruncatedSection("symbols: bad defined flag".into())),
        };
        let value = r.u64()?;
        symbols.push(Symbol { name, defined, value });
    }
    r.finish()?;

    let mut r = Reader::new(section(SECTION_TARGETS)?, "indirect targets");
    let n = r.count(4)?;
    let mut indirect_targets = Vec::with_capacity(n);
    for _ in 0..n {
        indirect_targets.push(r.str()?);
    }
    r.finish()?;

    let mut r = Reader::new(section(SECTION_MANIFEST)?, "manifest");
    let policies = PolicySet::from_bits(r.u8()?)
        .ok_or_else(|| BundleError::InvalidManifest("unknown policy bits".into()))?;
    let mode = match r.u8()? {
        1 => ServiceMode::CCaaS,
        2 => ServiceMode::CDaaS,
        m => return Err(BundleError::InvalidManifest(format!("unknown mode {}", m))),
    };
    let manifest = PolicyManifest {
        policies,
        mode,
        pad_length: r.u32()?,
        max_sends: r.u32()?,
        max_output_bits: r.u32()?,
        ssa_stride_k: r.u32()?,
        aex_threshold: r.u32()?,
    };
    r.finish()?;

    let mut r = Reader::new(section(SECTION_ENTRY)?, "entry");
    let entry_symbol = r.str()?;
    r.finish()?;

    let bundle = CodeProofBundle {
        magic: MAGIC,
        version,
        code,
        relocations,
        symbols,
        indirect_targets,
        manifest,
        entry_symbol,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CodeProofBundle {
        CodeProofBundle::new(
            vec![0x90; 16],
            vec![Relocation { offset: 4, symbol_index: 1, kind: RelocKind::Abs64, addend: 0 }],
            vec![
                Symbol { name: "main".into(), defined: true, value: 0 },
                Symbol { name: "f".into(), defined: true, value: 8 },
            ],
            vec!["f".into()],
            PolicyManifest::with_policies(PolicySet::of(&[Policy::P1, Policy::P5])),
            "main".into(),
        )
        .unwrap()
    }

    #[test]
    fn empty_code_round_trip() {
        let b = CodeProofBundle::new(
            Vec::new(),
            Vec::new(),
            vec![Symbol { name: "main".into(), defined: true, value: 0 }],
            Vec::new(),
            PolicyManifest::default(),
            "main".into(),
        )
        .unwrap();
        let bytes = encode_bundle(&b);
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(encode_bundle(&sample()), encode_bundle(&sample()));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_bundle(&sample());
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_bundle(&bytes), Err(BundleError::BadMagic(_))));
        assert!(matches!(decode_bundle(b"CA"), Err(BundleError::BadMagic(_))));
    }

    #[test]
    fn relocation_past_code_end() {
        let mut b = sample();
        b.relocations[0].offset = 12;
        let bytes = encode_bundle(&b);
        assert!(matches!(decode_bundle(&bytes), Err(BundleError::TruncatedSection(_))));
    }

    #[test]
    fn dangling_symbol_index() {
        let mut b = sample();
        b.relocations[0].symbol_index = 9;
        assert!(matches!(decode_bundle(&encode_bundle(&b)), Err(BundleError::DanglingSymbolIndex { .. })));
    }

    #[test]
    fn unresolved_indirect_target() {
        let mut b = sample();
        b.indirect_targets.push("ghost".into());
        assert_eq!(
            decode_bundle(&encode_bundle(&b)),
            Err(BundleError::UnresolvedIndirectTarget("ghost".into()))
        );
    }

    #[test]
    fn truncation_at_every_length_is_an_error() {
        let bytes = encode_bundle(&sample());
        for len in 0..bytes.len() {
            assert!(decode_bundle(&bytes[..len]).is_err(), "prefix of {} bytes decoded", len);
        }
    }

    #[test]
    fn placeholder_constants() {
        assert_eq!(placeholder_value("upper_data_bound"), Ok(0x3FFF_FFFF_FFFF_FFFF));
        assert_eq!(placeholder_value("upper_stack_bound"), Ok(0x5FFF_FFFF_FFFF_FFFF));
        assert_eq!(placeholder_value("branch_target_count"), Ok(0x1_FFFF_FFFF));
        assert_eq!(placeholder_value("nope"), Err(UnknownField("nope".into())));
        let mut values: Vec<u64> = PlaceholderField::ALL.iter().map(|f| f.value()).collect();
        values.sort();
        values.dedup();
        assert_eq!(values.len(), 9);
        for f in PlaceholderField::ALL {
            if f != PlaceholderField::BranchTargetCount {
                assert!(f.value() >= 1 << 60, "{} too small", f);
            }
        }
    }

    #[test]
    fn manifest_invariants() {
        let mut m = PolicyManifest { mode: ServiceMode::CDaaS, max_sends: 0, ..Default::default() };
        assert!(m.validate().is_err());
        m.max_sends = 1;
        assert!(m.validate().is_ok());
        m.ssa_stride_k = 0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn policy_set_parsing() {
        let s: PolicySet = "p1,p2,P5".parse().unwrap();
        assert_eq!(s.to_string(), "P1,P2,P5");
        assert!("p9".parse::<PolicySet>().is_err());
        assert_eq!(PolicySet::up_to(Policy::P5).iter().count(), 5);
    }
}
