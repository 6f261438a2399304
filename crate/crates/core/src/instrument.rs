//! The untrusted producer: parses subset assembly, inserts the policy
//! annotations, links runtime support and emits a [`CodeProofBundle`].
//!
//! Passes run once each, in the order stores → rsp → cfi → shadow → ssa.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::bundle::{
    BundleError, CodeProofBundle, Policy, PolicyManifest, Relocation, Symbol,
};
use crate::isa::{assemble, parse_source, AsmError, Assembled, Instruction, Mem, Mnemonic, Operand, Reg, Stmt};
use crate::templates::{self, GuardKind, TemplateError, RUNTIME_SYMBOLS};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error(transparent)]
    Parse(#[from] AsmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("pass {0:?} already applied")]
    PassAlreadyApplied(Pass),
    #[error("pass {pass:?} must run before {later:?}")]
    PassOutOfOrder { pass: Pass, later: Pass },
    #[error("policy {0} selected but its pass was not applied")]
    PassNotApplied(Policy),
    #[error("program defines reserved symbol `{0}`")]
    DuplicateSymbol(String),
    #[error("runtime support `{0}` is referenced but its policy is not selected")]
    MissingRuntimeSupport(&'static str),
    #[error("instructions before the first label")]
    CodeOutsideFunction,
    #[error("program has no entry point")]
    NoEntry,
    #[error("ssa stride must be at least 1")]
    BadStride,
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pass {
    Stores,
    Rsp,
    Cfi,
    Shadow,
    Ssa,
}

/// Which side of its instruction an annotation is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attach {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub kind: GuardKind,
    pub attach: Attach,
    pub instrs: Vec<Instruction>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Label(String),
    Instr(Instruction),
    Quad(Operand),
    Annotation(Annotation),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    /// Starts with the function's own label.
    pub items: Vec<Item>,
    /// Labels a block of `.quad` data rather than code.
    pub is_data: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub functions: Vec<Function>,
    pub globals: Vec<String>,
    pub entry: String,
    pub applied: BTreeSet<Pass>,
    /// Sorted legal indirect-branch targets, filled by the CFI pass.
    pub indirect_targets: Vec<String>,
}

fn branch_label(instr: &Instruction) -> Option<&str> {
    match instr.operands.first() {
        Some(Operand::Label(sym))
            if matches!(instr.mnemonic, Mnemonic::Call | Mnemonic::Jmp) || instr.mnemonic.is_conditional_jump() =>
        {
            Some(&sym.name)
        }
        _ => None,
    }
}

fn address_taken(stmt: &Stmt) -> Option<&str> {
    match stmt {
        Stmt::Quad(Operand::Label(sym)) => Some(&sym.name),
        Stmt::Instr(i) if i.mnemonic == Mnemonic::Movabs => match i.operands.get(1) {
            Some(Operand::Label(sym)) => Some(&sym.name),
            _ => None,
        },
        _ => None,
    }
}

impl Program {
    /// Parses assembly text and splits it into functions.
    ///
    /// Function entries are the first label, `.global` labels, direct call
    /// targets and address-taken code labels. The entry point is `main` if
    /// defined, else the first global, else the first label.
    pub fn parse(source: &str) -> Result<Program, InstrumentError> {
        let stmts: Vec<Stmt> = parse_source(source)?.into_iter().map(|(_, s)| s).collect();
        Program::from_stmts(stmts)
    }

    pub fn from_stmts(stmts: Vec<Stmt>) -> Result<Program, InstrumentError> {
        let mut defined = BTreeSet::new();
        let mut data_labels = BTreeSet::new();
        for (i, s) in stmts.iter().enumerate() {
            if let Stmt::Label(name) = s {
                if RUNTIME_SYMBOLS.contains(&name.as_str()) || name.starts_with("__cat_") {
                    return Err(InstrumentError::DuplicateSymbol(name.clone()));
                }
                defined.insert(name.clone());
                let next = stmts[i + 1..].iter().find(|s| !matches!(s, Stmt::Label(_) | Stmt::Global(_)));
                if matches!(next, Some(Stmt::Quad(_))) {
                    data_labels.insert(name.clone());
                }
            }
        }
        let globals: Vec<String> = stmts
            .iter()
            .filter_map(|s| match s {
                Stmt::Global(n) => Some(n.clone()),
                _ => None,
            })
            .collect();
        let first_label = stmts.iter().find_map(|s| match s {
            Stmt::Label(n) => Some(n.clone()),
            _ => None,
        });
        if first_label.is_none() {
            if stmts.iter().any(|s| matches!(s, Stmt::Instr(_) | Stmt::Quad(_))) {
                return Err(InstrumentError::CodeOutsideFunction);
            }
            return Ok(Program {
                functions: Vec::new(),
                globals,
                entry: String::new(),
                applied: BTreeSet::new(),
                indirect_targets: Vec::new(),
            });
        }
        let entry = if defined.contains("main") {
            "main".to_string()
        } else if let Some(g) = globals.iter().find(|g| defined.contains(*g)) {
            g.clone()
        } else {
            first_label.clone().ok_or(InstrumentError::NoEntry)?
        };

        let mut function_labels: BTreeSet<String> = BTreeSet::new();
        function_labels.extend(first_label);
        function_labels.insert(entry.clone());
        function_labels.extend(globals.iter().filter(|g| defined.contains(*g)).cloned());
        for s in &stmts {
            if let Stmt::Instr(i) = s {
                if i.mnemonic == Mnemonic::Call {
                    if let Some(name) = branch_label(i).filter(|n| defined.contains(*n)) {
                        function_labels.insert(name.to_string());
                    }
                }
            }
            if let Some(name) = address_taken(s).filter(|n| defined.contains(*n)) {
                function_labels.insert(name.to_string());
            }
        }

        let mut functions: Vec<Function> = Vec::new();
        for s in stmts {
            match s {
                Stmt::Global(_) => {}
                Stmt::Label(name) if function_labels.contains(&name) => functions.push(Function {
                    is_data: data_labels.contains(&name),
                    name: name.clone(),
                    items: vec![Item::Label(name)],
                }),
                other => {
                    let f = functions.last_mut().ok_or(InstrumentError::CodeOutsideFunction)?;
                    f.items.push(match other {
                        Stmt::Label(n) => Item::Label(n),
                        Stmt::Instr(i) => Item::Instr(i),
                        Stmt::Quad(q) => Item::Quad(q),
                        Stmt::Global(_) => unreachable!(),
                    });
                }
            }
        }
        Ok(Program { functions, globals, entry, applied: BTreeSet::new(), indirect_targets: Vec::new() })
    }

    /// Label name → index of the next instruction, counted over the whole program.
    pub fn labels(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        let mut index = 0;
        for f in &self.functions {
            for item in &f.items {
                match item {
                    Item::Label(n) => {
                        out.insert(n.clone(), index);
                    }
                    Item::Instr(_) => index += 1,
                    Item::Annotation(a) => index += a.instrs.len(),
                    Item::Quad(_) => {}
                }
            }
        }
        out
    }

    /// Sorted, deduplicated names of the code functions.
    pub fn entry_points(&self) -> Vec<String> {
        let mut names: Vec<String> = self.code_functions().map(|f| f.name.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn code_functions(&self) -> impl Iterator<Item = &Function> {
        self.functions.iter().filter(|f| !f.is_data)
    }

    /// Program instructions, excluding annotations.
    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.functions.iter().flat_map(|f| f.items.iter()).filter_map(|i| match i {
            Item::Instr(i) => Some(i),
            _ => None,
        })
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.functions.iter().flat_map(|f| f.items.iter()).filter_map(|i| match i {
            Item::Annotation(a) => Some(a),
            _ => None,
        })
    }

    pub fn count_annotations(&self, kind: GuardKind) -> usize {
        self.annotations().filter(|a| a.kind == kind).count()
    }

    /// Flattens to assembler statements.
    pub fn to_stmts(&self) -> Vec<Stmt> {
        let mut out: Vec<Stmt> = self.globals.iter().cloned().map(Stmt::Global).collect();
        for f in &self.functions {
            for item in &f.items {
                match item {
                    Item::Label(n) => out.push(Stmt::Label(n.clone())),
                    Item::Instr(i) => out.push(Stmt::Instr(i.clone())),
                    Item::Quad(q) => out.push(Stmt::Quad(q.clone())),
                    Item::Annotation(a) => out.extend(a.instrs.iter().cloned().map(Stmt::Instr)),
                }
            }
        }
        out
    }

    /// Assembles the program as-is, without runtime support.
    pub fn assemble(&self) -> Result<Assembled, InstrumentError> {
        let stmts = self.to_stmts();
        Ok(assemble(stmts.iter().map(|s| (0, s)))?)
    }

    fn begin_pass(&mut self, pass: Pass) -> Result<(), InstrumentError> {
        if self.applied.contains(&pass) {
            return Err(InstrumentError::PassAlreadyApplied(pass));
        }
        if let Some(later) = self.applied.iter().copied().find(|p| *p > pass) {
            return Err(InstrumentError::PassOutOfOrder { pass, later });
        }
        self.applied.insert(pass);
        Ok(())
    }
}

fn body_label(function: &str) -> String {
    format!("__cat_body_{function}")
}

fn annotation(kind: GuardKind, attach: Attach, instrs: Vec<Instruction>) -> Item {
    Item::Annotation(Annotation { kind, attach, instrs })
}

/// Inserts a StoreGuard before every memory-writing instruction.
pub fn instrument_stores(mut p: Program) -> Result<Program, InstrumentError> {
    p.begin_pass(Pass::Stores)?;
    for f in p.functions.iter_mut().filter(|f| !f.is_data) {
        let mut out = Vec::with_capacity(f.items.len());
        for item in f.items.drain(..) {
            if let Item::Instr(i) = &item {
                if let Some(dest) = i.memory_write() {
                    let scratch = templates::scratch_for(dest)?;
                    out.push(annotation(GuardKind::StoreGuard, Attach::Before, templates::store_guard(dest, scratch)?));
                }
            }
            out.push(item);
        }
        f.items = out;
    }
    Ok(p)
}

/// Inserts an RspGuard after every explicit stack-pointer write, plus one
/// at program entry to validate the initial stack pointer.
pub fn instrument_rsp(mut p: Program) -> Result<Program, InstrumentError> {
    p.begin_pass(Pass::Rsp)?;
    let entry = p.entry.clone();
    for f in p.functions.iter_mut().filter(|f| !f.is_data) {
        let mut out = Vec::with_capacity(f.items.len());
        for item in f.items.drain(..) {
            let guard = matches!(&item, Item::Instr(i) if i.writes_rsp_explicitly());
            out.push(item);
            if guard {
                out.push(annotation(GuardKind::RspGuard, Attach::After, templates::rsp_guard()));
            }
        }
        if f.name == entry {
            out.insert(1, annotation(GuardKind::RspGuard, Attach::Before, templates::rsp_guard()));
        }
        f.items = out;
    }
    Ok(p)
}

fn rename_rdi(op: &Operand) -> Result<Option<Operand>, InstrumentError> {
    let swap = |r: Reg| if r == Reg::Rdi { Reg::R11 } else { r };
    match op {
        Operand::Reg(Reg::Rdi) => Ok(Some(Operand::Reg(Reg::R11))),
        Operand::Mem(m) if m.uses(Reg::Rdi) => {
            if m.uses(Reg::R11) {
                return Err(TemplateError::IndirectThroughRdi(m.to_string()).into());
            }
            Ok(Some(Operand::Mem(Mem { base: swap(m.base), index: m.index.map(|(r, s)| (swap(r), s)), disp: m.disp })))
        }
        _ => Ok(None),
    }
}

/// Inserts a CfiGuard before every indirect CALL/JMP and computes the
/// sorted list of legal indirect targets.
///
/// Branch operands built on `rdi` are first moved to `r11`, since the guard
/// passes the target in `rdi`.
pub fn instrument_cfi(mut p: Program) -> Result<(Program, Vec<String>), InstrumentError> {
    p.begin_pass(Pass::Cfi)?;
    for f in p.functions.iter_mut().filter(|f| !f.is_data) {
        let mut out = Vec::with_capacity(f.items.len());
        for item in f.items.drain(..) {
            match item {
                Item::Instr(mut i) if i.is_indirect_branch() => {
                    if let Operand::Mem(m) = &i.operands[0] {
                        if m.uses(Reg::Rsp) {
                            return Err(TemplateError::UnsupportedAddressingMode(m.to_string()).into());
                        }
                    }
                    if let Some(renamed) = rename_rdi(&i.operands[0])? {
                        out.push(Item::Instr(Instruction::op2(
                            Mnemonic::Mov,
                            Operand::Reg(Reg::R11),
                            Operand::Reg(Reg::Rdi),
                        )));
                        i.operands[0] = renamed;
                    }
                    out.push(annotation(GuardKind::CfiGuard, Attach::Before, templates::cfi_guard(&i.operands[0])));
                    out.push(Item::Instr(i));
                }
                other => out.push(other),
            }
        }
        f.items = out;
    }
    let targets = p.entry_points();
    p.indirect_targets = targets.clone();
    Ok((p, targets))
}

/// Adds a ShadowProlog at every function entry and a ShadowEpilog before
/// every RET.
pub fn instrument_shadow_stack(mut p: Program) -> Result<Program, InstrumentError> {
    p.begin_pass(Pass::Shadow)?;
    let entries: BTreeSet<String> = p.code_functions().map(|f| f.name.clone()).collect();
    let mut jumped = BTreeSet::new();
    for f in p.functions.iter_mut() {
        for item in &mut f.items {
            if let Item::Instr(i) = item {
                if i.mnemonic == Mnemonic::Call || branch_label(i).is_none() {
                    continue;
                }
                if let Some(Operand::Label(sym)) = i.operands.first_mut() {
                    if entries.contains(&sym.name) {
                        jumped.insert(sym.name.clone());
                        sym.name = body_label(&sym.name);
                    }
                }
            }
        }
    }
    for f in p.functions.iter_mut().filter(|f| !f.is_data) {
        let mut out = Vec::with_capacity(f.items.len() + 3);
        for (idx, item) in f.items.drain(..).enumerate() {
            if idx == 1 {
                out.push(annotation(GuardKind::ShadowProlog, Attach::Before, templates::shadow_prolog()));
            }
            if matches!(&item, Item::Instr(i) if i.mnemonic == Mnemonic::Ret) {
                out.push(annotation(GuardKind::ShadowEpilog, Attach::Before, templates::shadow_epilog()));
            }
            out.push(item);
        }
        if out.len() == 1 {
            out.push(annotation(GuardKind::ShadowProlog, Attach::Before, templates::shadow_prolog()));
        }
        if jumped.contains(&f.name) {
            // direct jumps to the entry land after the entry guards
            let at = 1 + out[1..].iter().take_while(|i| matches!(i, Item::Annotation(_))).count();
            out.insert(at, Item::Label(body_label(&f.name)));
        }
        f.items = out;
    }
    Ok(p)
}

/// Inserts `call ssa_check` at the start of every basic block and before
/// every further `k` instructions within a block.
///
/// An instruction together with its attached annotations counts as one
/// instruction and is never split.
pub fn instrument_ssa(mut p: Program, k: u32) -> Result<Program, InstrumentError> {
    if k == 0 {
        return Err(InstrumentError::BadStride);
    }
    p.begin_pass(Pass::Ssa)?;
    let check = || annotation(GuardKind::SsaCheck, Attach::Before, templates::ssa_check_call());
    for f in p.functions.iter_mut().filter(|f| !f.is_data) {
        let items: Vec<Item> = std::mem::take(&mut f.items);
        let mut out = Vec::with_capacity(items.len() + 4);
        let mut iter = items.into_iter().peekable();
        // function label
        out.extend(iter.next());
        let mut need_check = true;
        let mut emitted = false;
        let mut count = 0u32;
        while let Some(item) = iter.next() {
            match item {
                Item::Label(_) => {
                    out.push(item);
                    need_check = true;
                }
                Item::Quad(_) => out.push(item),
                Item::Annotation(a) if a.attach == Attach::After => out.push(Item::Annotation(a)),
                first => {
                    // One unit: leading annotations, one instruction, trailing annotations.
                    let mut unit = vec![first];
                    let mut instr_ends_block = None;
                    if let Some(Item::Instr(i)) = unit.last() {
                        instr_ends_block = Some(i.is_control_transfer());
                    }
                    while instr_ends_block.is_none() {
                        match iter.peek() {
                            Some(Item::Annotation(a)) if a.attach == Attach::Before => {
                                unit.push(iter.next().expect("peeked"))
                            }
                            Some(Item::Instr(i)) => {
                                instr_ends_block = Some(i.is_control_transfer());
                                unit.push(iter.next().expect("peeked"));
                            }
                            _ => break,
                        }
                    }
                    if instr_ends_block.is_some() {
                        while let Some(Item::Annotation(a)) = iter.peek() {
                            if a.attach != Attach::After {
                                break;
                            }
                            unit.push(iter.next().expect("peeked"));
                        }
                    }
                    if need_check || count == k {
                        out.push(check());
                        emitted = true;
                        need_check = false;
                        count = 0;
                    }
                    out.extend(unit);
                    if let Some(ends) = instr_ends_block {
                        count += 1;
                        need_check = ends;
                    }
                }
            }
        }
        if !emitted {
            out.insert(1, check());
        }
        f.items = out;
    }
    Ok(p)
}

/// Applies every pass the manifest selects, in the fixed order.
pub fn instrument(p: Program, manifest: &PolicyManifest) -> Result<Program, InstrumentError> {
    let policies = manifest.policies;
    let mut p = p;
    if policies.guards_stores() {
        p = instrument_stores(p)?;
    }
    if policies.contains(Policy::P2) {
        p = instrument_rsp(p)?;
    }
    if policies.contains(Policy::P5) {
        p = instrument_cfi(p)?.0;
        p = instrument_shadow_stack(p)?;
    }
    if policies.contains(Policy::P6) {
        p = instrument_ssa(p, manifest.ssa_stride_k)?;
    }
    Ok(p)
}

/// Appends runtime support, assembles, and packages a bundle.
pub fn link(p: &Program, manifest: &PolicyManifest) -> Result<CodeProofBundle, InstrumentError> {
    manifest.validate()?;
    let policies = manifest.policies;
    let required = [
        (policies.guards_stores(), Pass::Stores, Policy::P1),
        (policies.contains(Policy::P2), Pass::Rsp, Policy::P2),
        (policies.contains(Policy::P5), Pass::Cfi, Policy::P5),
        (policies.contains(Policy::P5), Pass::Shadow, Policy::P5),
        (policies.contains(Policy::P6), Pass::Ssa, Policy::P6),
    ];
    for (selected, pass, policy) in required {
        if selected && !p.applied.contains(&pass) {
            return Err(InstrumentError::PassNotApplied(policy));
        }
    }
    if p.count_annotations(GuardKind::CfiGuard) > 0 && !policies.contains(Policy::P5) {
        return Err(InstrumentError::MissingRuntimeSupport(templates::CFI_CHECK));
    }
    if p.count_annotations(GuardKind::SsaCheck) > 0 && !policies.contains(Policy::P6) {
        return Err(InstrumentError::MissingRuntimeSupport(templates::SSA_CHECK));
    }

    let mut stmts = p.to_stmts();
    if !policies.is_empty() || p.annotations().next().is_some() {
        stmts.extend(templates::exit_stub());
    }
    if policies.contains(Policy::P5) {
        stmts.extend(templates::cfi_check_routine());
    }
    if policies.contains(Policy::P6) {
        stmts.extend(templates::ssa_check_routine(manifest.aex_threshold));
    }
    let assembled = assemble(stmts.iter().map(|s| (0, s)))?;
    // without the CFI pass the list only seeds the verifier's descent
    let targets = if p.applied.contains(&Pass::Cfi) { p.indirect_targets.clone() } else { p.entry_points() };
    package(assembled, targets, *manifest, p.entry.clone())
}

/// Packages an assembled image without adding anything.
pub fn package(
    assembled: Assembled,
    indirect_targets: Vec<String>,
    manifest: PolicyManifest,
    entry: String,
) -> Result<CodeProofBundle, InstrumentError> {
    let mut symbols: Vec<Symbol> = assembled
        .labels
        .iter()
        .map(|(name, off)| Symbol { name: name.clone(), defined: true, value: *off })
        .collect();
    symbols.extend(
        assembled
            .externals
            .iter()
            .map(|name| Symbol { name: name.clone(), defined: false, value: 0 }),
    );
    let index: BTreeMap<&str, u32> = symbols.iter().enumerate().map(|(i, s)| (s.name.as_str(), i as u32)).collect();
    let relocations = assembled
        .relocations
        .iter()
        .map(|r| Relocation {
            offset: r.offset,
            symbol_index: index[r.symbol.as_str()],
            kind: r.kind,
            addend: r.addend,
        })
        .collect();
    Ok(CodeProofBundle::new(assembled.code, relocations, symbols, indirect_targets, manifest, entry)?)
}

/// Parse, instrument and link in one step.
pub fn build_bundle(source: &str, manifest: &PolicyManifest) -> Result<CodeProofBundle, InstrumentError> {
    let program = instrument(Program::parse(source)?, manifest)?;
    link(&program, manifest)
}

/// The same program linked with no policies, as a baseline.
pub fn build_baseline(source: &str) -> Result<CodeProofBundle, InstrumentError> {
    let program = Program::parse(source)?;
    link(&program, &PolicyManifest::default())
}
