//! Canonical annotation templates and runtime-support routines.
//!
//! The producer emits these sequences verbatim and the verifier re-encodes
//! them to match the loaded image byte for byte. Any change here is a
//! format change for both sides.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::bundle::PlaceholderField;
use crate::isa::{encode_instruction, Instruction, Mem, Mnemonic, Operand, Reg, Stmt, Sym};

pub const EXIT_LABEL: &str = "exit_label";
pub const CFI_CHECK: &str = "CFICheck";
pub const SSA_CHECK: &str = "ssa_check";
/// External symbol the loader binds to the simulated SSA page.
pub const SSA_PAGE: &str = "__cat_ssa";
pub const OCALL_SEND: &str = "ocall_send";
pub const OCALL_RECV: &str = "ocall_recv";

/// Exit status loaded by the exit stub before halting.
pub const VIOLATION_CODE: u32 = 0xFFFF_FFFF;
/// Value `ssa_check` plants in the SSA marker slot.
pub const SSA_MARKER: i32 = 0x5A5A_5A5A;

/// SSA page layout: marker, AEX counter, counter value at the last check.
pub const SSA_MARKER_OFFSET: u64 = 0;
pub const SSA_COUNT_OFFSET: u64 = 8;
pub const SSA_LAST_OFFSET: u64 = 16;

/// Names reserved for runtime support; user programs may not define them.
pub const RUNTIME_SYMBOLS: [&str; 3] = [EXIT_LABEL, CFI_CHECK, SSA_CHECK];
/// Undefined symbols the consumer is willing to bind.
pub const GATEWAY_SYMBOLS: [&str; 3] = [OCALL_SEND, OCALL_RECV, SSA_PAGE];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GuardKind {
    StoreGuard,
    RspGuard,
    CfiGuard,
    ShadowProlog,
    ShadowEpilog,
    SsaCheck,
    ExitStub,
}

impl fmt::Display for GuardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("store destination {0} uses both scratch register pairs")]
    UnsupportedAddressingMode(String),
    #[error("indirect branch operand {0} uses rdi and r11")]
    IndirectThroughRdi(String),
    #[error("displacement overflow adjusting {0}")]
    DisplacementOverflow(String),
    #[error("cannot encode template: {0}")]
    Encode(String),
    #[error("unresolved template symbol `{0}`")]
    Unresolved(String),
}

/// Register pair a StoreGuard uses for the address and the bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scratch {
    pub addr: Reg,
    pub bound: Reg,
}

pub const SCRATCH_PRIMARY: Scratch = Scratch { addr: Reg::R10, bound: Reg::R11 };
pub const SCRATCH_ALTERNATE: Scratch = Scratch { addr: Reg::R8, bound: Reg::R9 };

impl Scratch {
    fn touched_by(self, mem: &Mem) -> bool {
        mem.uses(self.addr) || mem.uses(self.bound)
    }
}

/// Scratch pair for guarding a store to `dest`.
pub fn scratch_for(dest: &Mem) -> Result<Scratch, TemplateError> {
    if !SCRATCH_PRIMARY.touched_by(dest) {
        Ok(SCRATCH_PRIMARY)
    } else if !SCRATCH_ALTERNATE.touched_by(dest) {
        Ok(SCRATCH_ALTERNATE)
    } else {
        Err(TemplateError::UnsupportedAddressingMode(dest.to_string()))
    }
}

fn reg(r: Reg) -> Operand {
    Operand::Reg(r)
}

fn imm(v: u64) -> Operand {
    Operand::Imm(v as i64)
}

fn label(name: &str) -> Operand {
    Operand::Label(Sym::new(name))
}

fn mem(base: Reg, disp: i32) -> Operand {
    Operand::Mem(Mem::base_disp(base, disp))
}

fn i2(m: Mnemonic, a: Operand, b: Operand) -> Instruction {
    Instruction::op2(m, a, b)
}

fn i1(m: Mnemonic, a: Operand) -> Instruction {
    Instruction::op1(m, a)
}

/// Address operand the guard's `lea` recomputes, seen after its two pushes.
pub fn guard_lea_operand(dest: &Mem) -> Result<Mem, TemplateError> {
    if dest.base != Reg::Rsp {
        return Ok(*dest);
    }
    let disp = dest
        .disp
        .checked_add(16)
        .ok_or_else(|| TemplateError::DisplacementOverflow(dest.to_string()))?;
    Ok(Mem { disp, ..*dest })
}

/// Bounds check placed immediately before a memory store.
pub fn store_guard(dest: &Mem, scratch: Scratch) -> Result<Vec<Instruction>, TemplateError> {
    use Mnemonic::*;
    let Scratch { addr, bound } = scratch;
    Ok(vec![
        i1(Push, reg(addr)),
        i1(Push, reg(bound)),
        i2(Lea, reg(addr), Operand::Mem(guard_lea_operand(dest)?)),
        i2(Movabs, reg(bound), imm(PlaceholderField::UpperDataBound.value())),
        i2(Cmp, reg(addr), reg(bound)),
        i1(Ja, label(EXIT_LABEL)),
        i2(Movabs, reg(bound), imm(PlaceholderField::LowerDataBound.value())),
        i2(Cmp, reg(addr), reg(bound)),
        i1(Jb, label(EXIT_LABEL)),
        i1(Pop, reg(bound)),
        i1(Pop, reg(addr)),
    ])
}

/// Stack-pointer range check placed immediately after an explicit rsp write.
pub fn rsp_guard() -> Vec<Instruction> {
    use Mnemonic::*;
    vec![
        i1(Push, reg(Reg::R10)),
        i2(Movabs, reg(Reg::R10), imm(PlaceholderField::UpperStackBound.value())),
        i2(Cmp, reg(Reg::Rsp), reg(Reg::R10)),
        i1(Ja, label(EXIT_LABEL)),
        i2(Movabs, reg(Reg::R10), imm(PlaceholderField::LowerStackBound.value())),
        i2(Cmp, reg(Reg::Rsp), reg(Reg::R10)),
        i1(Jb, label(EXIT_LABEL)),
        i1(Pop, reg(Reg::R10)),
    ]
}

/// Forward-edge check placed before `call/jmp target`.
pub fn cfi_guard(target: &Operand) -> Vec<Instruction> {
    vec![
        i2(Mnemonic::Mov, reg(Reg::Rdi), target.clone()),
        i1(Mnemonic::Call, label(CFI_CHECK)),
    ]
}

/// Pushes the caller's return address onto the shadow stack.
pub fn shadow_prolog() -> Vec<Instruction> {
    use Mnemonic::*;
    vec![
        i1(Push, reg(Reg::R10)),
        i1(Push, reg(Reg::R11)),
        i2(Movabs, reg(Reg::R10), imm(PlaceholderField::ShadowStackBase.value())),
        i2(Add, mem(Reg::R10, 0), Operand::Imm(8)),
        i2(Mov, reg(Reg::R11), mem(Reg::R10, 0)),
        i2(Add, reg(Reg::R11), reg(Reg::R10)),
        i2(Mov, reg(Reg::R10), mem(Reg::Rsp, 16)),
        i2(Mov, mem(Reg::R11, 0), reg(Reg::R10)),
        i1(Pop, reg(Reg::R11)),
        i1(Pop, reg(Reg::R10)),
    ]
}

/// Compares the live return address with the shadow copy and pops it.
pub fn shadow_epilog() -> Vec<Instruction> {
    use Mnemonic::*;
    vec![
        i1(Push, reg(Reg::R10)),
        i1(Push, reg(Reg::R11)),
        i2(Movabs, reg(Reg::R10), imm(PlaceholderField::ShadowStackBase.value())),
        i2(Mov, reg(Reg::R11), mem(Reg::R10, 0)),
        i2(Add, reg(Reg::R11), reg(Reg::R10)),
        i2(Mov, reg(Reg::R11), mem(Reg::R11, 0)),
        i2(Cmp, reg(Reg::R11), mem(Reg::Rsp, 16)),
        i1(Jne, label(EXIT_LABEL)),
        i2(Sub, mem(Reg::R10, 0), Operand::Imm(8)),
        i1(Pop, reg(Reg::R11)),
        i1(Pop, reg(Reg::R10)),
    ]
}

pub fn ssa_check_call() -> Vec<Instruction> {
    vec![i1(Mnemonic::Call, label(SSA_CHECK))]
}

pub fn exit_stub() -> Vec<Stmt> {
    vec![
        Stmt::Label(EXIT_LABEL.into()),
        Stmt::Instr(i2(Mnemonic::Mov, Operand::Reg32(Reg::Rdi), Operand::Imm(VIOLATION_CODE as i64))),
        Stmt::Instr(Instruction::op0(Mnemonic::Hlt)),
    ]
}

/// Binary search of the loaded target table for `rdi`; misses abort.
///
/// Table layout: count at the head, then sorted 64-bit addresses.
pub fn cfi_check_routine() -> Vec<Stmt> {
    use Mnemonic::*;
    let loop_label = "__cat_cfi_loop";
    let lower = "__cat_cfi_lower";
    let hit = "__cat_cfi_hit";
    let table_entry = Mem { base: Reg::Rsi, index: Some((Reg::Rdx, 8)), disp: 8 };
    let mut out = vec![Stmt::Label(CFI_CHECK.into())];
    let body = vec![
        Instruction::op0(Pushf),
        i1(Push, reg(Reg::Rax)),
        i1(Push, reg(Reg::Rcx)),
        i1(Push, reg(Reg::Rdx)),
        i1(Push, reg(Reg::Rsi)),
        i2(Movabs, reg(Reg::Rax), imm(PlaceholderField::LowerCodeBound.value())),
        i2(Cmp, reg(Reg::Rdi), reg(Reg::Rax)),
        i1(Jb, label(EXIT_LABEL)),
        i2(Movabs, reg(Reg::Rax), imm(PlaceholderField::UpperCodeBound.value())),
        i2(Cmp, reg(Reg::Rdi), reg(Reg::Rax)),
        i1(Ja, label(EXIT_LABEL)),
        i2(Movabs, reg(Reg::Rsi), imm(PlaceholderField::BranchTargetList.value())),
        i2(Xor, reg(Reg::Rax), reg(Reg::Rax)),
        i2(Movabs, reg(Reg::Rcx), imm(PlaceholderField::BranchTargetCount.value())),
    ];
    out.extend(body.into_iter().map(Stmt::Instr));
    out.push(Stmt::Label(loop_label.into()));
    out.extend(
        [
            i2(Cmp, reg(Reg::Rax), reg(Reg::Rcx)),
            i1(Jae, label(EXIT_LABEL)),
            i2(Lea, reg(Reg::Rdx), Operand::Mem(Mem { base: Reg::Rax, index: Some((Reg::Rcx, 1)), disp: 0 })),
            i2(Shr, reg(Reg::Rdx), Operand::Imm(1)),
            i2(Cmp, reg(Reg::Rdi), Operand::Mem(table_entry)),
            i1(Je, label(hit)),
            i1(Jb, label(lower)),
            i2(Lea, reg(Reg::Rax), mem(Reg::Rdx, 1)),
            i1(Jmp, label(loop_label)),
        ]
        .into_iter()
        .map(Stmt::Instr),
    );
    out.push(Stmt::Label(lower.into()));
    out.extend(
        [i2(Mov, reg(Reg::Rcx), reg(Reg::Rdx)), i1(Jmp, label(loop_label))]
            .into_iter()
            .map(Stmt::Instr),
    );
    out.push(Stmt::Label(hit.into()));
    out.extend(
        [
            i1(Pop, reg(Reg::Rsi)),
            i1(Pop, reg(Reg::Rdx)),
            i1(Pop, reg(Reg::Rcx)),
            i1(Pop, reg(Reg::Rax)),
            Instruction::op0(Popf),
            // scrub the saved registers so a memory-indirect branch cannot
            // pick up a value planted below the stack pointer
            i2(Mov, mem(Reg::Rsp, -16), Operand::Imm(0)),
            i2(Mov, mem(Reg::Rsp, -24), Operand::Imm(0)),
            i2(Mov, mem(Reg::Rsp, -32), Operand::Imm(0)),
            i2(Mov, mem(Reg::Rsp, -40), Operand::Imm(0)),
            Instruction::op0(Ret),
        ]
        .into_iter()
        .map(Stmt::Instr),
    );
    out
}

/// Aborts when `aex_count - last_checked >= threshold`, then re-arms.
pub fn ssa_check_routine(aex_threshold: u32) -> Vec<Stmt> {
    use Mnemonic::*;
    let mut out = vec![Stmt::Label(SSA_CHECK.into())];
    out.extend(
        [
            Instruction::op0(Pushf),
            i1(Push, reg(Reg::Rax)),
            i1(Push, reg(Reg::Rcx)),
            i2(Movabs, reg(Reg::Rax), label(SSA_PAGE)),
            i2(Mov, reg(Reg::Rcx), mem(Reg::Rax, SSA_COUNT_OFFSET as i32)),
            i2(Sub, reg(Reg::Rcx), mem(Reg::Rax, SSA_LAST_OFFSET as i32)),
            i2(Cmp, reg(Reg::Rcx), Operand::Imm(aex_threshold as i64)),
            i1(Jae, label(EXIT_LABEL)),
            i2(Mov, reg(Reg::Rcx), mem(Reg::Rax, SSA_COUNT_OFFSET as i32)),
            i2(Mov, mem(Reg::Rax, SSA_LAST_OFFSET as i32), reg(Reg::Rcx)),
            i2(Mov, mem(Reg::Rax, SSA_MARKER_OFFSET as i32), Operand::Imm(SSA_MARKER as i64)),
            i1(Pop, reg(Reg::Rcx)),
            i1(Pop, reg(Reg::Rax)),
            Instruction::op0(Popf),
            Instruction::op0(Ret),
        ]
        .into_iter()
        .map(Stmt::Instr),
    );
    out
}

/// Template bytes placed at a fixed image offset, with the locations of
/// placeholder immediates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instantiated {
    pub bytes: Vec<u8>,
    /// (byte offset within `bytes`, field) for each 8-byte placeholder slot.
    pub slots: Vec<(usize, PlaceholderField)>,
    /// Offset of each instruction start within `bytes`.
    pub boundaries: Vec<usize>,
}

/// Resolves names a template refers to.
pub trait SymbolResolver {
    /// Image offset used as a branch or call target.
    fn branch_target(&self, name: &str) -> Option<i64>;
    /// Absolute value for a `movabs reg, name` operand.
    fn absolute(&self, name: &str) -> Option<u64>;
}

/// Encodes statements as if placed at image offset `origin`.
///
/// Labels defined inside `stmts` resolve locally; anything else goes
/// through `resolver`.
pub fn instantiate(
    stmts: &[Stmt],
    origin: u64,
    resolver: &dyn SymbolResolver,
) -> Result<Instantiated, TemplateError> {
    let mut local = BTreeMap::new();
    let mut at = origin;
    for s in stmts {
        match s {
            Stmt::Label(name) => {
                local.insert(name.as_str(), at as i64);
            }
            Stmt::Instr(i) => {
                at += encode_instruction(i, 0).map_err(|e| TemplateError::Encode(e.to_string()))?.bytes.len() as u64
            }
            Stmt::Quad(_) => at += 8,
            Stmt::Global(_) => {}
        }
    }
    let mut out = Instantiated { bytes: Vec::new(), slots: Vec::new(), boundaries: Vec::new() };
    for s in stmts {
        let Stmt::Instr(instr) = s else {
            if let Stmt::Quad(_) = s {
                return Err(TemplateError::Encode("templates carry no data".into()));
            }
            continue;
        };
        let mut resolved = instr.clone();
        for op in resolved.operands.iter_mut() {
            if let Operand::Label(sym) = op {
                let is_branch = matches!(instr.mnemonic, Mnemonic::Call | Mnemonic::Jmp)
                    || instr.mnemonic.is_conditional_jump();
                *op = if is_branch {
                    let base = local
                        .get(sym.name.as_str())
                        .copied()
                        .or_else(|| resolver.branch_target(&sym.name))
                        .ok_or_else(|| TemplateError::Unresolved(sym.name.clone()))?;
                    Operand::Rel(base + sym.addend)
                } else {
                    let base = resolver
                        .absolute(&sym.name)
                        .ok_or_else(|| TemplateError::Unresolved(sym.name.clone()))?;
                    Operand::Imm(base.wrapping_add(sym.addend as u64) as i64)
                };
            }
        }
        let here = origin + out.bytes.len() as u64;
        let enc = encode_instruction(&resolved, here).map_err(|e| TemplateError::Encode(e.to_string()))?;
        if let (Mnemonic::Movabs, Some(Operand::Imm(v))) = (resolved.mnemonic, resolved.operands.get(1)) {
            if let Some(field) = PlaceholderField::from_value(*v as u64) {
                out.slots.push((out.bytes.len() + 2, field));
            }
        }
        out.boundaries.push(out.bytes.len());
        out.bytes.extend_from_slice(&enc.bytes);
    }
    Ok(out)
}

/// Wraps bare instructions as statements.
pub fn as_stmts(instrs: Vec<Instruction>) -> Vec<Stmt> {
    instrs.into_iter().map(Stmt::Instr).collect()
}
