//! Instruction model for the restricted x86-64 subset shared by the
//! producer (assembler, instrumenter) and the consumer (verifier, emulator).
//!
//! Everything here uses real machine encodings: 64-bit ALU forms carry
//! REX.W, branches are always rel32, and memory operands are
//! `[base + index*scale + disp]` with a mandatory base register.

mod asm;
mod decode;
mod encode;

use std::fmt;

pub use asm::{assemble, parse_source, AsmError, AsmErrorKind, AsmReloc, Assembled, Stmt};
pub use decode::{decode_instruction, DecodeError};
pub use encode::{encode_instruction, encoded_length, EncodeError, Encoded, Fixup};

/// Longest encoding the subset can produce (`mov qword [r12+r13*8+disp32], imm32`).
pub const MAX_SUBSET_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Reg {
    Rax = 0,
    Rcx,
    Rdx,
    Rbx,
    Rsp,
    Rbp,
    Rsi,
    Rdi,
    R8,
    R9,
    R10,
    R11,
    R12,
    R13,
    R14,
    R15,
}

const REG_NAMES: [&str; 16] = [
    "rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12",
    "r13", "r14", "r15",
];

const REG32_NAMES: [&str; 16] = [
    "eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi", "r8d", "r9d", "r10d", "r11d", "r12d",
    "r13d", "r14d", "r15d",
];

impl Reg {
    pub const ALL: [Reg; 16] = [
        Reg::Rax,
        Reg::Rcx,
        Reg::Rdx,
        Reg::Rbx,
        Reg::Rsp,
        Reg::Rbp,
        Reg::Rsi,
        Reg::Rdi,
        Reg::R8,
        Reg::R9,
        Reg::R10,
        Reg::R11,
        Reg::R12,
        Reg::R13,
        Reg::R14,
        Reg::R15,
    ];

    pub fn from_index(index: u8) -> Reg {
        Reg::ALL[(index & 0xF) as usize]
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        REG_NAMES[self as usize]
    }

    pub fn name32(self) -> &'static str {
        REG32_NAMES[self as usize]
    }

    /// Parses a 64-bit register name.
    pub fn parse(name: &str) -> Option<Reg> {
        REG_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| Reg::ALL[i])
    }

    /// Parses a 32-bit alias (`eax`, `r10d`, ...).
    pub fn parse32(name: &str) -> Option<Reg> {
        REG32_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .map(|i| Reg::ALL[i])
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `[base + index*scale + disp]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mem {
    pub base: Reg,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
}

impl Mem {
    pub fn base(base: Reg) -> Mem {
        Mem { base, index: None, disp: 0 }
    }

    pub fn base_disp(base: Reg, disp: i32) -> Mem {
        Mem { base, index: None, disp }
    }

    pub fn uses(&self, reg: Reg) -> bool {
        self.base == reg || matches!(self.index, Some((r, _)) if r == reg)
    }
}

impl fmt::Display for Mem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}", self.base)?;
        if let Some((idx, scale)) = self.index {
            write!(f, "+{}", idx)?;
            if scale != 1 {
                write!(f, "*{}", scale)?;
            }
        }
        match self.disp {
            0 => {}
            d if d < 0 => write!(f, "-0x{:X}", (d as i64).unsigned_abs())?,
            d => write!(f, "+0x{:X}", d)?,
        }
        f.write_str("]")
    }
}

/// A symbolic reference resolved by the assembler or the loader.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sym {
    pub name: String,
    pub addend: i64,
}

impl Sym {
    pub fn new(name: impl Into<String>) -> Sym {
        Sym { name: name.into(), addend: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    /// 32-bit alias; only valid as the destination of `mov r32, imm32`.
    Reg32(Reg),
    Imm(i64),
    Mem(Mem),
    /// Resolved branch target, as an offset relative to the start of the image.
    Rel(i64),
    /// Unresolved label (assembler input only).
    Label(Sym),
}

impl Operand {
    pub fn as_reg(&self) -> Option<Reg> {
        match self {
            Operand::Reg(r) | Operand::Reg32(r) => Some(*r),
            _ => None,
        }
    }

    pub fn as_mem(&self) -> Option<&Mem> {
        match self {
            Operand::Mem(m) => Some(m),
            _ => None,
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => f.write_str(r.name()),
            Operand::Reg32(r) => f.write_str(r.name32()),
            Operand::Imm(v) if *v < 0 => write!(f, "-0x{:X}", v.unsigned_abs()),
            Operand::Imm(v) => write!(f, "0x{:X}", v),
            Operand::Mem(m) => write!(f, "qword {}", m),
            Operand::Rel(t) => write!(f, "0x{:X}", t),
            Operand::Label(s) if s.addend == 0 => f.write_str(&s.name),
            Operand::Label(s) if s.addend < 0 => write!(f, "{}-{}", s.name, s.addend.unsigned_abs()),
            Operand::Label(s) => write!(f, "{}+{}", s.name, s.addend),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mnemonic {
    Mov,
    Movabs,
    Lea,
    Cmp,
    Add,
    Sub,
    And,
    Xor,
    Shr,
    Push,
    Pop,
    Pushf,
    Popf,
    Call,
    Jmp,
    Ret,
    Ja,
    Jae,
    Jb,
    Jbe,
    Je,
    Jne,
    Jg,
    Jl,
    Nop,
    Hlt,
}

impl Mnemonic {
    pub const ALL: [Mnemonic; 26] = [
        Mnemonic::Mov,
        Mnemonic::Movabs,
        Mnemonic::Lea,
        Mnemonic::Cmp,
        Mnemonic::Add,
        Mnemonic::Sub,
        Mnemonic::And,
        Mnemonic::Xor,
        Mnemonic::Shr,
        Mnemonic::Push,
        Mnemonic::Pop,
        Mnemonic::Pushf,
        Mnemonic::Popf,
        Mnemonic::Call,
        Mnemonic::Jmp,
        Mnemonic::Ret,
        Mnemonic::Ja,
        Mnemonic::Jae,
        Mnemonic::Jb,
        Mnemonic::Jbe,
        Mnemonic::Je,
        Mnemonic::Jne,
        Mnemonic::Jg,
        Mnemonic::Jl,
        Mnemonic::Nop,
        Mnemonic::Hlt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mnemonic::Mov => "mov",
            Mnemonic::Movabs => "movabs",
            Mnemonic::Lea => "lea",
            Mnemonic::Cmp => "cmp",
            Mnemonic::Add => "add",
            Mnemonic::Sub => "sub",
            Mnemonic::And => "and",
            Mnemonic::Xor => "xor",
            Mnemonic::Shr => "shr",
            Mnemonic::Push => "push",
            Mnemonic::Pop => "pop",
            Mnemonic::Pushf => "pushf",
            Mnemonic::Popf => "popf",
            Mnemonic::Call => "call",
            Mnemonic::Jmp => "jmp",
            Mnemonic::Ret => "ret",
            Mnemonic::Ja => "ja",
            Mnemonic::Jae => "jae",
            Mnemonic::Jb => "jb",
            Mnemonic::Jbe => "jbe",
            Mnemonic::Je => "je",
            Mnemonic::Jne => "jne",
            Mnemonic::Jg => "jg",
            Mnemonic::Jl => "jl",
            Mnemonic::Nop => "nop",
            Mnemonic::Hlt => "hlt",
        }
    }

    pub fn parse(name: &str) -> Option<Mnemonic> {
        let lower = name.to_ascii_lowercase();
        let alias = match lower.as_str() {
            "pushfq" => "pushf",
            "popfq" => "popf",
            "jz" => "je",
            "jnz" => "jne",
            "jc" | "jnae" => "jb",
            "jnc" | "jnb" => "jae",
            other => other,
        };
        Mnemonic::ALL.iter().copied().find(|m| m.name() == alias)
    }

    pub fn arity(self) -> usize {
        use Mnemonic::*;
        match self {
            Mov | Movabs | Lea | Cmp | Add | Sub | And | Xor | Shr => 2,
            Push | Pop | Call | Jmp | Ja | Jae | Jb | Jbe | Je | Jne | Jg | Jl => 1,
            Pushf | Popf | Ret | Nop | Hlt => 0,
        }
    }

    pub fn is_conditional_jump(self) -> bool {
        use Mnemonic::*;
        matches!(self, Ja | Jae | Jb | Jbe | Je | Jne | Jg | Jl)
    }

    /// Second opcode byte of the `0F 8x` rel32 form.
    pub(crate) fn jcc_opcode(self) -> Option<u8> {
        use Mnemonic::*;
        Some(match self {
            Jb => 0x82,
            Jae => 0x83,
            Je => 0x84,
            Jne => 0x85,
            Jbe => 0x86,
            Ja => 0x87,
            Jl => 0x8C,
            Jg => 0x8F,
            _ => return None,
        })
    }

    pub(crate) fn from_jcc_opcode(op: u8) -> Option<Mnemonic> {
        use Mnemonic::*;
        Some(match op {
            0x82 => Jb,
            0x83 => Jae,
            0x84 => Je,
            0x85 => Jne,
            0x86 => Jbe,
            0x87 => Ja,
            0x8C => Jl,
            0x8F => Jg,
            _ => return None,
        })
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub operands: Vec<Operand>,
    /// Encoded length in bytes (0 until assembled or decoded).
    pub length: u8,
    /// Offset of the first byte in the image.
    pub offset: u64,
}

impl Instruction {
    pub fn new(mnemonic: Mnemonic, operands: Vec<Operand>) -> Instruction {
        Instruction { mnemonic, operands, length: 0, offset: 0 }
    }

    pub fn op0(m: Mnemonic) -> Instruction {
        Instruction::new(m, Vec::new())
    }

    pub fn op1(m: Mnemonic, a: Operand) -> Instruction {
        Instruction::new(m, vec![a])
    }

    pub fn op2(m: Mnemonic, a: Operand, b: Operand) -> Instruction {
        Instruction::new(m, vec![a, b])
    }

    pub fn end(&self) -> u64 {
        self.offset + self.length as u64
    }

    /// Same instruction, ignoring placement.
    pub fn same_as(&self, other: &Instruction) -> bool {
        self.mnemonic == other.mnemonic && self.operands == other.operands
    }

    pub fn dst(&self) -> Option<&Operand> {
        self.operands.first()
    }

    pub fn src(&self) -> Option<&Operand> {
        self.operands.get(1)
    }

    /// Memory destination written by this instruction, if any.
    ///
    /// PUSH, POP and CALL write the stack implicitly and are not reported.
    pub fn memory_write(&self) -> Option<&Mem> {
        use Mnemonic::*;
        match self.mnemonic {
            Mov | Add | Sub | And | Xor => self.dst().and_then(Operand::as_mem),
            _ => None,
        }
    }

    /// True if the instruction names the stack pointer as its explicit destination.
    pub fn writes_rsp_explicitly(&self) -> bool {
        use Mnemonic::*;
        match self.mnemonic {
            Mov | Movabs | Lea | Add | Sub | And | Xor | Shr | Pop => {
                matches!(self.dst(), Some(Operand::Reg(Reg::Rsp)) | Some(Operand::Reg32(Reg::Rsp)))
            }
            _ => false,
        }
    }

    /// Indirect CALL/JMP through a register or memory operand.
    pub fn is_indirect_branch(&self) -> bool {
        matches!(self.mnemonic, Mnemonic::Call | Mnemonic::Jmp)
            && matches!(self.dst(), Some(Operand::Reg(_)) | Some(Operand::Mem(_)))
    }

    /// Any instruction that may redirect control flow.
    pub fn is_control_transfer(&self) -> bool {
        use Mnemonic::*;
        matches!(self.mnemonic, Call | Jmp | Ret | Hlt) || self.mnemonic.is_conditional_jump()
    }

    /// True if execution never falls through to the next instruction.
    pub fn ends_flow(&self) -> bool {
        matches!(self.mnemonic, Mnemonic::Jmp | Mnemonic::Ret | Mnemonic::Hlt)
    }

    /// Resolved direct target of a rel32 branch or call.
    pub fn direct_target(&self) -> Option<i64> {
        match (self.mnemonic, self.dst()) {
            (m, Some(Operand::Rel(t))) if m == Mnemonic::Call || m == Mnemonic::Jmp || m.is_conditional_jump() => {
                Some(*t)
            }
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic.name())?;
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            match (self.mnemonic, op) {
                // Full 64-bit immediates read better unsigned.
                (Mnemonic::Movabs, Operand::Imm(v)) => write!(f, "0x{:X}", *v as u64)?,
                (Mnemonic::Mov, Operand::Imm(v)) if matches!(self.dst(), Some(Operand::Reg32(_))) => {
                    write!(f, "0x{:X}", *v as u32)?
                }
                _ => write!(f, "{}", op)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_names_round_trip() {
        for r in Reg::ALL {
            assert_eq!(Reg::parse(r.name()), Some(r));
            assert_eq!(Reg::parse32(r.name32()), Some(r));
            assert_eq!(Reg::from_index(r.index()), r);
        }
        assert_eq!(Reg::parse("r16"), None);
    }

    #[test]
    fn memory_write_classification() {
        let store = Instruction::op2(
            Mnemonic::Mov,
            Operand::Mem(Mem::base_disp(Reg::Rbx, 8)),
            Operand::Reg(Reg::Rax),
        );
        assert!(store.memory_write().is_some());
        let load = Instruction::op2(
            Mnemonic::Mov,
            Operand::Reg(Reg::Rax),
            Operand::Mem(Mem::base_disp(Reg::Rbx, 8)),
        );
        assert!(load.memory_write().is_none());
        let cmp = Instruction::op2(Mnemonic::Cmp, Operand::Mem(Mem::base(Reg::Rbx)), Operand::Imm(1));
        assert!(cmp.memory_write().is_none());
        assert!(Instruction::op1(Mnemonic::Push, Operand::Reg(Reg::Rax)).memory_write().is_none());
    }

    #[test]
    fn rsp_write_classification() {
        let and = Instruction::op2(Mnemonic::And, Operand::Reg(Reg::Rsp), Operand::Imm(-16));
        assert!(and.writes_rsp_explicitly());
        let push = Instruction::op1(Mnemonic::Push, Operand::Reg(Reg::Rsp));
        assert!(!push.writes_rsp_explicitly());
        let cmp = Instruction::op2(Mnemonic::Cmp, Operand::Reg(Reg::Rsp), Operand::Reg(Reg::R10));
        assert!(!cmp.writes_rsp_explicitly());
    }
}
