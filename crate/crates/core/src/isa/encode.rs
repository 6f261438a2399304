use thiserror::Error;

use super::{Instruction, Mem, Mnemonic, Operand, Reg, Sym};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("operand mismatch: {0}")]
    OperandMismatch(String),
}

/// A symbolic slot the assembler or loader must patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fixup {
    /// 8-byte absolute address at `at` (relative to the instruction start).
    Abs64 { at: usize, sym: Sym },
    /// 4-byte displacement at `at`, measured from the end of the instruction.
    Rel32 { at: usize, sym: Sym },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub fixup: Option<Fixup>,
}

enum Rm<'a> {
    Reg(Reg),
    Mem(&'a Mem),
}

fn mismatch(instr: &Instruction) -> EncodeError {
    EncodeError::OperandMismatch(instr.to_string())
}

fn scale_bits(scale: u8) -> Option<u8> {
    match scale {
        1 => Some(0),
        2 => Some(1),
        4 => Some(2),
        8 => Some(3),
        _ => None,
    }
}

/// Emits `[REX] opcode ModRM [SIB] [disp]`.
fn emit_modrm(
    out: &mut Vec<u8>,
    rex_w: bool,
    opcode: &[u8],
    reg_field: u8,
    rm: Rm<'_>,
) -> Result<(), String> {
    let r = (reg_field >> 3) & 1;
    match rm {
        Rm::Reg(reg) => {
            let b = reg.index() >> 3;
            let rex = 0x40 | (rex_w as u8) << 3 | r << 2 | b;
            if rex != 0x40 {
                out.push(rex);
            }
            out.extend_from_slice(opcode);
            out.push(0xC0 | (reg_field & 7) << 3 | (reg.index() & 7));
        }
        Rm::Mem(mem) => {
            let base = mem.base.index();
            let (x, sib) = match mem.index {
                Some((idx, scale)) => {
                    if idx == Reg::Rsp {
                        return Err("rsp cannot be an index register".into());
                    }
                    let ss = scale_bits(scale).ok_or_else(|| format!("bad scale {}", scale))?;
                    (idx.index() >> 3, Some(ss << 6 | (idx.index() & 7) << 3 | (base & 7)))
                }
                None if base & 7 == 4 => (0, Some(0x24)),
                None => (0, None),
            };
            let b = base >> 3;
            let rex = 0x40 | (rex_w as u8) << 3 | r << 2 | x << 1 | b;
            if rex != 0x40 {
                out.push(rex);
            }
            out.extend_from_slice(opcode);
            let (md, disp): (u8, Vec<u8>) = if mem.disp == 0 && base & 7 != 5 {
                (0, Vec::new())
            } else if let Ok(d8) = i8::try_from(mem.disp) {
                (1, vec![d8 as u8])
            } else {
                (2, mem.disp.to_le_bytes().to_vec())
            };
            let rm_field = if sib.is_some() { 4 } else { base & 7 };
            out.push(md << 6 | (reg_field & 7) << 3 | rm_field);
            if let Some(s) = sib {
                out.push(s);
            }
            out.extend_from_slice(&disp);
        }
    }
    Ok(())
}

fn alu_opcodes(m: Mnemonic) -> Option<(u8, u8, u8)> {
    // (op r/m,r ; op r,r/m ; /digit for 81)
    Some(match m {
        Mnemonic::Add => (0x01, 0x03, 0),
        Mnemonic::And => (0x21, 0x23, 4),
        Mnemonic::Sub => (0x29, 0x2B, 5),
        Mnemonic::Xor => (0x31, 0x33, 6),
        Mnemonic::Cmp => (0x39, 0x3B, 7),
        _ => return None,
    })
}

fn imm32(v: i64) -> Option<[u8; 4]> {
    i32::try_from(v).ok().map(i32::to_le_bytes)
}

/// Length of the rel32 branch form for `m`, if it has one.
fn rel32_len(m: Mnemonic) -> usize {
    if m.is_conditional_jump() {
        6
    } else {
        5
    }
}

/// Encodes one instruction placed at image offset `offset`.
///
/// Label operands are encoded as zero bytes and reported through [`Fixup`].
pub fn encode_instruction(instr: &Instruction, offset: u64) -> Result<Encoded, EncodeError> {
    use Mnemonic::*;
    let ops = instr.operands.as_slice();
    if ops.len() != instr.mnemonic.arity() {
        return Err(mismatch(instr));
    }
    let mut out = Vec::with_capacity(12);
    let mut fixup = None;
    let err = |_: String| mismatch(instr);

    match (instr.mnemonic, ops) {
        (Mov, [Operand::Reg(d), Operand::Reg(s)]) => {
            emit_modrm(&mut out, true, &[0x89], s.index(), Rm::Reg(*d)).map_err(err)?
        }
        (Mov, [Operand::Mem(m), Operand::Reg(s)]) => {
            emit_modrm(&mut out, true, &[0x89], s.index(), Rm::Mem(m)).map_err(err)?
        }
        (Mov, [Operand::Reg(d), Operand::Mem(m)]) => {
            emit_modrm(&mut out, true, &[0x8B], d.index(), Rm::Mem(m)).map_err(err)?
        }
        (Mov, [Operand::Reg(d), Operand::Imm(v)]) => {
            let imm = imm32(*v).ok_or_else(|| mismatch(instr))?;
            emit_modrm(&mut out, true, &[0xC7], 0, Rm::Reg(*d)).map_err(err)?;
            out.extend_from_slice(&imm);
        }
        (Mov, [Operand::Mem(m), Operand::Imm(v)]) => {
            let imm = imm32(*v).ok_or_else(|| mismatch(instr))?;
            emit_modrm(&mut out, true, &[0xC7], 0, Rm::Mem(m)).map_err(err)?;
            out.extend_from_slice(&imm);
        }
        (Mov, [Operand::Reg32(d), Operand::Imm(v)]) => {
            let imm = u32::try_from(*v).map_err(|_| mismatch(instr))?;
            if d.index() >= 8 {
                out.push(0x41);
            }
            out.push(0xB8 + (d.index() & 7));
            out.extend_from_slice(&imm.to_le_bytes());
        }
        (Movabs, [Operand::Reg(d), src @ (Operand::Imm(_) | Operand::Label(_))]) => {
            out.push(0x48 | d.index() >> 3);
            out.push(0xB8 + (d.index() & 7));
            match src {
                Operand::Imm(v) => out.extend_from_slice(&v.to_le_bytes()),
                Operand::Label(sym) => {
                    fixup = Some(Fixup::Abs64 { at: out.len(), sym: sym.clone() });
                    out.extend_from_slice(&[0; 8]);
                }
                _ => unreachable!(),
            }
        }
        (Lea, [Operand::Reg(d), Operand::Mem(m)]) => {
            emit_modrm(&mut out, true, &[0x8D], d.index(), Rm::Mem(m)).map_err(err)?
        }
        (m @ (Add | Sub | And | Xor | Cmp), [dst, src]) => {
            let (rm_r, r_rm, digit) = alu_opcodes(m).expect("alu mnemonic");
            match (dst, src) {
                (Operand::Reg(d), Operand::Reg(s)) => {
                    emit_modrm(&mut out, true, &[rm_r], s.index(), Rm::Reg(*d)).map_err(err)?
                }
                (Operand::Mem(mem), Operand::Reg(s)) => {
                    emit_modrm(&mut out, true, &[rm_r], s.index(), Rm::Mem(mem)).map_err(err)?
                }
                (Operand::Reg(d), Operand::Mem(mem)) => {
                    emit_modrm(&mut out, true, &[r_rm], d.index(), Rm::Mem(mem)).map_err(err)?
                }
                (Operand::Reg(d), Operand::Imm(v)) => {
                    let imm = imm32(*v).ok_or_else(|| mismatch(instr))?;
                    emit_modrm(&mut out, true, &[0x81], digit, Rm::Reg(*d)).map_err(err)?;
                    out.extend_from_slice(&imm);
                }
                (Operand::Mem(mem), Operand::Imm(v)) => {
                    let imm = imm32(*v).ok_or_else(|| mismatch(instr))?;
                    emit_modrm(&mut out, true, &[0x81], digit, Rm::Mem(mem)).map_err(err)?;
                    out.extend_from_slice(&imm);
                }
                _ => return Err(mismatch(instr)),
            }
        }
        (Shr, [Operand::Reg(d), Operand::Imm(v)]) => {
            if !(0..64).contains(v) {
                return Err(mismatch(instr));
            }
            emit_modrm(&mut out, true, &[0xC1], 5, Rm::Reg(*d)).map_err(err)?;
            out.push(*v as u8);
        }
        (Push, [Operand::Reg(r)]) | (Pop, [Operand::Reg(r)]) => {
            if r.index() >= 8 {
                out.push(0x41);
            }
            let base = if instr.mnemonic == Push { 0x50 } else { 0x58 };
            out.push(base + (r.index() & 7));
        }
        (Pushf, []) => out.push(0x9C),
        (Popf, []) => out.push(0x9D),
        (Ret, []) => out.push(0xC3),
        (Nop, []) => out.push(0x90),
        (Hlt, []) => out.push(0xF4),
        (m @ (Call | Jmp), [Operand::Reg(r)]) => {
            let digit = if m == Call { 2 } else { 4 };
            emit_modrm(&mut out, false, &[0xFF], digit, Rm::Reg(*r)).map_err(err)?
        }
        (m @ (Call | Jmp), [Operand::Mem(mem)]) => {
            let digit = if m == Call { 2 } else { 4 };
            emit_modrm(&mut out, false, &[0xFF], digit, Rm::Mem(mem)).map_err(err)?
        }
        (m, [target @ (Operand::Rel(_) | Operand::Label(_))])
            if m == Call || m == Jmp || m.is_conditional_jump() =>
        {
            match m {
                Call => out.push(0xE8),
                Jmp => out.push(0xE9),
                _ => out.extend_from_slice(&[0x0F, m.jcc_opcode().expect("jcc")]),
            }
            let at = out.len();
            match target {
                Operand::Rel(t) => {
                    let next = offset as i64 + rel32_len(m) as i64;
                    let disp = i32::try_from(t - next).map_err(|_| mismatch(instr))?;
                    out.extend_from_slice(&disp.to_le_bytes());
                }
                Operand::Label(sym) => {
                    fixup = Some(Fixup::Rel32 { at, sym: sym.clone() });
                    out.extend_from_slice(&[0; 4]);
                }
                _ => unreachable!(),
            }
        }
        _ => return Err(mismatch(instr)),
    }
    Ok(Encoded { bytes: out, fixup })
}

/// Encoded length without resolving any label.
pub fn encoded_length(instr: &Instruction) -> Result<usize, EncodeError> {
    encode_instruction(instr, 0).map(|e| e.bytes.len())
}
