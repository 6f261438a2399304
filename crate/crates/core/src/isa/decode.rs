use thiserror::Error;

use super::{Instruction, Mem, Mnemonic, Operand, Reg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("undecodable byte 0x{byte:02X} at offset 0x{offset:X}")]
    UndecodableByte { offset: u64, byte: u8 },
    #[error("truncated instruction at offset 0x{offset:X}")]
    Truncated { offset: u64 },
}

struct Cursor<'a> {
    image: &'a [u8],
    start: usize,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn truncated(&self) -> DecodeError {
        DecodeError::Truncated { offset: self.start as u64 }
    }

    fn bad(&self, byte: u8) -> DecodeError {
        DecodeError::UndecodableByte { offset: self.start as u64, byte }
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self.image.get(self.pos).ok_or_else(|| self.truncated())?;
        self.pos += 1;
        Ok(b)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let end = self.pos.checked_add(N).ok_or_else(|| self.truncated())?;
        let bytes = self.image.get(self.pos..end).ok_or_else(|| self.truncated())?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn i32(&mut self) -> Result<i32, DecodeError> {
        self.take::<4>().map(i32::from_le_bytes)
    }
}

#[derive(Clone, Copy, Default)]
struct Rex {
    present: bool,
    w: bool,
    r: u8,
    x: u8,
    b: u8,
}

/// Decoded ModRM: the `reg` field (with REX.R) and the r/m operand.
struct ModRm {
    reg: u8,
    rm: Operand,
}

fn read_modrm(cur: &mut Cursor<'_>, rex: Rex, opcode: u8) -> Result<ModRm, DecodeError> {
    let modrm = cur.u8()?;
    let md = modrm >> 6;
    let reg = (modrm >> 3 & 7) | rex.r << 3;
    let rm = modrm & 7;
    if md == 3 {
        return Ok(ModRm { reg, rm: Operand::Reg(Reg::from_index(rm | rex.b << 3)) });
    }
    let (base, index) = if rm == 4 {
        let sib = cur.u8()?;
        let scale = 1u8 << (sib >> 6);
        let idx = (sib >> 3 & 7) | rex.x << 3;
        let base = sib & 7;
        if base == 5 && md == 0 {
            // no-base form: disp32 absolute, outside the subset
            return Err(cur.bad(opcode));
        }
        let index = if idx == 4 { None } else { Some((Reg::from_index(idx), scale)) };
        (Reg::from_index(base | rex.b << 3), index)
    } else {
        if rm == 5 && md == 0 {
            // rip-relative, outside the subset
            return Err(cur.bad(opcode));
        }
        (Reg::from_index(rm | rex.b << 3), None)
    };
    let disp = match md {
        0 => 0,
        1 => cur.u8()? as i8 as i32,
        _ => cur.i32()?,
    };
    Ok(ModRm { reg, rm: Operand::Mem(Mem { base, index, disp }) })
}

/// Decodes the subset instruction starting at `offset`.
///
/// Rel32 targets are reported as image-relative offsets; everything else is
/// position independent.
pub fn decode_instruction(image: &[u8], offset: u64) -> Result<Instruction, DecodeError> {
    use Mnemonic::*;
    let start = usize::try_from(offset).map_err(|_| DecodeError::Truncated { offset })?;
    if start >= image.len() {
        return Err(DecodeError::Truncated { offset });
    }
    let mut cur = Cursor { image, start, pos: start };
    let mut rex = Rex::default();
    let mut op = cur.u8()?;
    if (0x40..=0x4F).contains(&op) {
        rex = Rex {
            present: true,
            w: op & 8 != 0,
            r: op >> 2 & 1,
            x: op >> 1 & 1,
            b: op & 1,
        };
        op = cur.u8()?;
    }
    let reg_of = |r: u8| Operand::Reg(Reg::from_index(r));
    let need_w = |cur: &Cursor<'_>| if rex.w { Ok(()) } else { Err(cur.bad(op)) };

    let (mnemonic, operands) = match op {
        0x89 => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            (Mov, vec![m.rm, reg_of(m.reg)])
        }
        0x8B => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            (Mov, vec![reg_of(m.reg), m.rm])
        }
        0xC7 => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            if m.reg & 7 != 0 {
                return Err(cur.bad(op));
            }
            let imm = cur.i32()? as i64;
            (Mov, vec![m.rm, Operand::Imm(imm)])
        }
        0xB8..=0xBF => {
            let r = Reg::from_index((op - 0xB8) | rex.b << 3);
            if rex.w {
                let imm = i64::from_le_bytes(cur.take::<8>()?);
                (Movabs, vec![Operand::Reg(r), Operand::Imm(imm)])
            } else {
                let imm = u32::from_le_bytes(cur.take::<4>()?) as i64;
                (Mov, vec![Operand::Reg32(r), Operand::Imm(imm)])
            }
        }
        0x8D => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            if !matches!(m.rm, Operand::Mem(_)) {
                return Err(cur.bad(op));
            }
            (Lea, vec![reg_of(m.reg), m.rm])
        }
        0x01 | 0x21 | 0x29 | 0x31 | 0x39 => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            (alu_mnemonic(op), vec![m.rm, reg_of(m.reg)])
        }
        0x03 | 0x23 | 0x2B | 0x33 | 0x3B => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            (alu_mnemonic(op - 2), vec![reg_of(m.reg), m.rm])
        }
        0x81 => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            let mn = match m.reg & 7 {
                0 => Add,
                4 => And,
                5 => Sub,
                6 => Xor,
                7 => Cmp,
                _ => return Err(cur.bad(op)),
            };
            let imm = cur.i32()? as i64;
            (mn, vec![m.rm, Operand::Imm(imm)])
        }
        0xC1 => {
            need_w(&cur)?;
            let m = read_modrm(&mut cur, rex, op)?;
            if m.reg & 7 != 5 || !matches!(m.rm, Operand::Reg(_)) {
                return Err(cur.bad(op));
            }
            let count = cur.u8()?;
            if count >= 64 {
                return Err(cur.bad(op));
            }
            (Shr, vec![m.rm, Operand::Imm(count as i64)])
        }
        0x50..=0x57 => (Push, vec![Operand::Reg(Reg::from_index((op - 0x50) | rex.b << 3))]),
        0x58..=0x5F => (Pop, vec![Operand::Reg(Reg::from_index((op - 0x58) | rex.b << 3))]),
        0xFF => {
            let m = read_modrm(&mut cur, rex, op)?;
            match m.reg & 7 {
                2 => (Call, vec![m.rm]),
                4 => (Jmp, vec![m.rm]),
                _ => return Err(cur.bad(op)),
            }
        }
        _ if rex.present => return Err(cur.bad(op)),
        0x9C => (Pushf, vec![]),
        0x9D => (Popf, vec![]),
        0xC3 => (Ret, vec![]),
        0x90 => (Nop, vec![]),
        0xF4 => (Hlt, vec![]),
        0xE8 | 0xE9 => {
            let disp = cur.i32()? as i64;
            let target = cur.pos as i64 + disp;
            (if op == 0xE8 { Call } else { Jmp }, vec![Operand::Rel(target)])
        }
        0x0F => {
            let op2 = cur.u8()?;
            let mn = Mnemonic::from_jcc_opcode(op2).ok_or_else(|| cur.bad(op))?;
            let disp = cur.i32()? as i64;
            let target = cur.pos as i64 + disp;
            (mn, vec![Operand::Rel(target)])
        }
        _ => return Err(cur.bad(op)),
    };

    Ok(Instruction {
        mnemonic,
        operands,
        length: (cur.pos - start) as u8,
        offset,
    })
}

fn alu_mnemonic(op: u8) -> Mnemonic {
    match op {
        0x01 => Mnemonic::Add,
        0x21 => Mnemonic::And,
        0x29 => Mnemonic::Sub,
        0x31 => Mnemonic::Xor,
        _ => Mnemonic::Cmp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_r10() {
        let i = decode_instruction(&[0x41, 0x52], 0).unwrap();
        assert_eq!(i.mnemonic, Mnemonic::Push);
        assert_eq!(i.operands, vec![Operand::Reg(Reg::R10)]);
        assert_eq!(i.length, 2);
    }

    #[test]
    fn lone_ff_is_rejected() {
        let err = decode_instruction(&[0xFF], 0).unwrap_err();
        assert!(matches!(err, DecodeError::Truncated { .. } | DecodeError::UndecodableByte { .. }));
    }

    #[test]
    fn escape_byte_outside_subset() {
        // ud2
        assert_eq!(
            decode_instruction(&[0x0F, 0x0B], 0),
            Err(DecodeError::UndecodableByte { offset: 0, byte: 0x0F })
        );
        assert_eq!(decode_instruction(&[0x0F], 0), Err(DecodeError::Truncated { offset: 0 }));
    }

    #[test]
    fn rejects_rip_relative_and_32bit_alu() {
        // mov rax, [rip+0]
        assert!(decode_instruction(&[0x48, 0x8B, 0x05, 0, 0, 0, 0], 0).is_err());
        // mov eax, ebx (no REX.W)
        assert!(decode_instruction(&[0x89, 0xD8], 0).is_err());
        // rex-prefixed ret
        assert!(decode_instruction(&[0x48, 0xC3], 0).is_err());
    }

    #[test]
    fn branch_targets_are_image_relative() {
        let image = [0x90, 0x90, 0xE8, 0xFB, 0xFF, 0xFF, 0xFF];
        let i = decode_instruction(&image, 2).unwrap();
        assert_eq!(i.mnemonic, Mnemonic::Call);
        assert_eq!(i.direct_target(), Some(2));
        assert_eq!(i.offset, 2);
    }

    #[test]
    fn offset_past_end() {
        assert_eq!(decode_instruction(&[0x90], 1), Err(DecodeError::Truncated { offset: 1 }));
    }
}
