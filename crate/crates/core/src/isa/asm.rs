//! Text assembler for the subset.
//!
//! Syntax: one instruction per line, destination first, `name:` labels,
//! `;` or `#` comments, and the directives `.global name` and `.quad value`.
//! Memory operands are written `[base+index*scale+disp]`, optionally
//! prefixed with `qword` / `qword ptr`. A leading `*` on an indirect branch
//! operand (`call *rbx`) is accepted and ignored.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::encode::{encode_instruction, EncodeError, Fixup};
use super::{Instruction, Mem, Mnemonic, Operand, Reg, Sym};
use crate::bundle::RelocKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("operand mismatch: {0}")]
    OperandMismatch(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("syntax error: {0}")]
    Syntax(String),
}

/// Assembler error; `line` is 1-based, or 0 for programmatic input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

impl AsmError {
    fn new(line: usize, kind: AsmErrorKind) -> AsmError {
        AsmError { line, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Label(String),
    Global(String),
    Instr(Instruction),
    /// Eight literal bytes: an immediate or the absolute address of a label.
    Quad(Operand),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmReloc {
    pub offset: u64,
    pub symbol: String,
    pub kind: RelocKind,
    pub addend: i64,
}

#[derive(Debug, Clone, Default)]
pub struct Assembled {
    pub code: Vec<u8>,
    /// Defined labels and their offsets.
    pub labels: BTreeMap<String, u64>,
    pub globals: Vec<String>,
    /// Symbols referenced but not defined, in first-use order.
    pub externals: Vec<String>,
    pub relocations: Vec<AsmReloc>,
    /// Emitted instructions, placed, with local branch labels resolved.
    pub instructions: Vec<Instruction>,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$'
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_ident_start(c))
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, s.strip_prefix('+').unwrap_or(s).trim()),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()?
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse::<u64>().ok()?
    } else {
        return None;
    };
    let v = magnitude as i64;
    Some(if neg { v.wrapping_neg() } else { v })
}

fn parse_mem(inner: &str, line: usize) -> Result<Mem, AsmError> {
    let syntax = |msg: String| AsmError::new(line, AsmErrorKind::Syntax(msg));
    // Split into signed terms.
    let mut terms: Vec<(bool, String)> = Vec::new();
    let mut current = String::new();
    let mut negative = false;
    for c in inner.chars().filter(|c| !c.is_whitespace()) {
        if c == '+' || c == '-' {
            if !current.is_empty() {
                terms.push((negative, std::mem::take(&mut current)));
            }
            negative = c == '-';
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        terms.push((negative, current));
    }
    let mut base = None;
    let mut index = None;
    let mut disp: i64 = 0;
    for (neg, term) in terms {
        if let Some((r, scale)) = term.split_once('*') {
            let reg = Reg::parse(r).ok_or_else(|| syntax(format!("bad index register `{}`", r)))?;
            let scale = parse_number(scale)
                .filter(|s| matches!(s, 1 | 2 | 4 | 8))
                .ok_or_else(|| syntax(format!("bad scale in `{}`", term)))?;
            if neg || index.is_some() {
                return Err(syntax(format!("bad memory operand `[{}]`", inner)));
            }
            index = Some((reg, scale as u8));
        } else if let Some(reg) = Reg::parse(&term) {
            if neg {
                return Err(syntax(format!("negated register in `[{}]`", inner)));
            }
            if base.is_none() {
                base = Some(reg);
            } else if index.is_none() {
                index = Some((reg, 1));
            } else {
                return Err(syntax(format!("too many registers in `[{}]`", inner)));
            }
        } else if let Some(v) = parse_number(&term) {
            disp = if neg { disp.wrapping_sub(v) } else { disp.wrapping_add(v) };
        } else {
            return Err(syntax(format!("bad memory term `{}`", term)));
        }
    }
    let base = base.ok_or_else(|| syntax(format!("memory operand `[{}]` needs a base register", inner)))?;
    let disp = i32::try_from(disp).map_err(|_| syntax(format!("displacement out of range in `[{}]`", inner)))?;
    Ok(Mem { base, index, disp })
}

fn parse_operand(text: &str, line: usize) -> Result<Operand, AsmError> {
    let mut t = text.trim();
    t = t.strip_prefix('*').unwrap_or(t).trim();
    let lower = t.to_ascii_lowercase();
    if let Some(rest) = lower.strip_prefix("qword") {
        let rest = rest.trim_start();
        let rest = rest.strip_prefix("ptr").unwrap_or(rest).trim_start();
        t = &t[t.len() - rest.len()..];
    }
    if let Some(inner) = t.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| AsmError::new(line, AsmErrorKind::Syntax(format!("unterminated `{}`", t))))?;
        return parse_mem(inner, line).map(Operand::Mem);
    }
    if let Some(r) = Reg::parse(t) {
        return Ok(Operand::Reg(r));
    }
    if let Some(r) = Reg::parse32(t) {
        return Ok(Operand::Reg32(r));
    }
    if let Some(v) = parse_number(t) {
        return Ok(Operand::Imm(v));
    }
    // label, label+N, label-N
    let split = t[1..].find(['+', '-']).map(|i| i + 1);
    let (name, addend) = match split {
        Some(i) => {
            let addend = parse_number(&t[i..])
                .ok_or_else(|| AsmError::new(line, AsmErrorKind::Syntax(format!("bad operand `{}`", t))))?;
            (t[..i].trim(), addend)
        }
        None => (t, 0),
    };
    if is_ident(name) {
        Ok(Operand::Label(Sym { name: name.to_string(), addend }))
    } else {
        Err(AsmError::new(line, AsmErrorKind::Syntax(format!("bad operand `{}`", t))))
    }
}

fn split_operands(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(text[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    let last = text[start..].trim();
    if !last.is_empty() || !parts.is_empty() {
        parts.push(last);
    }
    parts
}

fn parse_instruction(text: &str, line: usize) -> Result<Instruction, AsmError> {
    let (head, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], text[i..].trim()),
        None => (text, ""),
    };
    let mnemonic =
        Mnemonic::parse(head).ok_or_else(|| AsmError::new(line, AsmErrorKind::UnknownMnemonic(head.to_string())))?;
    let mut operands = split_operands(rest)
        .into_iter()
        .map(|op| parse_operand(op, line))
        .collect::<Result<Vec<_>, _>>()?;
    if operands.len() != mnemonic.arity() {
        return Err(AsmError::new(
            line,
            AsmErrorKind::OperandMismatch(format!("`{}` expects {} operand(s)", head, mnemonic.arity())),
        ));
    }
    // Numeric branch operands are absolute image offsets.
    let is_branch = matches!(mnemonic, Mnemonic::Call | Mnemonic::Jmp) || mnemonic.is_conditional_jump();
    if is_branch {
        if let Some(Operand::Imm(v)) = operands.first() {
            operands[0] = Operand::Rel(*v);
        }
    }
    Ok(Instruction::new(mnemonic, operands))
}

/// Parses assembly text into statements, paired with 1-based line numbers.
pub fn parse_source(source: &str) -> Result<Vec<(usize, Stmt)>, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in source.lines().enumerate() {
        let line = i + 1;
        let mut text = raw;
        if let Some(pos) = text.find([';', '#']) {
            text = &text[..pos];
        }
        let mut text = text.trim();
        // Leading labels, possibly followed by an instruction.
        while let Some(pos) = text.find(':') {
            let name = text[..pos].trim();
            if !is_ident(name) {
                break;
            }
            out.push((line, Stmt::Label(name.to_string())));
            text = text[pos + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        if let Some(directive) = text.strip_prefix('.') {
            let (name, arg) = match directive.find(char::is_whitespace) {
                Some(p) => (&directive[..p], directive[p..].trim()),
                None => (directive, ""),
            };
            match name {
                "global" | "globl" if is_ident(arg) => out.push((line, Stmt::Global(arg.to_string()))),
                "quad" => {
                    let op = parse_operand(arg, line)?;
                    if !matches!(op, Operand::Imm(_) | Operand::Label(_)) {
                        return Err(AsmError::new(
                            line,
                            AsmErrorKind::OperandMismatch(format!(".quad takes a number or label, got `{}`", arg)),
                        ));
                    }
                    out.push((line, Stmt::Quad(op)));
                }
                _ => {
                    return Err(AsmError::new(line, AsmErrorKind::Syntax(format!("unknown directive `.{}`", name))))
                }
            }
            continue;
        }
        out.push((line, Stmt::Instr(parse_instruction(text, line)?)));
    }
    Ok(out)
}

fn stmt_len(stmt: &Stmt, line: usize) -> Result<usize, AsmError> {
    match stmt {
        Stmt::Label(_) | Stmt::Global(_) => Ok(0),
        Stmt::Quad(_) => Ok(8),
        Stmt::Instr(i) => encode_instruction(i, 0)
            .map(|e| e.bytes.len())
            .map_err(|EncodeError::OperandMismatch(m)| AsmError::new(line, AsmErrorKind::OperandMismatch(m))),
    }
}

/// Assembles statements (with optional line numbers) into a relocatable image.
///
/// Branches to local labels are resolved to rel32 displacements. Absolute
/// label references (`movabs reg, label`, `.quad label`) become Abs64
/// relocations. Calls and `movabs` to undefined names become external
/// relocations; jumps to undefined names are errors.
pub fn assemble<'a, I>(stmts: I) -> Result<Assembled, AsmError>
where
    I: IntoIterator<Item = (usize, &'a Stmt)>,
{
    let stmts: Vec<(usize, &Stmt)> = stmts.into_iter().collect();
    let mut labels = BTreeMap::new();
    let mut offset = 0u64;
    for (line, stmt) in &stmts {
        if let Stmt::Label(name) = stmt {
            if labels.insert(name.clone(), offset).is_some() {
                return Err(AsmError::new(*line, AsmErrorKind::DuplicateLabel(name.clone())));
            }
        }
        offset += stmt_len(stmt, *line)? as u64;
    }

    let mut out = Assembled { labels, ..Default::default() };
    let mut externals = BTreeSet::new();
    let mut note_external = |name: &str, out: &mut Assembled| {
        if externals.insert(name.to_string()) {
            out.externals.push(name.to_string());
        }
    };

    for (line, stmt) in stmts {
        let here = out.code.len() as u64;
        match stmt {
            Stmt::Label(_) => {}
            Stmt::Global(name) => out.globals.push(name.clone()),
            Stmt::Quad(Operand::Imm(v)) => out.code.extend_from_slice(&v.to_le_bytes()),
            Stmt::Quad(Operand::Label(sym)) => {
                if !out.labels.contains_key(&sym.name) {
                    note_external(&sym.name, &mut out);
                }
                out.relocations.push(AsmReloc {
                    offset: here,
                    symbol: sym.name.clone(),
                    kind: RelocKind::Abs64,
                    addend: sym.addend,
                });
                out.code.extend_from_slice(&[0; 8]);
            }
            Stmt::Quad(_) => unreachable!("rejected by parser"),
            Stmt::Instr(instr) => {
                let mut resolved = instr.clone();
                // Local branch labels become rel32 targets.
                if let Some(Operand::Label(sym)) = instr.operands.first() {
                    let is_branch =
                        matches!(instr.mnemonic, Mnemonic::Call | Mnemonic::Jmp) || instr.mnemonic.is_conditional_jump();
                    if is_branch {
                        match out.labels.get(&sym.name) {
                            Some(&target) => resolved.operands[0] = Operand::Rel(target as i64 + sym.addend),
                            None if instr.mnemonic == Mnemonic::Call => {}
                            None => {
                                return Err(AsmError::new(line, AsmErrorKind::UndefinedLabel(sym.name.clone())))
                            }
                        }
                    }
                }
                let enc = encode_instruction(&resolved, here)
                    .map_err(|EncodeError::OperandMismatch(m)| AsmError::new(line, AsmErrorKind::OperandMismatch(m)))?;
                match &enc.fixup {
                    Some(Fixup::Abs64 { at, sym }) => {
                        if !out.labels.contains_key(&sym.name) {
                            note_external(&sym.name, &mut out);
                        }
                        out.relocations.push(AsmReloc {
                            offset: here + *at as u64,
                            symbol: sym.name.clone(),
                            kind: RelocKind::Abs64,
                            addend: sym.addend,
                        });
                    }
                    Some(Fixup::Rel32 { at, sym }) => {
                        note_external(&sym.name, &mut out);
                        out.relocations.push(AsmReloc {
                            offset: here + *at as u64,
                            symbol: sym.name.clone(),
                            kind: RelocKind::Rel32,
                            // displacement is taken from the end of the 4-byte field
                            addend: sym.addend - 4,
                        });
                    }
                    None => {}
                }
                resolved.offset = here;
                resolved.length = enc.bytes.len() as u8;
                out.code.extend_from_slice(&enc.bytes);
                out.instructions.push(resolved);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::decode_instruction;

    fn asm(src: &str) -> Assembled {
        let stmts = parse_source(src).unwrap();
        assemble(stmts.iter().map(|(l, s)| (*l, s))).unwrap()
    }

    fn asm_err(src: &str) -> AsmErrorKind {
        let stmts = match parse_source(src) {
            Ok(s) => s,
            Err(e) => return e.kind,
        };
        assemble(stmts.iter().map(|(l, s)| (*l, s))).unwrap_err().kind
    }

    #[test]
    fn ret_is_c3() {
        assert_eq!(asm("ret").code, vec![0xC3]);
    }

    #[test]
    fn movabs_placeholder() {
        let out = asm("movabs r11, 0x3FFFFFFFFFFFFFFF");
        assert_eq!(out.code.len(), 10);
        assert_eq!(&out.code[2..], &0x3FFF_FFFF_FFFF_FFFFu64.to_le_bytes());
    }

    #[test]
    fn labels_resolve_to_rel32() {
        let out = asm("start:\n  nop\n  jmp start\n  call start\n");
        let jmp = decode_instruction(&out.code, 1).unwrap();
        assert_eq!(jmp.direct_target(), Some(0));
        let call = decode_instruction(&out.code, jmp.end()).unwrap();
        assert_eq!(call.direct_target(), Some(0));
        assert!(out.relocations.is_empty());
    }

    #[test]
    fn external_call_and_absolute_label() {
        let out = asm(".global main\nmain:\n  movabs rax, main\n  call ocall_send\n  ret\n  .quad main+8\n");
        assert_eq!(out.globals, vec!["main".to_string()]);
        assert_eq!(out.externals, vec!["ocall_send".to_string()]);
        let kinds: Vec<_> = out.relocations.iter().map(|r| (r.offset, r.kind, r.addend)).collect();
        assert_eq!(kinds, vec![(2, RelocKind::Abs64, 0), (11, RelocKind::Rel32, -4), (16, RelocKind::Abs64, 8)]);
    }

    #[test]
    fn memory_operand_forms() {
        let stmts = parse_source("mov qword ptr [rbx+rcx*8-0x10], 5\nlea r10, [rsp+24]\ncall *rbx").unwrap();
        let Stmt::Instr(i) = &stmts[0].1 else { panic!() };
        assert_eq!(
            i.operands[0],
            Operand::Mem(Mem { base: Reg::Rbx, index: Some((Reg::Rcx, 8)), disp: -16 })
        );
        let Stmt::Instr(c) = &stmts[2].1 else { panic!() };
        assert_eq!(c.operands[0], Operand::Reg(Reg::Rbx));
    }

    #[test]
    fn errors() {
        assert_eq!(asm_err("frobnicate rax"), AsmErrorKind::UnknownMnemonic("frobnicate".into()));
        assert_eq!(asm_err("jmp nowhere"), AsmErrorKind::UndefinedLabel("nowhere".into()));
        assert!(matches!(asm_err("mov rax"), AsmErrorKind::OperandMismatch(_)));
        assert!(matches!(asm_err("mov rax, 0x123456789"), AsmErrorKind::OperandMismatch(_)));
        assert!(matches!(asm_err("a:\na:\n"), AsmErrorKind::DuplicateLabel(_)));
    }

    #[test]
    fn display_reparses() {
        let src = "mov qword [rbx+rcx*8-0x10], 5\nmovabs r11, 0x3FFFFFFFFFFFFFFF\nmov edi, 0xFFFFFFFF\nand rsp, -16\njmp 0x20";
        for (_, stmt) in parse_source(src).unwrap() {
            let Stmt::Instr(i) = stmt else { panic!() };
            let again = parse_source(&i.to_string()).unwrap();
            assert_eq!(again, vec![(1, Stmt::Instr(i))]);
        }
    }
}
