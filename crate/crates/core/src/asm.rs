//! Two-pass assembler for the toy ISA.
//!
//! ```text
//! .id  demo            # optional program id
//! loop:                # label definition (may share a line with an instruction)
//!     ld   r5, [r1+1]
//!     bne  r5, r0, else
//!     j    loop
//! ```
//!
//! Branch targets may be labels or absolute addresses (`0x...` or decimal),
//! which is what the disassembler emits.

use std::collections::{BTreeMap, HashMap};

use crate::addr::{parse_u32_literal, Addr};
use crate::isa::{Cond, Instruction, Program, ProgramError, Reg, BASE_ADDR, WORD_BYTES};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmErrorKind {
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("`{mnemonic}` expects {expected} operand(s), found {found}")]
    OperandCount {
        mnemonic: String,
        expected: usize,
        found: usize,
    },
    #[error("bad operand `{0}`")]
    BadOperand(String),
    #[error("bad directive `{0}`")]
    BadDirective(String),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    /// 1-based source line; 0 for whole-program errors.
    pub line: usize,
    pub kind: AsmErrorKind,
}

fn err(line: usize, kind: AsmErrorKind) -> AsmError {
    AsmError { line, kind }
}

struct SourceLine<'a> {
    number: usize,
    text: &'a str,
}

/// Assemble `text` into a [`Program`]. The id defaults to `"anonymous"` unless
/// an `.id` directive is present.
pub fn parse_program(text: &str) -> Result<Program, AsmError> {
    assemble(text).map(|(p, _)| p)
}

/// Like [`parse_program`], also returning the label table.
pub fn assemble(text: &str) -> Result<(Program, BTreeMap<String, Addr>), AsmError> {
    let mut id = String::from("anonymous");
    let mut labels: HashMap<&str, Addr> = HashMap::new();
    let mut body: Vec<SourceLine<'_>> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        let mut line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(".id") {
            let name = rest.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err(number, AsmErrorKind::BadDirective(line.to_string())));
            }
            id = name.to_string();
            continue;
        }
        if line.starts_with('.') {
            return Err(err(number, AsmErrorKind::BadDirective(line.to_string())));
        }
        while let Some((label, rest)) = split_label(line) {
            let addr = Addr(BASE_ADDR.0 + body.len() as u32 * WORD_BYTES);
            if labels.insert(label, addr).is_some() {
                return Err(err(number, AsmErrorKind::DuplicateLabel(label.to_string())));
            }
            line = rest.trim();
        }
        if !line.is_empty() {
            body.push(SourceLine { number, text: line });
        }
    }

    let resolve = |name: &str| labels.get(name).copied();
    let instructions = body
        .iter()
        .map(|l| assemble_line(l.text, &resolve).map_err(|k| err(l.number, k)))
        .collect::<Result<Vec<_>, _>>()?;
    let program = Program::new(id, instructions).map_err(|e| err(0, e.into()))?;
    let symbols = labels.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok((program, symbols))
}

/// Parse one instruction whose targets are numeric addresses.
pub fn parse_instruction(text: &str) -> Result<Instruction, AsmErrorKind> {
    assemble_line(text.trim(), &|_| None)
}

fn split_label(line: &str) -> Option<(&str, &str)> {
    let colon = line.find(':')?;
    let label = line[..colon].trim();
    let valid = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        && !label.starts_with(|c: char| c.is_ascii_digit());
    valid.then(|| (label, &line[colon + 1..]))
}

fn assemble_line(
    line: &str,
    resolve: &dyn Fn(&str) -> Option<Addr>,
) -> Result<Instruction, AsmErrorKind> {
    let (mnemonic, rest) = match line.find(char::is_whitespace) {
        Some(i) => (&line[..i], line[i..].trim()),
        None => (line, ""),
    };
    let ops: Vec<&str> = if rest.is_empty() {
        Vec::new()
    } else {
        rest.split(',').map(str::trim).collect()
    };
    let want = |n: usize| {
        if ops.len() == n {
            Ok(())
        } else {
            Err(AsmErrorKind::OperandCount {
                mnemonic: mnemonic.to_string(),
                expected: n,
                found: ops.len(),
            })
        }
    };
    let target = |s: &str| -> Result<Addr, AsmErrorKind> {
        if s.starts_with(|c: char| c.is_ascii_digit()) {
            parse_u32_literal(s)
                .map(Addr)
                .ok_or_else(|| AsmErrorKind::BadOperand(s.to_string()))
        } else {
            resolve(s).ok_or_else(|| AsmErrorKind::UnresolvedLabel(s.to_string()))
        }
    };

    use Instruction::*;
    let ins = match mnemonic {
        "add" | "sub" => {
            want(3)?;
            let (rd, rs1, rs2) = (reg(ops[0])?, reg(ops[1])?, reg(ops[2])?);
            if mnemonic == "add" {
                Add { rd, rs1, rs2 }
            } else {
                Sub { rd, rs1, rs2 }
            }
        }
        "addi" => {
            want(3)?;
            Addi {
                rd: reg(ops[0])?,
                rs1: reg(ops[1])?,
                imm: imm(ops[2])?,
            }
        }
        "li" => {
            want(2)?;
            Li {
                rd: reg(ops[0])?,
                imm: imm(ops[1])?,
            }
        }
        "la" => {
            want(2)?;
            La {
                rd: reg(ops[0])?,
                target: target(ops[1])?,
            }
        }
        "mv" => {
            want(2)?;
            Mv {
                rd: reg(ops[0])?,
                rs: reg(ops[1])?,
            }
        }
        "ld" | "st" => {
            want(2)?;
            let r = reg(ops[0])?;
            let (base, offset) = mem_operand(ops[1])?;
            if mnemonic == "ld" {
                Ld { rd: r, base, offset }
            } else {
                St { rs: r, base, offset }
            }
        }
        "beq" | "bne" | "blt" => {
            want(3)?;
            let cond = match mnemonic {
                "beq" => Cond::Eq,
                "bne" => Cond::Ne,
                _ => Cond::Lt,
            };
            Branch {
                cond,
                rs1: reg(ops[0])?,
                rs2: reg(ops[1])?,
                target: target(ops[2])?,
            }
        }
        "j" | "jal" => {
            want(1)?;
            let t = target(ops[0])?;
            if mnemonic == "j" {
                Jump { target: t }
            } else {
                Jal { target: t }
            }
        }
        "jr" | "jalr" => {
            want(1)?;
            let rs = reg(ops[0])?;
            if mnemonic == "jr" {
                Jr { rs }
            } else {
                Jalr { rs }
            }
        }
        "ret" => {
            want(0)?;
            Ret
        }
        "halt" => {
            want(0)?;
            Halt
        }
        other => return Err(AsmErrorKind::UnknownMnemonic(other.to_string())),
    };
    Ok(ins)
}

fn reg(s: &str) -> Result<Reg, AsmErrorKind> {
    s.parse().map_err(|_| AsmErrorKind::BadOperand(s.to_string()))
}

fn imm(s: &str) -> Result<i32, AsmErrorKind> {
    let t = s.trim();
    let (neg, digits) = match t.strip_prefix('-') {
        Some(d) => (true, d),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let magnitude = if let Some(hex) = digits.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()
    } else {
        digits.parse::<i64>().ok()
    }
    .ok_or_else(|| AsmErrorKind::BadOperand(s.to_string()))?;
    let v = if neg { -magnitude } else { magnitude };
    // Accept anything representable as a 32-bit word, signed or unsigned.
    if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
        Ok(v as u32 as i32)
    } else {
        Err(AsmErrorKind::BadOperand(s.to_string()))
    }
}

/// `[rs]`, `[rs+imm]` or `[rs-imm]`.
fn mem_operand(s: &str) -> Result<(Reg, i32), AsmErrorKind> {
    let bad = || AsmErrorKind::BadOperand(s.to_string());
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(bad)?
        .trim();
    match inner.find(['+', '-']) {
        Some(i) => {
            let base = reg(inner[..i].trim())?;
            let off = imm(&inner[i..].replace(' ', ""))?;
            Ok((base, off))
        }
        None => Ok((reg(inner)?, 0)),
    }
}
