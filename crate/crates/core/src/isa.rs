//! The toy RISC-style instruction set.
//!
//! Sixteen general registers `r0`..`r15` (with `r0` hardwired to zero) plus a
//! separate link register `ra`. Code lives at [`BASE_ADDR`] in 4-byte words;
//! data memory is a separate word-addressed array that code cannot reach.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha3::{Digest, Sha3_512};

use crate::addr::Addr;

pub const WORD_BYTES: u32 = 4;
pub const BASE_ADDR: Addr = Addr(0x0000_0100);
pub const NUM_GPRS: usize = 16;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Reg {
    Gpr(u8),
    Ra,
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::Gpr(n) => write!(f, "r{n}"),
            Reg::Ra => f.write_str("ra"),
        }
    }
}

impl FromStr for Reg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "ra" {
            return Ok(Reg::Ra);
        }
        s.strip_prefix('r')
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|n| (*n as usize) < NUM_GPRS)
            .map(Reg::Gpr)
            .ok_or_else(|| format!("unknown register `{s}`"))
    }
}

impl Serialize for Reg {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Reg {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Coarse classification used by the branch filter and the CFG builder.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum InstrKind {
    Alu,
    Load,
    Store,
    CondBranch,
    DirectJump,
    LinkingJump,
    IndirectJump,
    LinkingIndirectJump,
    Return,
    Halt,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
}

impl Cond {
    pub fn holds(self, a: u32, b: u32) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => (a as i32) < (b as i32),
        }
    }

    fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "beq",
            Cond::Ne => "bne",
            Cond::Lt => "blt",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Instruction {
    Add { rd: Reg, rs1: Reg, rs2: Reg },
    Sub { rd: Reg, rs1: Reg, rs2: Reg },
    Addi { rd: Reg, rs1: Reg, imm: i32 },
    Li { rd: Reg, imm: i32 },
    /// Load the address of a code label; marks the label as an indirect-branch target.
    La { rd: Reg, target: Addr },
    Mv { rd: Reg, rs: Reg },
    Ld { rd: Reg, base: Reg, offset: i32 },
    St { rs: Reg, base: Reg, offset: i32 },
    Branch { cond: Cond, rs1: Reg, rs2: Reg, target: Addr },
    Jump { target: Addr },
    Jal { target: Addr },
    Jr { rs: Reg },
    Jalr { rs: Reg },
    Ret,
    Halt,
}

impl Instruction {
    pub fn kind(&self) -> InstrKind {
        use Instruction::*;
        match self {
            Add { .. } | Sub { .. } | Addi { .. } | Li { .. } | La { .. } | Mv { .. } => {
                InstrKind::Alu
            }
            Ld { .. } => InstrKind::Load,
            St { .. } => InstrKind::Store,
            Branch { .. } => InstrKind::CondBranch,
            Jump { .. } => InstrKind::DirectJump,
            Jal { .. } => InstrKind::LinkingJump,
            Jr { .. } => InstrKind::IndirectJump,
            Jalr { .. } => InstrKind::LinkingIndirectJump,
            Ret => InstrKind::Return,
            Halt => InstrKind::Halt,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        use Instruction::*;
        match self {
            Add { .. } => "add",
            Sub { .. } => "sub",
            Addi { .. } => "addi",
            Li { .. } => "li",
            La { .. } => "la",
            Mv { .. } => "mv",
            Ld { .. } => "ld",
            St { .. } => "st",
            Branch { cond, .. } => cond.mnemonic(),
            Jump { .. } => "j",
            Jal { .. } => "jal",
            Jr { .. } => "jr",
            Jalr { .. } => "jalr",
            Ret => "ret",
            Halt => "halt",
        }
    }

    /// Branches, jumps and returns. `halt` ends execution but transfers no control.
    pub fn is_control_flow(&self) -> bool {
        !matches!(
            self.kind(),
            InstrKind::Alu | InstrKind::Load | InstrKind::Store | InstrKind::Halt
        )
    }

    /// Writes the link register.
    pub fn is_linking(&self) -> bool {
        matches!(self, Instruction::Jal { .. } | Instruction::Jalr { .. })
    }

    /// Statically known branch target, if any.
    pub fn direct_target(&self) -> Option<Addr> {
        match self {
            Instruction::Branch { target, .. }
            | Instruction::Jump { target }
            | Instruction::Jal { target } => Some(*target),
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Instruction::*;
        let m = self.mnemonic();
        match self {
            Add { rd, rs1, rs2 } | Sub { rd, rs1, rs2 } => write!(f, "{m} {rd}, {rs1}, {rs2}"),
            Addi { rd, rs1, imm } => write!(f, "{m} {rd}, {rs1}, {imm}"),
            Li { rd, imm } => write!(f, "{m} {rd}, {imm}"),
            La { rd, target } => write!(f, "{m} {rd}, {target}"),
            Mv { rd, rs } => write!(f, "{m} {rd}, {rs}"),
            Ld { rd, base, offset } => write!(f, "{m} {rd}, [{base}{offset:+}]"),
            St { rs, base, offset } => write!(f, "{m} {rs}, [{base}{offset:+}]"),
            Branch { rs1, rs2, target, .. } => write!(f, "{m} {rs1}, {rs2}, {target}"),
            Jump { target } | Jal { target } => write!(f, "{m} {target}"),
            Jr { rs } | Jalr { rs } => write!(f, "{m} {rs}"),
            Ret | Halt => f.write_str(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("program has no instructions")]
    Empty,
    #[error("program contains no `halt`")]
    NoHalt,
    #[error("entry point {0} is not an instruction address")]
    BadEntry(Addr),
    #[error("program too large for the 32-bit address space")]
    TooLarge,
}

/// An immutable, address-ordered program image.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Program {
    id: String,
    base: Addr,
    entry: Addr,
    instructions: Vec<Instruction>,
}

impl Program {
    pub fn new(id: impl Into<String>, instructions: Vec<Instruction>) -> Result<Self, ProgramError> {
        Self::with_entry(id, instructions, BASE_ADDR)
    }

    pub fn with_entry(
        id: impl Into<String>,
        instructions: Vec<Instruction>,
        entry: Addr,
    ) -> Result<Self, ProgramError> {
        if instructions.is_empty() {
            return Err(ProgramError::Empty);
        }
        if !instructions.iter().any(|i| matches!(i, Instruction::Halt)) {
            return Err(ProgramError::NoHalt);
        }
        let bytes = (instructions.len() as u64) * WORD_BYTES as u64;
        if BASE_ADDR.0 as u64 + bytes > u32::MAX as u64 {
            return Err(ProgramError::TooLarge);
        }
        let program = Program {
            id: id.into(),
            base: BASE_ADDR,
            entry,
            instructions,
        };
        if program.fetch(entry).is_none() {
            return Err(ProgramError::BadEntry(entry));
        }
        Ok(program)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn base(&self) -> Addr {
        self.base
    }

    pub fn entry(&self) -> Addr {
        self.entry
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// One past the last instruction.
    pub fn end(&self) -> Addr {
        Addr(self.base.0 + self.instructions.len() as u32 * WORD_BYTES)
    }

    pub fn contains(&self, addr: Addr) -> bool {
        addr >= self.base && addr < self.end() && addr.is_aligned()
    }

    pub fn addr_of(&self, index: usize) -> Addr {
        Addr(self.base.0 + index as u32 * WORD_BYTES)
    }

    pub fn fetch(&self, pc: Addr) -> Option<&Instruction> {
        if !self.contains(pc) {
            return None;
        }
        self.instructions
            .get(((pc.0 - self.base.0) / WORD_BYTES) as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Addr, &Instruction)> + '_ {
        self.instructions
            .iter()
            .enumerate()
            .map(|(i, ins)| (self.addr_of(i), ins))
    }

    /// Disassembly listing, one instruction per line, targets as absolute hex.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for ins in &self.instructions {
            out.push_str(&ins.to_string());
            out.push('\n');
        }
        out
    }

    /// SHA3-512 over the load image (base, entry, listing). Stands in for the
    /// boot-time static measurement of the binary.
    pub fn digest(&self) -> [u8; 64] {
        let mut h = Sha3_512::new();
        h.update(self.base.to_be_bytes());
        h.update(self.entry.to_be_bytes());
        h.update(self.listing().as_bytes());
        h.finalize().into()
    }
}

#[derive(Serialize, Deserialize)]
struct ProgramRepr {
    id: String,
    base: Addr,
    entry: Addr,
    instructions: Vec<String>,
}

impl Serialize for Program {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ProgramRepr {
            id: self.id.clone(),
            base: self.base,
            entry: self.entry,
            instructions: self.instructions.iter().map(|i| i.to_string()).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Program {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = ProgramRepr::deserialize(deserializer)?;
        if repr.base != BASE_ADDR {
            return Err(D::Error::custom(format!(
                "unsupported base address {}",
                repr.base
            )));
        }
        let instructions = repr
            .instructions
            .iter()
            .enumerate()
            .map(|(n, text)| {
                crate::asm::parse_instruction(text)
                    .map_err(|e| D::Error::custom(format!("instruction {n}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Program::with_entry(repr.id, instructions, repr.entry).map_err(D::Error::custom)
    }
}
