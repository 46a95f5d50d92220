//! Static control-flow graph, built once per program by the verifier.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::addr::Addr;
use crate::isa::{InstrKind, Instruction, Program};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeKind {
    Fallthrough,
    Taken,
    Call,
    ReturnAny,
    IndirectAny,
}

/// `src` is the address of the last instruction of the source block.
/// `dest` is `None` for statically unresolved (return / indirect) edges.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Edge {
    pub src: Addr,
    pub dest: Option<Addr>,
    pub kind: EdgeKind,
}

/// Inclusive address range `[start, end]`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Block {
    pub start: Addr,
    pub end: Addr,
}

impl Block {
    pub fn contains(&self, a: Addr) -> bool {
        self.start <= a && a <= self.end
    }
}

/// Target of a non-linking backward branch and the branch itself.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct StaticLoop {
    pub entry: Addr,
    pub backedge: Addr,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CfgError {
    #[error("instruction at {src} branches to {target}, outside the program")]
    TargetOutOfRange { src: Addr, target: Addr },
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Cfg {
    pub blocks: Vec<Block>,
    pub edges: BTreeSet<Edge>,
    pub static_loops: Vec<StaticLoop>,
    /// Addresses immediately after a linking instruction.
    pub return_sites: BTreeSet<Addr>,
    /// Addresses that may legitimately be reached by `jr`/`jalr`: every
    /// `la`-taken label plus every direct call target.
    pub indirect_targets: BTreeSet<Addr>,
}

pub fn build_cfg(program: &Program) -> Result<Cfg, CfgError> {
    let mut leaders = BTreeSet::new();
    leaders.insert(program.base());
    leaders.insert(program.entry());
    let mut return_sites = BTreeSet::new();
    let mut indirect_targets = BTreeSet::new();

    for (addr, ins) in program.iter() {
        let target = match ins {
            Instruction::La { target, .. } => Some(*target),
            other => other.direct_target(),
        };
        if let Some(t) = target {
            if !program.contains(t) {
                return Err(CfgError::TargetOutOfRange { src: addr, target: t });
            }
            if !matches!(ins, Instruction::La { .. }) {
                leaders.insert(t);
            }
        }
        match ins {
            Instruction::La { target, .. } | Instruction::Jal { target } => {
                indirect_targets.insert(*target);
            }
            _ => {}
        }
        if ins.is_linking() {
            return_sites.insert(addr.next());
        }
        if ins.is_control_flow() || matches!(ins, Instruction::Halt) {
            let next = addr.next();
            if program.contains(next) {
                leaders.insert(next);
            }
        }
    }

    let mut blocks = Vec::new();
    let mut edges = BTreeSet::new();
    let mut static_loops = Vec::new();
    let starts: Vec<Addr> = leaders.into_iter().collect();
    for (i, &start) in starts.iter().enumerate() {
        let end_excl = starts.get(i + 1).copied().unwrap_or(program.end());
        let end = Addr(end_excl.0 - crate::isa::WORD_BYTES);
        blocks.push(Block { start, end });

        let last = program.fetch(end).expect("block end inside program");
        let mut add = |dest: Option<Addr>, kind| {
            edges.insert(Edge { src: end, dest, kind });
        };
        match (last.kind(), last) {
            (InstrKind::CondBranch, Instruction::Branch { target, .. }) => {
                add(Some(*target), EdgeKind::Taken);
                add(Some(end.next()), EdgeKind::Fallthrough);
            }
            (InstrKind::DirectJump, Instruction::Jump { target }) => {
                add(Some(*target), EdgeKind::Taken)
            }
            (InstrKind::LinkingJump, Instruction::Jal { target }) => {
                add(Some(*target), EdgeKind::Call)
            }
            (InstrKind::IndirectJump | InstrKind::LinkingIndirectJump, _) => {
                add(None, EdgeKind::IndirectAny)
            }
            (InstrKind::Return, _) => add(None, EdgeKind::ReturnAny),
            (InstrKind::Halt, _) => {}
            _ => {
                if program.contains(end.next()) {
                    add(Some(end.next()), EdgeKind::Fallthrough);
                }
            }
        }
        if let Some(t) = last.direct_target() {
            if !last.is_linking() && t < end {
                static_loops.push(StaticLoop { entry: t, backedge: end });
            }
        }
    }
    static_loops.sort();

    Ok(Cfg {
        blocks,
        edges,
        static_loops,
        return_sites,
        indirect_targets,
    })
}

impl Cfg {
    pub fn block_containing(&self, a: Addr) -> Option<&Block> {
        let idx = self.blocks.partition_point(|b| b.start <= a);
        idx.checked_sub(1)
            .map(|i| &self.blocks[i])
            .filter(|b| b.contains(a))
    }

    /// Whether a concrete transfer `src -> dest` is permitted. Direct edges must
    /// match exactly; returns must land on a return site; indirect jumps must
    /// land on an address-taken label or call target.
    pub fn admits(&self, src: Addr, dest: Addr) -> bool {
        let lo = Edge { src, dest: None, kind: EdgeKind::Fallthrough };
        self.edges
            .range(lo..)
            .take_while(|e| e.src == src)
            .any(|e| match e.kind {
                EdgeKind::ReturnAny => self.return_sites.contains(&dest),
                EdgeKind::IndirectAny => self.indirect_targets.contains(&dest),
                _ => e.dest == Some(dest),
            })
    }

    /// Range `[entry, furthest backedge]` of the static loop headed at `entry`.
    pub fn loop_range(&self, entry: Addr) -> Option<(Addr, Addr)> {
        self.static_loops
            .iter()
            .filter(|l| l.entry == entry)
            .map(|l| l.backedge)
            .max()
            .map(|b| (entry, b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cfg serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    #[test]
    fn straight_line_is_one_block_without_edges() {
        let p = parse_program("li r1, 1\naddi r1, r1, 2\nhalt").unwrap();
        let cfg = build_cfg(&p).unwrap();
        assert_eq!(cfg.blocks.len(), 1);
        assert!(cfg.edges.is_empty());
        assert!(cfg.static_loops.is_empty());
    }

    #[test]
    fn linking_backward_call_is_not_a_loop() {
        let src = "f: ret\nmain: jal f\n halt";
        let p = Program::with_entry(
            "p",
            parse_program(src).unwrap().instructions().to_vec(),
            Addr(0x104),
        )
        .unwrap();
        let cfg = build_cfg(&p).unwrap();
        assert!(cfg.static_loops.is_empty());
        assert!(cfg.edges.contains(&Edge {
            src: Addr(0x104),
            dest: Some(Addr(0x100)),
            kind: EdgeKind::Call
        }));
        assert!(cfg.return_sites.contains(&Addr(0x108)));
        assert!(cfg.admits(Addr(0x100), Addr(0x108)));
        assert!(!cfg.admits(Addr(0x100), Addr(0x104)));
    }

    #[test]
    fn cond_branch_has_taken_and_fallthrough() {
        let p = parse_program("top: beq r1, r2, top\nhalt").unwrap();
        let cfg = build_cfg(&p).unwrap();
        let out: Vec<_> = cfg.edges.iter().filter(|e| e.src == Addr(0x100)).collect();
        assert_eq!(out.len(), 2);
        // A self-branch is not a backward branch.
        assert!(cfg.static_loops.is_empty());
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let p = Program::new(
            "p",
            vec![Instruction::Jump { target: Addr(0x400) }, Instruction::Halt],
        )
        .unwrap();
        assert_eq!(
            build_cfg(&p),
            Err(CfgError::TargetOutOfRange { src: Addr(0x100), target: Addr(0x400) })
        );
    }

    #[test]
    fn indirect_edges_are_unresolved() {
        let p = parse_program("la r1, g\njr r1\ng: halt").unwrap();
        let cfg = build_cfg(&p).unwrap();
        let e = cfg.edges.iter().find(|e| e.src == Addr(0x104)).unwrap();
        assert_eq!(e.kind, EdgeKind::IndirectAny);
        assert_eq!(e.dest, None);
        assert!(cfg.admits(Addr(0x104), Addr(0x108)));
        assert!(!cfg.admits(Addr(0x104), Addr(0x100)));
    }

    #[test]
    fn json_uses_hex_addresses() {
        let p = parse_program("top: addi r1, r1, 1\nj top\nhalt").unwrap();
        let json = build_cfg(&p).unwrap().to_json();
        assert!(json.contains("\"0x00000100\""));
        assert!(json.contains("static_loops"));
    }
}
