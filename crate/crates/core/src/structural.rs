//! Static plausibility check for reported loop paths.
//!
//! A path identifier is a bit string, so it can be replayed against the CFG:
//! starting at the loop entry, each conditional consumes one bit, direct
//! jumps and calls must read `1`, and indirect transfers read an `n`-bit code
//! that selects a target from the session's indirect-target list. A path is
//! plausible if some walk consumes exactly its bits and ends on a legal
//! iteration boundary or loop exit.
//!
//! Branches of nested loops belong to their own sessions, so the walker may
//! skip over a nested loop (or a recursive callee) without consuming bits.

use std::collections::{BTreeSet, HashSet};

use crate::addr::Addr;
use crate::cfg::Cfg;
use crate::isa::{Instruction, Program};
use crate::loop_monitor::{IndirectTargetTable, LoopSession, PathId, INDIRECT_OVERFLOW_CODE};

/// Walk states explored per path before giving up.
const STATE_CAP: usize = 200_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathCheck {
    Plausible,
    /// The walk hit an indirect-overflow code or the state cap: the path
    /// cannot be checked statically.
    Unverifiable,
    Invalid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathFinding {
    pub session: usize,
    pub path: PathId,
    pub check: PathCheck,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Backedge { entry: Addr, end: Addr },
    Recursion { entry: Addr },
}

/// Static facts shared by every walk over one program.
pub struct PathChecker<'a> {
    program: &'a Program,
    cfg: &'a Cfg,
    indirect_bits: usize,
    /// Ranges of static loops as `(entry, backedge)`.
    loops: Vec<(Addr, Addr)>,
    /// Call targets that call themselves directly.
    recursive: BTreeSet<Addr>,
}

#[derive(Clone, Copy)]
enum Exit {
    Goto(Addr, Addr),
    AnyIndirect(Addr),
    Return,
    Halt,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct State {
    pc: Addr,
    pos: usize,
    stack: Vec<Addr>,
}

impl<'a> PathChecker<'a> {
    pub fn new(program: &'a Program, cfg: &'a Cfg, indirect_bits: u8) -> Self {
        let loops = cfg.static_loops.iter().map(|l| (l.entry, l.backedge)).collect();
        let mut recursive = BTreeSet::new();
        for (a, ins) in program.iter() {
            if let Instruction::Jal { target } = ins {
                let f = *target;
                if f <= a
                    && !program
                        .iter()
                        .any(|(b, i)| f <= b && b < a && matches!(i, Instruction::Ret))
                {
                    recursive.insert(f);
                }
            }
        }
        PathChecker {
            program,
            cfg,
            indirect_bits: indirect_bits as usize,
            loops,
            recursive,
        }
    }

    fn modes(&self, entry: Addr) -> Vec<Mode> {
        let mut modes: Vec<Mode> = self
            .loops
            .iter()
            .filter(|(e, _)| *e == entry)
            .map(|&(entry, end)| Mode::Backedge { entry, end })
            .collect();
        if self.cfg.indirect_targets.contains(&entry) {
            modes.push(Mode::Recursion { entry });
        }
        modes
    }

    /// Check every path of one session. Fault markers carry no paths.
    pub fn check_session(&self, index: usize, session: &LoopSession) -> Vec<PathFinding> {
        if session.is_fault_marker() {
            return Vec::new();
        }
        let modes = self.modes(session.loop_entry);
        session
            .paths
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.path.is_overflow())
            .map(|(i, p)| {
                let mut best = PathCheck::Invalid;
                for &mode in &modes {
                    match self.check_path(mode, p.path, &session.indirect_targets, i == 0) {
                        PathCheck::Plausible => {
                            best = PathCheck::Plausible;
                            break;
                        }
                        PathCheck::Unverifiable => best = PathCheck::Unverifiable,
                        PathCheck::Invalid => {}
                    }
                }
                PathFinding { session: index, path: p.path, check: best }
            })
            .collect()
    }

    pub fn check_all(&self, sessions: &[LoopSession]) -> Vec<PathFinding> {
        sessions
            .iter()
            .enumerate()
            .flat_map(|(i, s)| self.check_session(i, s))
            .collect()
    }

    fn check_path(&self, mode: Mode, path: PathId, targets: &[Addr], first: bool) -> PathCheck {
        let mut starts = Vec::new();
        match mode {
            Mode::Backedge { entry, end } => {
                starts.push(entry);
                // The first traversal is attributed from its first in-range
                // branch, which need not sit at the entry.
                if first {
                    starts.extend(
                        self.cfg
                            .blocks
                            .iter()
                            .map(|b| b.start)
                            .filter(|&a| entry < a && a <= end),
                    );
                }
            }
            Mode::Recursion { entry } => starts.push(entry),
        }
        let mut walk = Walk {
            c: self,
            mode,
            path,
            targets,
            visited: HashSet::new(),
            work: starts
                .into_iter()
                .map(|pc| State { pc, pos: 0, stack: Vec::new() })
                .collect(),
            unverifiable: false,
        };
        walk.run()
    }

    fn exits(&self, entry: Addr, end: Addr) -> Vec<Exit> {
        let inside = |a: Addr| entry <= a && a <= end;
        let mut out = Vec::new();
        for (a, ins) in self.program.iter().filter(|(a, _)| inside(*a)) {
            match ins {
                Instruction::Branch { target, .. } => {
                    if !inside(*target) {
                        out.push(Exit::Goto(a, *target));
                    }
                    if a == end {
                        out.push(Exit::Goto(a, a.next()));
                    }
                }
                Instruction::Jump { target } => {
                    if !inside(*target) {
                        out.push(Exit::Goto(a, *target));
                    }
                }
                Instruction::Jr { .. } => out.push(Exit::AnyIndirect(a)),
                Instruction::Ret => out.push(Exit::Return),
                Instruction::Halt => out.push(Exit::Halt),
                Instruction::Jal { .. } | Instruction::Jalr { .. } => {
                    if a == end {
                        out.push(Exit::Goto(a, a.next()));
                    }
                }
                _ => {
                    if a == end {
                        out.push(Exit::Goto(a, a.next()));
                    }
                }
            }
        }
        out
    }
}

struct Walk<'c, 'a> {
    c: &'c PathChecker<'a>,
    mode: Mode,
    path: PathId,
    targets: &'c [Addr],
    visited: HashSet<State>,
    work: Vec<State>,
    unverifiable: bool,
}

impl Walk<'_, '_> {
    fn run(&mut self) -> PathCheck {
        while let Some(st) = self.work.pop() {
            if self.visited.len() >= STATE_CAP {
                return PathCheck::Unverifiable;
            }
            if !self.visited.insert(st.clone()) {
                continue;
            }
            if self.expand(st) {
                return PathCheck::Plausible;
            }
        }
        if self.unverifiable {
            PathCheck::Unverifiable
        } else {
            PathCheck::Invalid
        }
    }

    fn done(&self, pos: usize) -> bool {
        pos == self.path.len()
    }

    fn read(&self, pos: usize, width: usize) -> Option<u64> {
        self.path.field(pos, width)
    }

    fn own_range(&self, a: Addr) -> bool {
        match self.mode {
            Mode::Backedge { entry, end } => entry <= a && a <= end,
            Mode::Recursion { .. } => false,
        }
    }

    /// Read an indirect code and resolve it. `None` means the option is dead.
    fn indirect(&mut self, pos: usize) -> Option<Addr> {
        let code = self.read(pos, self.c.indirect_bits)?;
        if code == INDIRECT_OVERFLOW_CODE {
            self.unverifiable = true;
            return None;
        }
        IndirectTargetTable::decode(self.targets, code)
    }

    /// Control reaches `dest` from `src` via a non-linking transfer. Returns
    /// true if that ends the path successfully.
    fn transfer(&mut self, st: &State, src: Addr, dest: Addr, pos: usize) -> bool {
        let base = st.stack.is_empty();
        if dest < src {
            // Backward branches head loops: only our own boundary is ours.
            return matches!(self.mode, Mode::Backedge { entry, .. } if base && dest == entry)
                && self.done(pos);
        }
        if base && matches!(self.mode, Mode::Backedge { .. }) && !self.own_range(dest) {
            return self.done(pos);
        }
        if self.c.program.contains(dest) {
            self.work.push(State { pc: dest, pos, stack: st.stack.clone() });
        }
        false
    }

    /// Return with the concrete target `target`, or from a skipped callee
    /// when `target` is `None`.
    fn ret(&mut self, st: &State, target: Option<Addr>, pos: usize) -> bool {
        let mut stack = st.stack.clone();
        if let Some(top) = stack.pop() {
            if target.is_some_and(|t| t != top) {
                return false;
            }
            self.work.push(State { pc: top, pos, stack });
            return false;
        }
        if target.is_some_and(|t| !self.c.cfg.return_sites.contains(&t)) {
            return false;
        }
        match self.mode {
            Mode::Backedge { .. } => self.done(pos),
            Mode::Recursion { .. } => {
                if self.done(pos) {
                    return true;
                }
                let sites: Vec<Addr> = match target {
                    Some(t) => vec![t],
                    None => self.c.cfg.return_sites.iter().copied().collect(),
                };
                for pc in sites {
                    self.work.push(State { pc, pos, stack: Vec::new() });
                }
                false
            }
        }
    }

    fn call(&mut self, st: &State, pc: Addr, target: Addr, pos: usize) -> bool {
        if let Mode::Recursion { entry } = self.mode {
            if target == entry {
                return self.done(pos);
            }
        }
        if self.c.recursive.contains(&target) {
            // A recursive callee is its own loop session.
            self.work.push(State { pc: pc.next(), pos, stack: st.stack.clone() });
        }
        let mut stack = st.stack.clone();
        stack.push(pc.next());
        self.work.push(State { pc: target, pos, stack });
        false
    }

    fn skip_children(&mut self, st: &State) -> bool {
        let base = st.stack.is_empty();
        let own_entry = match self.mode {
            Mode::Backedge { entry, .. } => Some(entry),
            Mode::Recursion { .. } => None,
        };
        let children: Vec<(Addr, Addr)> = self
            .c
            .loops
            .iter()
            .copied()
            .filter(|&(e, s)| e <= st.pc && st.pc <= s && !(base && Some(e) == own_entry))
            .collect();
        for (e, s) in children {
            for exit in self.c.exits(e, s) {
                let hit = match exit {
                    Exit::Goto(src, dest) => self.transfer(st, src, dest, st.pos),
                    Exit::AnyIndirect(src) => {
                        let targets: Vec<Addr> = self.c.cfg.indirect_targets.iter().copied().collect();
                        targets
                            .into_iter()
                            .filter(|&t| t < e || t > s)
                            .any(|t| self.transfer(st, src, t, st.pos))
                    }
                    Exit::Return => self.ret(st, None, st.pos),
                    Exit::Halt => self.done(st.pos),
                };
                if hit {
                    return true;
                }
            }
        }
        false
    }

    fn expand(&mut self, st: State) -> bool {
        if self.skip_children(&st) {
            return true;
        }
        let pc = st.pc;
        let Some(&ins) = self.c.program.fetch(pc) else {
            return false;
        };
        let pos = st.pos;
        let n = self.c.indirect_bits;
        match ins {
            Instruction::Halt => self.done(pos),
            Instruction::Branch { target, .. } => match self.read(pos, 1) {
                Some(1) => self.transfer(&st, pc, target, pos + 1),
                Some(_) => self.transfer(&st, pc, pc.next(), pos + 1),
                None => false,
            },
            Instruction::Jump { target } => {
                self.read(pos, 1) == Some(1) && self.transfer(&st, pc, target, pos + 1)
            }
            Instruction::Jal { target } => {
                self.read(pos, 1) == Some(1) && self.call(&st, pc, target, pos + 1)
            }
            Instruction::Jr { .. } => match self.indirect(pos) {
                Some(t) if self.c.cfg.indirect_targets.contains(&t) => {
                    self.transfer(&st, pc, t, pos + n)
                }
                _ => false,
            },
            Instruction::Jalr { .. } => match self.indirect(pos) {
                Some(t) if self.c.cfg.indirect_targets.contains(&t) => {
                    self.call(&st, pc, t, pos + n)
                }
                _ => false,
            },
            Instruction::Ret => match self.indirect(pos) {
                Some(t) => self.ret(&st, Some(t), pos + n),
                None => false,
            },
            _ => {
                if self.c.program.contains(pc.next()) {
                    self.work.push(State { pc: pc.next(), pos, stack: st.stack });
                }
                false
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;
    use crate::cfg::build_cfg;
    use crate::loop_monitor::PathCount;

    const SRC: &str = "
        li r1, 0
        ld r2, [r0+0]
    loop: beq r1, r2, done
        ld r5, [r1+1]
        bne r5, r0, else
        addi r6, r6, 1
        j join
    else: addi r7, r7, 1
    join: addi r1, r1, 1
        j loop
    done: halt
    ";

    fn session(paths: &[&str]) -> LoopSession {
        LoopSession {
            loop_entry: Addr(0x108),
            depth: 1,
            parent: None,
            paths: paths
                .iter()
                .map(|p| PathCount { path: p.parse().unwrap(), count: 1 })
                .collect(),
            indirect_targets: vec![],
        }
    }

    fn checks(paths: &[&str]) -> Vec<PathCheck> {
        let p = parse_program(SRC).unwrap();
        let cfg = build_cfg(&p).unwrap();
        let c = PathChecker::new(&p, &cfg, 4);
        c.check_session(0, &session(paths)).iter().map(|f| f.check).collect()
    }

    #[test]
    fn real_paths_are_plausible() {
        assert_eq!(
            checks(&["0011", "011", "1"]),
            vec![PathCheck::Plausible; 3]
        );
    }

    #[test]
    fn impossible_paths_are_invalid() {
        // Too short, too long, and a jump reading 0.
        assert_eq!(
            checks(&["00", "00111", "0010"]),
            vec![PathCheck::Invalid; 3]
        );
    }

    #[test]
    fn unknown_entry_is_invalid() {
        let p = parse_program(SRC).unwrap();
        let cfg = build_cfg(&p).unwrap();
        let c = PathChecker::new(&p, &cfg, 4);
        let mut s = session(&["011"]);
        s.loop_entry = Addr(0x10c);
        assert_eq!(c.check_session(0, &s)[0].check, PathCheck::Invalid);
        assert!(c.check_session(0, &LoopSession::fault_marker(Addr(0x10c))).is_empty());
    }
}
