#![allow(dead_code)]

use std::fmt::Write as _;

use flowattest::emulator::{AttackKind, AttackSpec, Location, Trigger};
use flowattest::isa::Reg;
use flowattest::programs::sample;
use flowattest::{Addr, Program};
use rand::Rng;

pub const INPUT_WORDS: usize = 24;

/// Random structured program: nested counted loops (top-test and
/// bottom-test shapes), if/else on input data, direct and indirect calls to
/// leaf functions. Loop bounds and decisions come from the input, whose
/// words are all in `0..4`.
pub struct Generator<'r, R: Rng> {
    rng: &'r mut R,
    out: String,
    labels: usize,
    leaves: usize,
}

/// Worst-case path bits a statement adds to its enclosing loop traversal.
const CALL_BITS: u32 = 1 + 1 + 4;
const ICALL_BITS: u32 = 4 + 1 + 4;

impl<'r, R: Rng> Generator<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Generator { rng, out: String::new(), labels: 0, leaves: 3 }
    }

    fn label(&mut self, stem: &str) -> String {
        self.labels += 1;
        format!("{stem}{}", self.labels)
    }

    fn line(&mut self, s: &str) {
        self.out.push_str("    ");
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn place(&mut self, label: &str) {
        let _ = writeln!(self.out, "{label}:");
    }

    /// Data operand: a fixed word, or one indexed by the loop counter of
    /// `depth` so decisions vary across iterations.
    fn data(&mut self, depth: usize) -> String {
        let off = self.rng.gen_range(0..8);
        if depth > 0 && self.rng.gen_bool(0.6) {
            let counter = 2 * depth - 1;
            format!("[r{counter}+{off}]")
        } else {
            format!("[r0+{off}]")
        }
    }

    /// Emit a block; returns the bits it may add to the enclosing traversal.
    fn block(&mut self, depth: usize, budget: u32, stmts: usize) -> u32 {
        let mut used = 0;
        for _ in 0..stmts {
            used += self.stmt(depth, budget - used);
        }
        used
    }

    fn stmt(&mut self, depth: usize, budget: u32) -> u32 {
        let roll = self.rng.gen_range(0..100);
        if roll < 30 && depth < 3 && budget >= 2 {
            self.while_loop(depth + 1);
            2
        } else if roll < 55 && budget >= 4 {
            self.if_else(depth, budget)
        } else if roll < 68 && budget >= CALL_BITS {
            let f = self.rng.gen_range(0..self.leaves);
            self.line(&format!("jal leaf{f}"));
            CALL_BITS
        } else if roll < 76 && budget >= ICALL_BITS {
            let f = self.rng.gen_range(0..self.leaves);
            self.line(&format!("la r13, leaf{f}"));
            self.line("jalr r13");
            ICALL_BITS
        } else {
            let acc = 10 + self.rng.gen_range(0..3);
            let k = self.rng.gen_range(1..9);
            self.line(&format!("addi r{acc}, r{acc}, {k}"));
            0
        }
    }

    fn if_else(&mut self, depth: usize, budget: u32) -> u32 {
        let els = self.label("else");
        let end = self.label("endif");
        let d = self.data(depth);
        self.line(&format!("ld r7, {d}"));
        let op = ["beq", "bne", "blt"][self.rng.gen_range(0..3)];
        let rhs = if op == "blt" { "r9" } else { "r0" };
        if op == "blt" {
            self.line("li r9, 2");
        }
        self.line(&format!("{op} r7, {rhs}, {els}"));
        let inner = (budget - 2) / 2;
        let a = self.block(depth, inner, 1);
        self.line(&format!("j {end}"));
        self.place(&els);
        let b = self.block(depth, inner, 1);
        self.place(&end);
        2 + a.max(b)
    }

    fn while_loop(&mut self, depth: usize) {
        let counter = 2 * depth - 1;
        let bound = 2 * depth;
        let d = self.data(depth - 1);
        self.line(&format!("li r{counter}, 0"));
        self.line(&format!("ld r{bound}, {d}"));
        let stmts = self.rng.gen_range(1..3);
        if self.rng.gen_bool(0.5) {
            let top = self.label("top");
            let end = self.label("end");
            self.place(&top);
            self.line(&format!("beq r{counter}, r{bound}, {end}"));
            self.block(depth, 14, stmts);
            self.line(&format!("addi r{counter}, r{counter}, 1"));
            self.line(&format!("j {top}"));
            self.place(&end);
        } else {
            let body = self.label("body");
            let test = self.label("test");
            self.line(&format!("j {test}"));
            self.place(&body);
            self.block(depth, 15, stmts);
            self.line(&format!("addi r{counter}, r{counter}, 1"));
            self.place(&test);
            self.line(&format!("blt r{counter}, r{bound}, {body}"));
        }
    }

    pub fn program(mut self, id: &str) -> String {
        let _ = writeln!(self.out, ".id {id}");
        let stmts = self.rng.gen_range(2..5);
        for _ in 0..stmts {
            self.stmt(0, 16);
        }
        self.line("halt");
        for f in 0..self.leaves {
            let skip = self.label("skip");
            self.place(&format!("leaf{f}"));
            let off = self.rng.gen_range(0..8);
            self.line(&format!("ld r14, [r0+{off}]"));
            self.line(&format!("bne r14, r0, {skip}"));
            self.line("addi r15, r15, 1");
            self.place(&skip);
            self.line("ret");
        }
        self.out
    }
}

pub fn random_program<R: Rng>(rng: &mut R, id: &str) -> (Program, Vec<u32>) {
    let src = Generator::new(rng).program(id);
    let program = flowattest::parse_program(&src)
        .unwrap_or_else(|e| panic!("generated program failed to assemble: {e}\n{src}"));
    let input = (0..INPUT_WORDS).map(|_| rng.gen_range(0..4)).collect();
    (program, input)
}

/// Address of the first occurrence of a label in a sample's source.
pub fn label(program: &str, name: &str) -> Addr {
    let s = sample(program).unwrap();
    let mut index = 0u32;
    for raw in s.source.lines() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() || line.starts_with('.') {
            continue;
        }
        let mut rest = line;
        while let Some((l, r)) = rest.split_once(':') {
            if l.trim() == name {
                return Addr(0x100 + 4 * index);
            }
            rest = r.trim();
        }
        if !rest.is_empty() {
            index += 1;
        }
    }
    panic!("label {name} not in {program}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expect {
    /// Loop counts change, authenticator does not.
    Metadata,
    Authenticator,
    /// Rogue edge inside a loop: structural check fires first.
    LoopPathAndAuthenticator,
}

pub struct AttackCase {
    pub program: &'static str,
    pub input: Vec<u32>,
    pub attack: AttackSpec,
    pub expect: Expect,
}

fn at(program: &str, lbl: &str, occurrence: u32) -> Trigger {
    Trigger::Pc { pc: label(program, lbl), occurrence }
}

/// Three attack classes on three programs, plus branchloop.
pub fn attack_matrix() -> Vec<AttackCase> {
    let reg = |n: u8| Location::Register(Reg::Gpr(n));
    vec![
        // auth
        AttackCase {
            program: "auth",
            input: vec![1, 3, 5, 7, 9],
            attack: AttackSpec {
                kind: AttackKind::CorruptDecisionVar,
                trigger: at("auth", "gate", 1),
                target: Location::Memory(100),
                value: 1,
            },
            expect: Expect::Authenticator,
        },
        AttackCase {
            program: "auth",
            input: vec![4242, 6, 1, 1, 1, 1, 1, 1],
            attack: AttackSpec {
                kind: AttackKind::CorruptLoopCounter,
                trigger: at("auth", "sum", 1),
                target: reg(5),
                value: 3,
            },
            expect: Expect::Metadata,
        },
        AttackCase {
            program: "auth",
            input: vec![1, 3, 5, 7, 9],
            attack: AttackSpec {
                kind: AttackKind::CorruptCodePointer,
                trigger: at("auth", "nomatch", 1),
                target: Location::Register(Reg::Ra),
                value: label("auth", "priv").value(),
            },
            expect: Expect::Authenticator,
        },
        // sort
        AttackCase {
            program: "sort",
            input: vec![6, 1, 2, 3, 4, 5, 6],
            attack: AttackSpec {
                kind: AttackKind::CorruptDecisionVar,
                trigger: at("sort", "order", 2),
                target: Location::Memory(6),
                value: 0,
            },
            expect: Expect::Authenticator,
        },
        AttackCase {
            program: "sort",
            input: vec![6, 1, 2, 3, 4, 5, 6],
            attack: AttackSpec {
                kind: AttackKind::CorruptLoopCounter,
                trigger: at("sort", "inner", 1),
                target: reg(4),
                value: 3,
            },
            expect: Expect::Metadata,
        },
        AttackCase {
            program: "sort",
            input: vec![6, 1, 2, 3, 4, 5, 6],
            attack: AttackSpec {
                kind: AttackKind::CorruptCodePointer,
                // the `ret` taken when no swap is needed
                trigger: Trigger::Pc { pc: Addr(label("sort", "order").value() + 12), occurrence: 2 },
                target: Location::Register(Reg::Ra),
                value: label("sort", "next").value(),
            },
            expect: Expect::LoopPathAndAuthenticator,
        },
        // dispatch
        AttackCase {
            program: "dispatch",
            input: vec![4, 0, 1, 0, 2],
            attack: AttackSpec {
                kind: AttackKind::CorruptDecisionVar,
                trigger: at("dispatch", "loop", 2),
                target: Location::Memory(2),
                value: 0,
            },
            expect: Expect::Authenticator,
        },
        AttackCase {
            program: "dispatch",
            input: vec![6, 0, 0, 0, 0, 0, 0],
            attack: AttackSpec {
                kind: AttackKind::CorruptLoopCounter,
                trigger: at("dispatch", "loop", 1),
                target: reg(1),
                value: 2,
            },
            expect: Expect::Metadata,
        },
        AttackCase {
            program: "dispatch",
            input: vec![4, 0, 1, 0, 2],
            attack: AttackSpec {
                kind: AttackKind::CorruptCodePointer,
                trigger: at("dispatch", "call", 3),
                target: reg(4),
                value: label("dispatch", "done").value(),
            },
            expect: Expect::LoopPathAndAuthenticator,
        },
        // branchloop
        AttackCase {
            program: "branchloop",
            input: vec![4, 0, 0, 0, 0],
            attack: AttackSpec {
                kind: AttackKind::CorruptDecisionVar,
                trigger: at("branchloop", "loop", 1),
                target: Location::Memory(3),
                value: 1,
            },
            expect: Expect::Authenticator,
        },
        AttackCase {
            program: "branchloop",
            input: vec![4, 0, 0, 0, 0],
            attack: AttackSpec {
                kind: AttackKind::CorruptLoopCounter,
                trigger: at("branchloop", "loop", 1),
                target: reg(2),
                value: 2,
            },
            expect: Expect::Metadata,
        },
    ]
}
