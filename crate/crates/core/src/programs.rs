//! Bundled sample programs.

use crate::asm::parse_program;
use crate::isa::Program;

pub struct Sample {
    pub name: &'static str,
    pub source: &'static str,
    /// An input that exercises the program's loops.
    pub input: &'static [u32],
}

pub const SAMPLES: &[Sample] = &[
    Sample {
        name: "branchloop",
        source: include_str!("../programs/branchloop.s"),
        input: &[4, 0, 1, 0, 1],
    },
    Sample {
        name: "auth",
        source: include_str!("../programs/auth.s"),
        input: &[4242, 3, 5, 7, 9],
    },
    Sample {
        name: "sort",
        source: include_str!("../programs/sort.s"),
        input: &[5, 9, 3, 7, 1, 4],
    },
    Sample {
        name: "dispatch",
        source: include_str!("../programs/dispatch.s"),
        input: &[6, 0, 1, 2, 0, 0, 2],
    },
    Sample {
        name: "recsum",
        source: include_str!("../programs/recsum.s"),
        input: &[5],
    },
];

pub fn sample(name: &str) -> Option<&'static Sample> {
    SAMPLES.iter().find(|s| s.name == name)
}

impl Sample {
    pub fn program(&self) -> Program {
        parse_program(self.source).expect("bundled program assembles")
    }
}
