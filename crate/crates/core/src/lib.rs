//! Control-flow attestation for a small RISC machine.
//!
//! The pipeline runs a program on an emulator, filters the executed branches,
//! folds loop bodies into compact path metadata and hashes everything else
//! into a SHA3-512 authenticator. A prover signs the result bound to a
//! verifier nonce; the verifier checks the signature, nonce, and loop paths
//! against the static CFG and replays the run to compare measurements.

pub mod addr;
pub mod asm;
pub mod attestation;
pub mod branch_filter;
pub mod cfg;
pub mod emulator;
pub mod hash_engine;
pub mod isa;
pub mod loop_monitor;
pub mod programs;
pub mod structural;

pub use addr::Addr;
pub use asm::{assemble, parse_program, AsmError};
pub use branch_filter::{detect_loops, filter, BranchEvent, BranchKind, LoopAnalysis, LoopContext};
pub use cfg::{build_cfg, Cfg};
pub use emulator::{run, run_observed, AttackKind, AttackSpec, EmulatorConfig, Trace, TraceEvent};
pub use isa::{Instruction, Program};
pub use attestation::{
    measure, measure_trace, Challenge, Measurement, Nonce, Prover, ProverKey, RejectReason, Report,
    Verdict, Verifier, VerifierKey,
};
pub use hash_engine::{simulate_absorb, Authenticator, HashEngine};
pub use loop_monitor::{LoopSession, MonitorConfig, PathId};
