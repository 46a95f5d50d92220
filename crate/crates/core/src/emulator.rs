//! Deterministic one-instruction-per-cycle interpreter.
//!
//! Every retired instruction yields a [`TraceEvent`]; that stream is the tap the
//! branch filter consumes. Attack injection mutates writable machine state
//! (registers, link register, data memory) at a trigger point; program text
//! is never writable.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::addr::Addr;
use crate::isa::{Instruction, Program, Reg, NUM_GPRS};

pub const DEFAULT_CYCLE_CAP: u64 = 1_000_000;
pub const DEFAULT_DATA_WORDS: usize = 16 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmulatorConfig {
    pub cycle_cap: u64,
    pub data_words: usize,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        EmulatorConfig {
            cycle_cap: DEFAULT_CYCLE_CAP,
            data_words: DEFAULT_DATA_WORDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub pc: Addr,
    pub regs: [u32; NUM_GPRS],
    pub ra: u32,
    pub data: Vec<u32>,
    pub cycle: u64,
}

impl MachineState {
    pub fn new(entry: Addr, data_words: usize) -> Self {
        MachineState {
            pc: entry,
            regs: [0; NUM_GPRS],
            ra: 0,
            data: vec![0; data_words],
            cycle: 0,
        }
    }

    pub fn reg(&self, r: Reg) -> u32 {
        match r {
            Reg::Gpr(0) => 0,
            Reg::Gpr(n) => self.regs[n as usize],
            Reg::Ra => self.ra,
        }
    }

    pub fn set_reg(&mut self, r: Reg, value: u32) {
        match r {
            Reg::Gpr(0) => {}
            Reg::Gpr(n) => self.regs[n as usize] = value,
            Reg::Ra => self.ra = value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Fetch from outside the code image (or a misaligned pc).
    PcOutOfRange,
    /// Load or store outside data memory.
    DataOutOfRange,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub pc: Addr,
    /// `None` when the fetch itself faulted.
    pub instr: Option<Instruction>,
    /// Only meaningful for conditional branches.
    pub taken: Option<bool>,
    pub next_pc: Addr,
    pub fault: Option<Fault>,
}

impl TraceEvent {
    pub fn mnemonic(&self) -> &'static str {
        match (&self.instr, self.fault) {
            (Some(i), None) => i.mnemonic(),
            _ => "fault",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TraceEventRepr {
    cycle: u64,
    pc: Addr,
    mnemonic: String,
    taken: Option<bool>,
    next_pc: Addr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fault: Option<Fault>,
}

impl Serialize for TraceEvent {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        TraceEventRepr {
            cycle: self.cycle,
            pc: self.pc,
            mnemonic: self.mnemonic().to_string(),
            taken: self.taken,
            next_pc: self.next_pc,
            instr: self.instr.map(|i| i.to_string()),
            fault: self.fault,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TraceEvent {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let r = TraceEventRepr::deserialize(deserializer)?;
        let instr = match &r.instr {
            Some(text) => Some(crate::asm::parse_instruction(text).map_err(D::Error::custom)?),
            None => None,
        };
        if instr.is_none() && r.fault.is_none() {
            return Err(D::Error::custom("event has neither an instruction nor a fault"));
        }
        if let Some(i) = &instr {
            if r.fault.is_none() && i.mnemonic() != r.mnemonic {
                return Err(D::Error::custom(format!(
                    "mnemonic `{}` does not match instruction `{}`",
                    r.mnemonic, i
                )));
            }
        }
        Ok(TraceEvent {
            cycle: r.cycle,
            pc: r.pc,
            instr,
            taken: r.taken,
            next_pc: r.next_pc,
            fault: r.fault,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub program_id: String,
    pub input: Vec<u32>,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn halted(&self) -> bool {
        matches!(
            self.events.last(),
            Some(TraceEvent { instr: Some(Instruction::Halt), fault: None, .. })
        )
    }

    /// Address at which execution faulted, if it did.
    pub fn fault(&self) -> Option<Addr> {
        self.events
            .last()
            .filter(|e| e.fault.is_some())
            .map(|e| e.pc)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write_events_jsonl(&self.events, &mut w)
    }
}

pub fn write_events_jsonl<W: Write>(events: &[TraceEvent], w: &mut W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: BufRead>(r: R) -> Result<Vec<TraceEvent>, EmuError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| EmuError::TraceFormat(n + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| EmuError::TraceFormat(n + 1, e.to_string()))?;
        out.push(ev);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackKind {
    /// Non-control data: flip a decision variable so a different valid edge is taken.
    CorruptDecisionVar,
    /// Change a loop bound or induction variable.
    CorruptLoopCounter,
    /// Overwrite a return address or function pointer.
    CorruptCodePointer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Fire before the instruction retired at this cycle.
    Cycle(u64),
    /// Fire before the `occurrence`-th (1-based) execution of `pc`.
    Pc { pc: Addr, occurrence: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Register(Reg),
    /// Word index into data memory.
    Memory(u32),
    /// A code address. Always rejected: code memory is not writable.
    Code(Addr),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub trigger: Trigger,
    pub target: Location,
    pub value: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AttackError {
    #[error("code memory at {0} is not writable")]
    CodeNotWritable(Addr),
    #[error("data word {0} is outside data memory")]
    DataOutOfRange(u32),
    #[error("trigger condition not met")]
    NotTriggered,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EmuError {
    #[error("input of {input} words does not fit in {capacity} words of data memory")]
    InputTooLarge { input: usize, capacity: usize },
    #[error("no halt within {0} cycles")]
    Runaway(u64),
    #[error("attack rejected: {0}")]
    Attack(#[from] AttackError),
    #[error("trace line {0}: {1}")]
    TraceFormat(usize, String),
}

/// Apply `attack` to a copy of `state`.
pub fn inject(state: &MachineState, attack: &AttackSpec) -> Result<MachineState, AttackError> {
    let mut next = state.clone();
    apply_attack(&mut next, attack)?;
    Ok(next)
}

fn apply_attack(state: &mut MachineState, attack: &AttackSpec) -> Result<(), AttackError> {
    match attack.target {
        Location::Register(r) => state.set_reg(r, attack.value),
        Location::Memory(idx) => {
            let slot = state
                .data
                .get_mut(idx as usize)
                .ok_or(AttackError::DataOutOfRange(idx))?;
            *slot = attack.value;
        }
        Location::Code(a) => return Err(AttackError::CodeNotWritable(a)),
    }
    Ok(())
}

/// Validate an attack against a machine configuration before running.
pub fn check_attack(attack: &AttackSpec, config: &EmulatorConfig) -> Result<(), AttackError> {
    match attack.target {
        Location::Code(a) => Err(AttackError::CodeNotWritable(a)),
        Location::Memory(idx) if idx as usize >= config.data_words => {
            Err(AttackError::DataOutOfRange(idx))
        }
        _ => Ok(()),
    }
}

pub fn run(
    program: &Program,
    input: &[u32],
    attack: Option<&AttackSpec>,
    config: &EmulatorConfig,
) -> Result<Trace, EmuError> {
    run_observed(program, input, attack, config, |_| {})
}

/// Like [`run`], handing each event to `observer` as it retires. Observers see
/// immutable events only and cannot influence execution.
pub fn run_observed<F: FnMut(&TraceEvent)>(
    program: &Program,
    input: &[u32],
    attack: Option<&AttackSpec>,
    config: &EmulatorConfig,
    observer: F,
) -> Result<Trace, EmuError> {
    execute(program, input, attack, config, observer).map(|(t, _)| t)
}

/// Like [`run`], also returning the machine state after the last instruction.
pub fn run_to_end(
    program: &Program,
    input: &[u32],
    attack: Option<&AttackSpec>,
    config: &EmulatorConfig,
) -> Result<(Trace, MachineState), EmuError> {
    execute(program, input, attack, config, |_| {})
}

fn execute<F: FnMut(&TraceEvent)>(
    program: &Program,
    input: &[u32],
    attack: Option<&AttackSpec>,
    config: &EmulatorConfig,
    mut observer: F,
) -> Result<(Trace, MachineState), EmuError> {
    if input.len() > config.data_words {
        return Err(EmuError::InputTooLarge {
            input: input.len(),
            capacity: config.data_words,
        });
    }
    if let Some(a) = attack {
        check_attack(a, config)?;
    }
    let mut st = MachineState::new(program.entry(), config.data_words);
    st.data[..input.len()].copy_from_slice(input);

    let mut pending = attack.copied();
    let mut pc_hits = 0u32;
    let mut events = Vec::new();

    loop {
        if st.cycle >= config.cycle_cap {
            return Err(EmuError::Runaway(config.cycle_cap));
        }
        if let Some(a) = pending {
            let fire = match a.trigger {
                Trigger::Cycle(c) => st.cycle == c,
                Trigger::Pc { pc, occurrence } => {
                    if st.pc == pc {
                        pc_hits += 1;
                    }
                    st.pc == pc && pc_hits == occurrence.max(1)
                }
            };
            if fire {
                apply_attack(&mut st, &a)?;
                pending = None;
            }
        }

        let ev = step(program, &mut st);
        observer(&ev);
        let done = ev.fault.is_some() || matches!(ev.instr, Some(Instruction::Halt));
        events.push(ev);
        st.cycle += 1;
        if done {
            break;
        }
    }

    if pending.is_some() {
        return Err(AttackError::NotTriggered.into());
    }
    let trace = Trace {
        program_id: program.id().to_string(),
        input: input.to_vec(),
        events,
    };
    Ok((trace, st))
}

fn step(program: &Program, st: &mut MachineState) -> TraceEvent {
    let pc = st.pc;
    let mut ev = TraceEvent {
        cycle: st.cycle,
        pc,
        instr: None,
        taken: None,
        next_pc: pc,
        fault: None,
    };
    let Some(&ins) = program.fetch(pc) else {
        ev.fault = Some(Fault::PcOutOfRange);
        return ev;
    };
    ev.instr = Some(ins);
    let mut next = pc.next();

    use Instruction::*;
    match ins {
        Add { rd, rs1, rs2 } => st.set_reg(rd, st.reg(rs1).wrapping_add(st.reg(rs2))),
        Sub { rd, rs1, rs2 } => st.set_reg(rd, st.reg(rs1).wrapping_sub(st.reg(rs2))),
        Addi { rd, rs1, imm } => st.set_reg(rd, st.reg(rs1).wrapping_add(imm as u32)),
        Li { rd, imm } => st.set_reg(rd, imm as u32),
        La { rd, target } => st.set_reg(rd, target.value()),
        Mv { rd, rs } => st.set_reg(rd, st.reg(rs)),
        Ld { rd, base, offset } => match data_index(st, base, offset) {
            Some(i) => st.set_reg(rd, st.data[i]),
            None => {
                ev.fault = Some(Fault::DataOutOfRange);
                return ev;
            }
        },
        St { rs, base, offset } => match data_index(st, base, offset) {
            Some(i) => st.data[i] = st.reg(rs),
            None => {
                ev.fault = Some(Fault::DataOutOfRange);
                return ev;
            }
        },
        Branch { cond, rs1, rs2, target } => {
            let taken = cond.holds(st.reg(rs1), st.reg(rs2));
            ev.taken = Some(taken);
            if taken {
                next = target;
            }
        }
        Jump { target } => next = target,
        Jal { target } => {
            st.ra = pc.next().value();
            next = target;
        }
        Jr { rs } => next = Addr(st.reg(rs)),
        Jalr { rs } => {
            let t = Addr(st.reg(rs));
            st.ra = pc.next().value();
            next = t;
        }
        Ret => next = Addr(st.ra),
        Halt => next = pc,
    }
    ev.next_pc = next;
    st.pc = next;
    ev
}

fn data_index(st: &MachineState, base: Reg, offset: i32) -> Option<usize> {
    let idx = st.reg(base).wrapping_add(offset as u32) as usize;
    (idx < st.data.len()).then_some(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_program;

    #[test]
    fn straight_line_three_events() {
        let p = parse_program("li r1, 2\naddi r1, r1, 3\nhalt").unwrap();
        let t = run(&p, &[], None, &EmulatorConfig::default()).unwrap();
        assert_eq!(t.events.len(), 3);
        assert!(t.halted());
        assert!(t.events.iter().all(|e| e.taken.is_none()));
        for (i, e) in t.events.iter().enumerate() {
            assert_eq!(e.cycle, i as u64);
        }
        assert_eq!(t.events[0].next_pc, Addr(0x104));
    }

    #[test]
    fn r0_is_hardwired_zero() {
        let p = parse_program("li r0, 9\nbeq r0, r1, done\nhalt\ndone: halt").unwrap();
        let t = run(&p, &[], None, &EmulatorConfig::default()).unwrap();
        assert_eq!(t.events[1].taken, Some(true));
    }

    #[test]
    fn runaway_is_an_error() {
        let p = parse_program("top: addi r1, r1, 1\nj top\nhalt").unwrap();
        let cfg = EmulatorConfig { cycle_cap: 100, ..Default::default() };
        assert_eq!(run(&p, &[], None, &cfg), Err(EmuError::Runaway(100)));
    }

    #[test]
    fn jump_outside_program_records_fault() {
        let p = parse_program("li r1, 0x4000\njr r1\nhalt").unwrap();
        let t = run(&p, &[], None, &EmulatorConfig::default()).unwrap();
        assert_eq!(t.events.len(), 3);
        assert_eq!(t.fault(), Some(Addr(0x4000)));
        assert!(!t.halted());
    }

    #[test]
    fn data_fault_recorded() {
        let p = parse_program("li r1, 100\nld r2, [r1+0]\nhalt").unwrap();
        let cfg = EmulatorConfig { data_words: 10, ..Default::default() };
        let t = run(&p, &[], None, &cfg).unwrap();
        assert_eq!(t.events.last().unwrap().fault, Some(Fault::DataOutOfRange));
    }

    #[test]
    fn code_targets_are_rejected() {
        let st = MachineState::new(Addr(0x100), 4);
        let a = AttackSpec {
            kind: AttackKind::CorruptCodePointer,
            trigger: Trigger::Cycle(0),
            target: Location::Code(Addr(0x100)),
            value: 0,
        };
        assert_eq!(inject(&st, &a), Err(AttackError::CodeNotWritable(Addr(0x100))));
        let p = parse_program("halt").unwrap();
        assert!(matches!(
            run(&p, &[], Some(&a), &EmulatorConfig::default()),
            Err(EmuError::Attack(AttackError::CodeNotWritable(_)))
        ));
    }

    #[test]
    fn inject_mutates_exactly_one_location() {
        let st = MachineState::new(Addr(0x100), 4);
        let a = AttackSpec {
            kind: AttackKind::CorruptDecisionVar,
            trigger: Trigger::Cycle(0),
            target: Location::Memory(2),
            value: 7,
        };
        let after = inject(&st, &a).unwrap();
        assert_eq!(after.data, vec![0, 0, 7, 0]);
        assert_eq!(after.regs, st.regs);
        assert_eq!(after.pc, st.pc);
        let oob = AttackSpec { target: Location::Memory(4), ..a };
        assert_eq!(inject(&st, &oob), Err(AttackError::DataOutOfRange(4)));
    }

    #[test]
    fn link_register_overwrite_redirects_return() {
        let src = "jal f\nhalt\nevil: halt\nf: ret";
        let p = parse_program(src).unwrap();
        let a = AttackSpec {
            kind: AttackKind::CorruptCodePointer,
            trigger: Trigger::Pc { pc: Addr(0x10c), occurrence: 1 },
            target: Location::Register(Reg::Ra),
            value: 0x108,
        };
        let t = run(&p, &[], Some(&a), &EmulatorConfig::default()).unwrap();
        let ret = &t.events[1];
        assert_eq!(ret.instr, Some(Instruction::Ret));
        assert_eq!(ret.next_pc, Addr(0x108));
    }

    #[test]
    fn jsonl_round_trip() {
        let p = parse_program("li r1, 1\nbeq r1, r0, out\nj out\nout: halt").unwrap();
        let t = run(&p, &[], None, &EmulatorConfig::default()).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().nth(1).unwrap().contains("\"mnemonic\":\"beq\""));
        let back = read_events_jsonl(&buf[..]).unwrap();
        assert_eq!(back, t.events);
    }
}
