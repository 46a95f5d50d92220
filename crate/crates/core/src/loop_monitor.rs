//! Loop path compression.
//!
//! Inside a tracked loop, every branch contributes bits to a path identifier
//! for the current traversal: `1`/`0` for taken/not-taken conditionals, `1`
//! for direct jumps and calls, and an `n`-bit code for register-indirect
//! transfers. When a traversal ends the identifier is looked up in the
//! loop's counter table. A new path has its `(src, dest)` pairs hashed once; a
//! repeated path only bumps its count. The per-loop tables are reported as
//! metadata alongside the authenticator.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::addr::Addr;
use crate::branch_filter::{
    AnnotatedEvent, BranchEvent, BranchKind, LoopContext, LoopStatusKind, DEFAULT_MAX_DEPTH,
};
use crate::hash_engine::HashSink;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Width `n` of the code for an indirect target.
    pub indirect_bits: u8,
    /// Maximum path identifier width `ℓ`.
    pub path_bits: u8,
    pub max_depth: u8,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            indirect_bits: 4,
            path_bits: 16,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("indirect code width must be 1..=8 bits, got {0}")]
    IndirectBits(u8),
    #[error("path width must be between the indirect width and 64 bits, got {0}")]
    PathBits(u8),
    #[error("max loop depth must be at least 1")]
    MaxDepth,
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=8).contains(&self.indirect_bits) {
            return Err(ConfigError::IndirectBits(self.indirect_bits));
        }
        if self.path_bits < self.indirect_bits || self.path_bits > 64 {
            return Err(ConfigError::PathBits(self.path_bits));
        }
        if self.max_depth == 0 {
            return Err(ConfigError::MaxDepth);
        }
        Ok(())
    }

    /// Distinct indirect targets a loop can encode; code 0 marks overflow.
    pub fn indirect_capacity(&self) -> usize {
        (1usize << self.indirect_bits) - 1
    }
}

/// Counter-table storage for one loop level: one counter byte per possible
/// `ℓ`-bit identifier, per depth level.
pub fn memory_bits(path_bits: u32, depth: u32) -> u128 {
    8u128 * (1u128 << path_bits) * depth as u128
}

/// Variable-length bit string, first branch in the most significant position.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct PathId {
    bits: u64,
    len: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PathIdError {
    #[error("path identifier may only contain 0 and 1")]
    BadDigit,
    #[error("path identifier longer than 64 bits")]
    TooLong,
}

impl PathId {
    pub const EMPTY: PathId = PathId { bits: 0, len: 0 };
    /// Stands for every traversal that outgrew the path width.
    pub const OVERFLOW: PathId = PathId { bits: 0, len: OVERFLOW_LEN };

    pub fn len(&self) -> usize {
        if self.is_overflow() {
            0
        } else {
            self.len as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_overflow(&self) -> bool {
        self.len == OVERFLOW_LEN
    }

    pub fn value(&self) -> u64 {
        self.bits
    }

    /// Append the low `width` bits of `value`. Caller keeps the total ≤ 64.
    pub fn push(&mut self, value: u64, width: usize) {
        debug_assert!(!self.is_overflow() && self.len as usize + width <= 64 && width < 64);
        let mask = (1u64 << width) - 1;
        self.bits = (self.bits << width) | (value & mask);
        self.len += width as u8;
    }

    /// Bit `i`, counted from the first branch.
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len());
        (self.bits >> (self.len() - 1 - i)) & 1 == 1
    }

    /// `width` bits starting at `pos`, or `None` if they run past the end.
    pub fn field(&self, pos: usize, width: usize) -> Option<u64> {
        if pos + width > self.len() || width == 0 {
            return None;
        }
        let shift = self.len() - pos - width;
        Some((self.bits >> shift) & ((1u64 << width) - 1))
    }

    pub fn from_bits(bits: &[bool]) -> Result<PathId, PathIdError> {
        if bits.len() > 64 {
            return Err(PathIdError::TooLong);
        }
        let mut p = PathId::EMPTY;
        for &b in bits {
            p.push(b as u64, 1);
        }
        Ok(p)
    }

    /// Packed MSB-first into `ceil(len/8)` bytes.
    pub fn packed(&self) -> Vec<u8> {
        let n = self.len();
        let mut out = vec![0u8; n.div_ceil(8)];
        for i in 0..n {
            if self.bit(i) {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    fn from_packed(bytes: &[u8], len: usize) -> PathId {
        let mut p = PathId::EMPTY;
        for i in 0..len {
            p.push(((bytes[i / 8] >> (7 - i % 8)) & 1) as u64, 1);
        }
        p
    }
}

const OVERFLOW_LEN: u8 = 0xFF;

impl fmt::Display for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_overflow() {
            return f.write_str("overflow");
        }
        if self.is_empty() {
            return f.write_str("ε");
        }
        for i in 0..self.len() {
            f.write_str(if self.bit(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl fmt::Debug for PathId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PathId({self})")
    }
}

impl FromStr for PathId {
    type Err = PathIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overflow" => return Ok(PathId::OVERFLOW),
            "ε" | "" => return Ok(PathId::EMPTY),
            _ => {}
        }
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(PathIdError::BadDigit),
            })
            .collect::<Result<Vec<_>, _>>()?;
        PathId::from_bits(&bits)
    }
}

impl Serialize for PathId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_empty() {
            return s.serialize_str("");
        }
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PathId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-loop path counters, kept in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoopCounterTable {
    index: HashMap<PathId, usize>,
    entries: Vec<PathCount>,
}

impl LoopCounterTable {
    pub fn count(&self, p: PathId) -> u64 {
        self.index.get(&p).map_or(0, |&i| self.entries[i].count)
    }

    /// Increment and return the new count.
    pub fn record(&mut self, p: PathId) -> u64 {
        match self.index.get(&p) {
            Some(&i) => {
                self.entries[i].count += 1;
                self.entries[i].count
            }
            None => {
                self.index.insert(p, self.entries.len());
                self.entries.push(PathCount { path: p, count: 1 });
                1
            }
        }
    }

    pub fn entries(&self) -> &[PathCount] {
        &self.entries
    }
}

/// Per-loop mapping from indirect targets to `n`-bit codes. Codes are handed
/// out in first-seen order from 1; code 0 is shared by every target past the
/// table's capacity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndirectTargetTable {
    capacity: usize,
    codes: HashMap<Addr, u64>,
    targets: Vec<Addr>,
}

pub const INDIRECT_OVERFLOW_CODE: u64 = 0;

impl IndirectTargetTable {
    pub fn new(capacity: usize) -> Self {
        IndirectTargetTable {
            capacity,
            codes: HashMap::new(),
            targets: Vec::new(),
        }
    }

    pub fn encode(&mut self, target: Addr) -> u64 {
        if let Some(&c) = self.codes.get(&target) {
            return c;
        }
        if self.targets.len() >= self.capacity {
            return INDIRECT_OVERFLOW_CODE;
        }
        self.targets.push(target);
        let code = self.targets.len() as u64;
        self.codes.insert(target, code);
        code
    }

    /// Target for `code`, if assigned.
    pub fn decode(targets: &[Addr], code: u64) -> Option<Addr> {
        (code as usize).checked_sub(1).and_then(|i| targets.get(i)).copied()
    }

    pub fn targets(&self) -> &[Addr] {
        &self.targets
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathCount {
    pub path: PathId,
    pub count: u64,
}

/// Metadata for one loop execution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopSession {
    pub loop_entry: Addr,
    /// 1 for outermost loops; 0 marks a fault record.
    pub depth: u8,
    /// Index of the enclosing session.
    pub parent: Option<u32>,
    pub paths: Vec<PathCount>,
    pub indirect_targets: Vec<Addr>,
}

impl LoopSession {
    /// Record appended when execution stopped on a fault at `pc`.
    pub fn fault_marker(pc: Addr) -> Self {
        LoopSession {
            loop_entry: pc,
            depth: 0,
            parent: None,
            paths: Vec::new(),
            indirect_targets: Vec::new(),
        }
    }

    pub fn is_fault_marker(&self) -> bool {
        self.depth == 0
    }

    pub fn iterations(&self) -> u64 {
        self.paths.iter().map(|p| p.count).sum()
    }
}

pub enum StepOutcome {
    Buffered,
    /// Path width exceeded: these pairs must be hashed right away.
    Direct(Vec<(Addr, Addr)>),
}

#[derive(Debug, PartialEq, Eq)]
pub enum CloseOutcome {
    /// First occurrence: hash the traversal's pairs.
    NewPath { path: PathId, pairs: Vec<(Addr, Addr)> },
    CountIncrement { path: PathId, count: u64 },
}

/// Encoder state for one active loop.
#[derive(Clone, Debug)]
pub struct LoopState {
    pub context: LoopContext,
    config: MonitorConfig,
    partial: PathId,
    pending: Vec<(Addr, Addr)>,
    overflowed: bool,
    counters: LoopCounterTable,
    targets: IndirectTargetTable,
}

impl LoopState {
    pub fn new(context: LoopContext, config: MonitorConfig) -> Self {
        LoopState {
            context,
            config,
            partial: PathId::EMPTY,
            pending: Vec::new(),
            overflowed: false,
            counters: LoopCounterTable::default(),
            targets: IndirectTargetTable::new(config.indirect_capacity()),
        }
    }

    pub fn partial(&self) -> PathId {
        if self.overflowed {
            PathId::OVERFLOW
        } else {
            self.partial
        }
    }

    pub fn counters(&self) -> &LoopCounterTable {
        &self.counters
    }

    /// Bits a branch adds to the current path.
    fn contribution(&mut self, ev: &BranchEvent) -> (u64, usize) {
        match ev.kind {
            BranchKind::CondTaken | BranchKind::DirectJump | BranchKind::Call => (1, 1),
            BranchKind::CondNotTaken => (0, 1),
            BranchKind::IndirectJump | BranchKind::IndirectCall | BranchKind::Return => (
                self.targets.encode(ev.dest),
                self.config.indirect_bits as usize,
            ),
        }
    }

    pub fn encode_step(&mut self, ev: &BranchEvent) -> StepOutcome {
        if self.overflowed {
            return StepOutcome::Direct(vec![ev.pair()]);
        }
        let (value, width) = self.contribution(ev);
        if self.partial.len() + width > self.config.path_bits as usize {
            self.overflowed = true;
            let mut flush = std::mem::take(&mut self.pending);
            flush.push(ev.pair());
            return StepOutcome::Direct(flush);
        }
        self.partial.push(value, width);
        self.pending.push(ev.pair());
        StepOutcome::Buffered
    }

    /// End the current traversal.
    pub fn close_path(&mut self) -> CloseOutcome {
        let path = self.partial();
        self.partial = PathId::EMPTY;
        self.overflowed = false;
        let pairs = std::mem::take(&mut self.pending);
        let count = self.counters.record(path);
        if count == 1 {
            CloseOutcome::NewPath { path, pairs }
        } else {
            CloseOutcome::CountIncrement { path, count }
        }
    }

    pub fn finalize(self) -> LoopSession {
        LoopSession {
            loop_entry: self.context.entry_addr,
            depth: self.context.depth,
            parent: self.context.parent.map(|p| p as u32),
            paths: self.counters.entries,
            indirect_targets: self.targets.targets,
        }
    }
}

/// A traversal that ended during the last [`LoopMonitor::process`] call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedPath {
    pub session: usize,
    pub path: PathId,
    /// Occurrences so far, including this one. 1 means its pairs were hashed.
    pub count: u64,
}

/// Drives [`LoopState`]s from an annotated branch stream and forwards the pairs
/// that must be hashed to `sink`.
pub struct LoopMonitor<S: HashSink> {
    config: MonitorConfig,
    sink: S,
    active: Vec<LoopState>,
    sessions: Vec<Option<LoopSession>>,
    new_paths: u64,
    repeated_paths: u64,
    closed: Vec<ClosedPath>,
}

impl<S: HashSink> LoopMonitor<S> {
    pub fn new(config: MonitorConfig, sink: S) -> Self {
        LoopMonitor {
            config,
            sink,
            active: Vec::new(),
            sessions: Vec::new(),
            new_paths: 0,
            repeated_paths: 0,
            closed: Vec::new(),
        }
    }

    fn state_mut(&mut self, session: usize) -> &mut LoopState {
        self.active
            .iter_mut()
            .rev()
            .find(|s| s.context.session == session)
            .expect("status for an active loop")
    }

    fn emit(&mut self, pairs: Vec<(Addr, Addr)>, cycle: u64) {
        for (s, d) in pairs {
            self.sink.absorb_pair(s, d, cycle);
        }
    }

    fn close(&mut self, session: usize, cycle: u64) {
        match self.state_mut(session).close_path() {
            CloseOutcome::NewPath { path, pairs } => {
                self.new_paths += 1;
                self.closed.push(ClosedPath { session, path, count: 1 });
                self.emit(pairs, cycle);
            }
            CloseOutcome::CountIncrement { path, count } => {
                self.repeated_paths += 1;
                self.closed.push(ClosedPath { session, path, count });
            }
        }
    }

    pub fn process(&mut self, a: &AnnotatedEvent) {
        self.closed.clear();
        let ev = &a.event;
        for st in &a.before {
            debug_assert_eq!(st.kind, LoopStatusKind::Enter);
            let session = st.context.session;
            if self.sessions.len() <= session {
                self.sessions.resize(session + 1, None);
            }
            self.active.push(LoopState::new(st.context, self.config));
        }
        match a.owner {
            None => self.sink.absorb_pair(ev.src, ev.dest, ev.cycle),
            Some(s) => {
                if let StepOutcome::Direct(pairs) = self.state_mut(s).encode_step(ev) {
                    self.emit(pairs, ev.cycle);
                }
            }
        }
        for st in &a.after {
            let session = st.context.session;
            self.close(session, ev.cycle);
            if st.kind == LoopStatusKind::Exit {
                let pos = self
                    .active
                    .iter()
                    .rposition(|s| s.context.session == session)
                    .expect("exit for an active loop");
                let state = self.active.remove(pos);
                self.sessions[session] = Some(state.finalize());
            }
        }
    }

    /// Loops currently being encoded, outermost first.
    pub fn active(&self) -> &[LoopState] {
        &self.active
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn last_closed(&self) -> &[ClosedPath] {
        &self.closed
    }

    /// Number of traversals hashed vs. only counted.
    pub fn path_stats(&self) -> (u64, u64) {
        (self.new_paths, self.repeated_paths)
    }

    pub fn finish(mut self) -> (Vec<LoopSession>, S) {
        while let Some(state) = self.active.pop() {
            let session = state.context.session;
            self.sessions[session] = Some(state.finalize());
        }
        let sessions = self.sessions.into_iter().flatten().collect();
        (sessions, self.sink)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetadataError {
    #[error("loop metadata truncated at byte {0}")]
    Truncated(usize),
    #[error("path bit length {0} exceeds 64")]
    BadPathLength(u8),
    #[error("non-zero padding bits after a {0}-bit path")]
    NonZeroPadding(u8),
    #[error("loop session has more than {max} {what}")]
    TooLarge { what: &'static str, max: usize },
}

const NO_PARENT: u32 = u32::MAX;

/// Canonical byte encoding of loop metadata.
pub fn encode_metadata(sessions: &[LoopSession]) -> Result<Vec<u8>, MetadataError> {
    let mut out = Vec::new();
    let n = u32::try_from(sessions.len()).map_err(|_| MetadataError::TooLarge {
        what: "sessions",
        max: u32::MAX as usize,
    })?;
    out.extend_from_slice(&n.to_be_bytes());
    for s in sessions {
        out.extend_from_slice(&s.loop_entry.0.to_be_bytes());
        out.push(s.depth);
        out.extend_from_slice(&s.parent.unwrap_or(NO_PARENT).to_be_bytes());
        let np = u16::try_from(s.paths.len()).map_err(|_| MetadataError::TooLarge {
            what: "paths",
            max: u16::MAX as usize,
        })?;
        out.extend_from_slice(&np.to_be_bytes());
        for p in &s.paths {
            if p.path.is_overflow() {
                out.push(OVERFLOW_LEN);
            } else {
                out.push(p.path.len() as u8);
                out.extend_from_slice(&p.path.packed());
            }
            out.extend_from_slice(&p.count.to_be_bytes());
        }
        let nt = u8::try_from(s.indirect_targets.len()).map_err(|_| MetadataError::TooLarge {
            what: "indirect targets",
            max: u8::MAX as usize,
        })?;
        out.push(nt);
        for t in &s.indirect_targets {
            out.extend_from_slice(&t.0.to_be_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MetadataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(MetadataError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], MetadataError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Decode metadata from the front of `buf`; returns the sessions and the
/// number of bytes consumed.
pub fn decode_metadata(buf: &[u8]) -> Result<(Vec<LoopSession>, usize), MetadataError> {
    let mut r = Reader { buf, pos: 0 };
    let n = u32::from_be_bytes(r.array()?);
    let mut sessions = Vec::new();
    for _ in 0..n {
        let loop_entry = Addr(u32::from_be_bytes(r.array()?));
        let depth = r.array::<1>()?[0];
        let parent = match u32::from_be_bytes(r.array()?) {
            NO_PARENT => None,
            p => Some(p),
        };
        let np = u16::from_be_bytes(r.array()?);
        let mut paths = Vec::new();
        for _ in 0..np {
            let len = r.array::<1>()?[0];
            let path = if len == OVERFLOW_LEN {
                PathId::OVERFLOW
            } else if len > 64 {
                return Err(MetadataError::BadPathLength(len));
            } else {
                let bytes = r.take((len as usize).div_ceil(8))?;
                let path = PathId::from_packed(bytes, len as usize);
                // Only one byte string may encode a path.
                if path.packed() != bytes {
                    return Err(MetadataError::NonZeroPadding(len));
                }
                path
            };
            let count = u64::from_be_bytes(r.array()?);
            paths.push(PathCount { path, count });
        }
        let nt = r.array::<1>()?[0];
        let mut indirect_targets = Vec::new();
        for _ in 0..nt {
            indirect_targets.push(Addr(u32::from_be_bytes(r.array()?)));
        }
        sessions.push(LoopSession {
            loop_entry,
            depth,
            parent,
            paths,
            indirect_targets,
        });
    }
    Ok((sessions, r.pos))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch_filter::{detect_loops, LoopKind};

    fn p(s: &str) -> PathId {
        s.parse().unwrap()
    }

    fn ctx() -> LoopContext {
        LoopContext {
            session: 0,
            kind: LoopKind::Backedge,
            entry_addr: Addr(0x104),
            backedge_addr: Addr(0x118),
            exit_addr: Addr(0x11c),
            depth: 1,
            call_depth_at_entry: 0,
            parent: None,
        }
    }

    fn ev(src: u32, dest: u32, kind: BranchKind) -> BranchEvent {
        BranchEvent {
            cycle: 0,
            src: Addr(src),
            dest: Addr(dest),
            kind,
            linking: kind.is_linking(),
            loop_depth: 1,
        }
    }

    #[test]
    fn memory_formula() {
        assert_eq!(memory_bits(16, 3), 1_572_864);
        assert_eq!(memory_bits(10, 1), 8192);
    }

    #[test]
    fn config_limits() {
        assert!(MonitorConfig::default().validate().is_ok());
        let bad = MonitorConfig { indirect_bits: 9, ..Default::default() };
        assert_eq!(bad.validate(), Err(ConfigError::IndirectBits(9)));
        let bad = MonitorConfig { indirect_bits: 8, path_bits: 4, max_depth: 1 };
        assert_eq!(bad.validate(), Err(ConfigError::PathBits(4)));
        assert_eq!(MonitorConfig::default().indirect_capacity(), 15);
    }

    #[test]
    fn path_id_is_msb_first() {
        let mut id = PathId::EMPTY;
        id.push(0, 1);
        id.push(1, 1);
        id.push(1, 1);
        assert_eq!(id.to_string(), "011");
        assert_eq!(id.value(), 0b011);
        assert_eq!(id.packed(), vec![0b0110_0000]);
        assert_eq!(p("0011").field(1, 2), Some(0b01));
        assert_ne!(p("011"), p("0011"));
        assert_eq!(PathId::OVERFLOW.to_string(), "overflow");
        assert_eq!(p("overflow"), PathId::OVERFLOW);
        assert!("012".parse::<PathId>().is_err());
    }

    #[test]
    fn repeated_traversal_only_counts() {
        let mut st = LoopState::new(ctx(), MonitorConfig::default());
        st.encode_step(&ev(0x108, 0x10c, BranchKind::CondNotTaken));
        st.encode_step(&ev(0x118, 0x104, BranchKind::DirectJump));
        assert_eq!(st.partial(), p("01"));
        assert!(matches!(st.close_path(), CloseOutcome::NewPath { ref pairs, .. } if pairs.len() == 2));
        st.encode_step(&ev(0x108, 0x10c, BranchKind::CondNotTaken));
        st.encode_step(&ev(0x118, 0x104, BranchKind::DirectJump));
        assert_eq!(
            st.close_path(),
            CloseOutcome::CountIncrement { path: p("01"), count: 2 }
        );
        let s = st.finalize();
        assert_eq!(s.paths, vec![PathCount { path: p("01"), count: 2 }]);
    }

    #[test]
    fn width_overflow_hashes_directly() {
        let cfg = MonitorConfig { indirect_bits: 1, path_bits: 2, max_depth: 3 };
        let mut st = LoopState::new(ctx(), cfg);
        assert!(matches!(st.encode_step(&ev(0x108, 0x10c, BranchKind::CondNotTaken)), StepOutcome::Buffered));
        assert!(matches!(st.encode_step(&ev(0x110, 0x114, BranchKind::CondNotTaken)), StepOutcome::Buffered));
        match st.encode_step(&ev(0x118, 0x104, BranchKind::DirectJump)) {
            StepOutcome::Direct(pairs) => assert_eq!(pairs.len(), 3),
            StepOutcome::Buffered => panic!("expected overflow"),
        }
        assert!(matches!(st.encode_step(&ev(0x108, 0x10c, BranchKind::CondTaken)), StepOutcome::Direct(ref v) if v.len() == 1));
        assert_eq!(
            st.close_path(),
            CloseOutcome::NewPath { path: PathId::OVERFLOW, pairs: vec![] }
        );
        // The next traversal starts clean.
        st.encode_step(&ev(0x108, 0x10c, BranchKind::CondNotTaken));
        assert_eq!(st.partial(), p("0"));
    }

    #[test]
    fn indirect_codes_first_seen_then_overflow() {
        let mut t = IndirectTargetTable::new(2);
        assert_eq!(t.encode(Addr(0x200)), 1);
        assert_eq!(t.encode(Addr(0x300)), 2);
        assert_eq!(t.encode(Addr(0x200)), 1);
        assert_eq!(t.encode(Addr(0x400)), INDIRECT_OVERFLOW_CODE);
        assert_eq!(t.targets(), &[Addr(0x200), Addr(0x300)]);
        assert_eq!(IndirectTargetTable::decode(t.targets(), 2), Some(Addr(0x300)));
        assert_eq!(IndirectTargetTable::decode(t.targets(), 0), None);
    }

    #[test]
    fn monitor_hashes_outside_pairs_and_first_paths() {
        // Loop [0x104, 0x10c]: two identical traversals then exit.
        let evs = [
            ev(0x100, 0x104, BranchKind::DirectJump),
            ev(0x104, 0x108, BranchKind::CondNotTaken),
            ev(0x10c, 0x104, BranchKind::DirectJump),
            ev(0x104, 0x108, BranchKind::CondNotTaken),
            ev(0x10c, 0x104, BranchKind::DirectJump),
            ev(0x104, 0x110, BranchKind::CondTaken),
        ];
        let a = detect_loops(&evs, 3);
        let mut m = LoopMonitor::new(MonitorConfig::default(), Vec::new());
        for e in &a.events {
            m.process(e);
        }
        assert_eq!(m.path_stats(), (2, 1));
        let (sessions, hashed) = m.finish();
        assert_eq!(sessions.len(), 1);
        assert_eq!(
            sessions[0].paths,
            vec![
                PathCount { path: p("01"), count: 2 },
                PathCount { path: p("1"), count: 1 }
            ]
        );
        let pairs: Vec<(u32, u32)> = hashed.iter().map(|(s, d, _)| (s.0, d.0)).collect();
        assert_eq!(pairs, vec![(0x100, 0x104), (0x104, 0x108), (0x10c, 0x104), (0x104, 0x110)]);
    }

    #[test]
    fn closed_paths_are_reported_per_step() {
        let evs = [
            ev(0x104, 0x108, BranchKind::CondNotTaken),
            ev(0x10c, 0x104, BranchKind::DirectJump),
            ev(0x104, 0x108, BranchKind::CondNotTaken),
            ev(0x10c, 0x104, BranchKind::DirectJump),
            ev(0x104, 0x110, BranchKind::CondTaken),
        ];
        let a = detect_loops(&evs, 3);
        let mut m = LoopMonitor::new(MonitorConfig::default(), Vec::new());
        let mut log = Vec::new();
        for e in &a.events {
            m.process(e);
            let partial = m.active().last().map(|s| s.partial().to_string());
            log.push((partial, m.last_closed().iter().map(|c| (c.path.to_string(), c.count)).collect::<Vec<_>>()));
        }
        assert_eq!(log[0], (Some("0".into()), vec![]));
        assert_eq!(log[1], (Some("ε".into()), vec![("01".into(), 1)]));
        assert_eq!(log[3], (Some("ε".into()), vec![("01".into(), 2)]));
        assert_eq!(log[4], (None, vec![("1".into(), 1)]));
    }

    #[test]
    fn metadata_round_trip() {
        let sessions = vec![
            LoopSession {
                loop_entry: Addr(0x104),
                depth: 1,
                parent: None,
                paths: vec![
                    PathCount { path: p("0011"), count: 1 },
                    PathCount { path: p("011"), count: 2 },
                    PathCount { path: PathId::OVERFLOW, count: 7 },
                    PathCount { path: PathId::EMPTY, count: 1 },
                ],
                indirect_targets: vec![Addr(0x200)],
            },
            LoopSession::fault_marker(Addr(0x500)),
        ];
        let bytes = encode_metadata(&sessions).unwrap();
        let (back, used) = decode_metadata(&bytes).unwrap();
        assert_eq!(back, sessions);
        assert_eq!(used, bytes.len());
        assert!(matches!(decode_metadata(&bytes[..bytes.len() - 1]), Err(MetadataError::Truncated(_))));
        assert_eq!(encode_metadata(&[]).unwrap(), vec![0, 0, 0, 0]);
        // "011" packs as 0b0110_0000; a set padding bit must not decode.
        let one = LoopSession { paths: vec![PathCount { path: p("011"), count: 1 }], ..LoopSession::fault_marker(Addr(4)) };
        let mut bytes = encode_metadata(&[one]).unwrap();
        let at = 4 + 4 + 1 + 4 + 2 + 1;
        assert_eq!(bytes[at], 0b0110_0000);
        bytes[at] |= 1;
        assert_eq!(decode_metadata(&bytes), Err(MetadataError::NonZeroPadding(3)));
    }
}
