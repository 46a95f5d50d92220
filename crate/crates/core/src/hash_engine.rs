//! SHA3-512 authenticator over `(src, dest)` pairs, plus a cycle model of the
//! absorb cadence used to size the hash engine's input FIFO.
//!
//! Each pair is absorbed as one 64-bit word: `src` then `dest`, both
//! big-endian. The Keccak rate for SHA3-512 is 576 bits, so nine pairs fill a
//! block; the permutation then keeps the engine busy for a few cycles.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha3::{Digest, Sha3_512};

use crate::addr::Addr;

/// Pair words per 576-bit block.
pub const BLOCK_WORDS: u32 = 9;
/// Cycles the permutation occupies the engine after a block fills.
pub const BUSY_CYCLES: u64 = 3;
pub const AUTH_BYTES: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Authenticator(pub [u8; AUTH_BYTES]);

impl Authenticator {
    pub fn as_bytes(&self) -> &[u8; AUTH_BYTES] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Authenticator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Authenticator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Authenticator({})", self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("authenticator must be {AUTH_BYTES} bytes of hex")]
pub struct AuthenticatorParseError;

impl FromStr for Authenticator {
    type Err = AuthenticatorParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; AUTH_BYTES];
        hex::decode_to_slice(s, &mut out).map_err(|_| AuthenticatorParseError)?;
        Ok(Authenticator(out))
    }
}

impl Serialize for Authenticator {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Authenticator {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The word absorbed for one branch.
pub fn pair_word(src: Addr, dest: Addr) -> [u8; 8] {
    let mut w = [0u8; 8];
    w[..4].copy_from_slice(&src.0.to_be_bytes());
    w[4..].copy_from_slice(&dest.0.to_be_bytes());
    w
}

/// Anything that accepts the pairs the loop monitor decides to hash.
pub trait HashSink {
    fn absorb_pair(&mut self, src: Addr, dest: Addr, cycle: u64);
}

/// Records emitted pairs with their emission cycle.
impl HashSink for Vec<(Addr, Addr, u64)> {
    fn absorb_pair(&mut self, src: Addr, dest: Addr, cycle: u64) {
        self.push((src, dest, cycle));
    }
}

/// Incremental authenticator. Finalizing consumes the engine, so nothing can
/// be absorbed after the digest is taken.
#[derive(Clone, Default)]
pub struct HashEngine {
    hasher: Sha3_512,
    words: u64,
}

impl HashEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn absorb(&mut self, src: Addr, dest: Addr) {
        self.hasher.update(pair_word(src, dest));
        self.words += 1;
    }

    pub fn words(&self) -> u64 {
        self.words
    }

    pub fn finalize(self) -> Authenticator {
        Authenticator(self.hasher.finalize().into())
    }
}

impl fmt::Debug for HashEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HashEngine").field("words", &self.words).finish()
    }
}

impl HashSink for HashEngine {
    fn absorb_pair(&mut self, src: Addr, dest: Addr, _cycle: u64) {
        self.absorb(src, dest);
    }
}

/// One-shot digest of a pair sequence.
pub fn authenticate<I: IntoIterator<Item = (Addr, Addr)>>(pairs: I) -> Authenticator {
    let mut e = HashEngine::new();
    for (s, d) in pairs {
        e.absorb(s, d);
    }
    e.finalize()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AbsorbError {
    #[error("arrival cycles must be strictly increasing (index {0})")]
    NotIncreasing(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsorbReport {
    pub max_occupancy: usize,
    /// Set when occupancy ever exceeded the buffer size. Words are still kept.
    pub overflow: bool,
    /// Cycle of the last absorb, `None` for an empty schedule.
    pub completion_cycle: Option<u64>,
    pub absorbed: usize,
    pub blocks: usize,
}

/// Per-cycle snapshot for visualizing the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleState {
    pub cycle: u64,
    pub arrived: bool,
    pub absorbed: bool,
    /// Permutation running during this cycle.
    pub busy: bool,
    /// Words in the block being filled after this cycle.
    pub fill: u32,
    /// Words waiting in the FIFO after this cycle.
    pub occupancy: usize,
}

/// Cycle model: one word may be absorbed per cycle; after the ninth word of a
/// block the engine is busy for [`BUSY_CYCLES`] cycles. Words arriving while
/// the engine cannot take them wait in a FIFO of `buffer` entries.
pub fn simulate_absorb(arrivals: &[u64], buffer: usize) -> Result<AbsorbReport, AbsorbError> {
    run_absorb(arrivals, buffer, None)
}

/// [`simulate_absorb`] with a per-cycle trace.
pub fn absorb_timeline(
    arrivals: &[u64],
    buffer: usize,
) -> Result<(AbsorbReport, Vec<CycleState>), AbsorbError> {
    let mut states = Vec::new();
    let report = run_absorb(arrivals, buffer, Some(&mut states))?;
    Ok((report, states))
}

/// Arrival schedule for pairs handed over at `cycles` through a single write
/// port: pairs flushed together leave one per cycle.
pub fn single_port_arrivals(cycles: &[u64]) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(cycles.len());
    for &c in cycles {
        let t = out.last().map_or(c, |&prev| c.max(prev + 1));
        out.push(t);
    }
    out
}

fn run_absorb(
    arrivals: &[u64],
    buffer: usize,
    mut timeline: Option<&mut Vec<CycleState>>,
) -> Result<AbsorbReport, AbsorbError> {
    if let Some(i) = arrivals.windows(2).position(|w| w[0] >= w[1]) {
        return Err(AbsorbError::NotIncreasing(i + 1));
    }
    let mut report = AbsorbReport {
        max_occupancy: 0,
        overflow: false,
        completion_cycle: None,
        absorbed: 0,
        blocks: 0,
    };
    let Some(&first) = arrivals.first() else {
        return Ok(report);
    };

    let mut queue: VecDeque<u64> = VecDeque::new();
    let mut next = 0;
    let mut fill = 0u32;
    // The engine may absorb again once the cycle counter passes this value.
    let mut busy_until: Option<u64> = None;
    let mut t = first;
    while next < arrivals.len() || !queue.is_empty() {
        let arrived = next < arrivals.len() && arrivals[next] == t;
        if arrived {
            queue.push_back(t);
            next += 1;
        }
        let busy = busy_until.is_some_and(|b| t <= b);
        let mut absorbed = false;
        if !busy && queue.pop_front().is_some() {
            absorbed = true;
            report.absorbed += 1;
            report.completion_cycle = Some(t);
            fill += 1;
            if fill == BLOCK_WORDS {
                fill = 0;
                report.blocks += 1;
                busy_until = Some(t + BUSY_CYCLES);
            }
        }
        let occupancy = queue.len();
        report.max_occupancy = report.max_occupancy.max(occupancy);
        if occupancy > buffer {
            report.overflow = true;
        }
        if let Some(tl) = timeline.as_deref_mut() {
            tl.push(CycleState { cycle: t, arrived, absorbed, busy, fill, occupancy });
        }
        t += 1;
        // Skip idle stretches with an empty queue.
        if queue.is_empty() && next < arrivals.len() && timeline.is_none() {
            t = t.max(arrivals[next]);
        }
    }
    Ok(report)
}
