//! Measurement, report format, and the prover/verifier exchange.
//!
//! The verifier issues a challenge `(program, input, nonce)`. The prover runs
//! the program, measures it into an authenticator `A` and loop metadata `L`,
//! and signs `"LOFAT1" ‖ A ‖ L ‖ nonce ‖ program hash ‖ program id`. The
//! verifier checks freshness and the signature, checks every loop path
//! against the static CFG, then replays the program on the challenge input and
//! compares measurements.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::addr::{hex_bytes, Addr};
use crate::branch_filter::{detect_loops, filter, LoopAnalysis};
use crate::cfg::{build_cfg, Cfg, CfgError};
use crate::emulator::{run_observed, AttackSpec, EmuError, EmulatorConfig, Trace};
use crate::hash_engine::{Authenticator, HashEngine, HashSink, AUTH_BYTES};
use crate::isa::Program;
use crate::loop_monitor::{
    decode_metadata, encode_metadata, LoopMonitor, LoopSession, MetadataError, MonitorConfig,
    PathId,
};
use crate::structural::{PathCheck, PathChecker};

pub const MAGIC: &[u8; 6] = b"LOFAT1";
pub const NONCE_BYTES: usize = 32;
pub const SIGNATURE_BYTES: usize = 64;
pub const PROGRAM_HASH_BYTES: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Nonce(pub [u8; NONCE_BYTES]);

impl Nonce {
    pub fn random() -> Self {
        Nonce(rand::random())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce({})", self.to_hex())
    }
}

impl FromStr for Nonce {
    type Err = hex::FromHexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; NONCE_BYTES];
        hex::decode_to_slice(s, &mut out)?;
        Ok(Nonce(out))
    }
}

impl Serialize for Nonce {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Nonce {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Result of measuring one execution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Measurement {
    pub authenticator: Authenticator,
    pub metadata: Vec<LoopSession>,
    pub branches: usize,
    pub hashed_pairs: u64,
    /// Cycle at which each hashed pair was handed to the hash engine.
    pub absorb_cycles: Vec<u64>,
    /// Loop traversals whose pairs were hashed vs. only counted.
    pub new_paths: u64,
    pub repeated_paths: u64,
    /// Loop executions nested past the depth limit.
    pub degraded_loops: usize,
    pub cycles: u64,
    pub fault: Option<Addr>,
}

struct Recorder {
    engine: HashEngine,
    cycles: Vec<u64>,
}

impl HashSink for Recorder {
    fn absorb_pair(&mut self, src: Addr, dest: Addr, cycle: u64) {
        self.engine.absorb(src, dest);
        self.cycles.push(cycle);
    }
}

/// Branch filtering and loop detection for a trace.
pub fn analyze(trace: &Trace, config: &MonitorConfig) -> LoopAnalysis {
    detect_loops(&filter(&trace.events), config.max_depth)
}

pub fn measure_trace(trace: &Trace, config: &MonitorConfig) -> Measurement {
    let analysis = analyze(trace, config);
    let recorder = Recorder {
        engine: HashEngine::new(),
        cycles: Vec::new(),
    };
    let mut monitor = LoopMonitor::new(*config, recorder);
    for ev in &analysis.events {
        monitor.process(ev);
    }
    let (new_paths, repeated_paths) = monitor.path_stats();
    let (mut metadata, recorder) = monitor.finish();
    let fault = trace.fault();
    if let Some(pc) = fault {
        metadata.push(LoopSession::fault_marker(pc));
    }
    Measurement {
        hashed_pairs: recorder.engine.words(),
        authenticator: recorder.engine.finalize(),
        metadata,
        branches: analysis.events.len(),
        absorb_cycles: recorder.cycles,
        new_paths,
        repeated_paths,
        degraded_loops: analysis.degraded,
        cycles: trace.events.len() as u64,
        fault,
    }
}

/// Run and measure in one step.
pub fn measure(
    program: &Program,
    input: &[u32],
    attack: Option<&AttackSpec>,
    emu: &EmulatorConfig,
    config: &MonitorConfig,
) -> Result<(Trace, Measurement), EmuError> {
    let trace = run_observed(program, input, attack, emu, |_| {})?;
    let m = measure_trace(&trace, config);
    Ok((trace, m))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("report truncated")]
    Truncated,
    #[error("bad magic, expected LOFAT1")]
    BadMagic,
    #[error("loop metadata: {0}")]
    Metadata(#[from] MetadataError),
    #[error("{0} unexpected bytes after the signature")]
    TrailingBytes(usize),
    #[error("program id is not UTF-8")]
    BadProgramId,
    #[error("program id longer than 65535 bytes")]
    ProgramIdTooLong,
    #[error("invalid report json: {0}")]
    Json(String),
}

/// `"LOFAT1" ‖ A ‖ L ‖ N`, the byte string covered by the signature.
pub fn canonical_serialize(
    authenticator: &Authenticator,
    metadata: &[LoopSession],
    nonce: &Nonce,
) -> Result<Vec<u8>, MetadataError> {
    let l = encode_metadata(metadata)?;
    let mut out = Vec::with_capacity(MAGIC.len() + AUTH_BYTES + l.len() + NONCE_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(authenticator.as_bytes());
    out.extend_from_slice(&l);
    out.extend_from_slice(&nonce.0);
    Ok(out)
}

/// Inverse of [`canonical_serialize`]; also returns the bytes consumed.
pub fn parse_canonical(
    bytes: &[u8],
) -> Result<(Authenticator, Vec<LoopSession>, Nonce, usize), ReportError> {
    let rest = bytes.strip_prefix(MAGIC.as_slice()).ok_or(if bytes.len() < MAGIC.len() {
        ReportError::Truncated
    } else {
        ReportError::BadMagic
    })?;
    let a: [u8; AUTH_BYTES] = rest
        .get(..AUTH_BYTES)
        .ok_or(ReportError::Truncated)?
        .try_into()
        .expect("slice length");
    let rest = &rest[AUTH_BYTES..];
    let (metadata, used) = decode_metadata(rest)?;
    let n: [u8; NONCE_BYTES] = rest
        .get(used..used + NONCE_BYTES)
        .ok_or(ReportError::Truncated)?
        .try_into()
        .expect("slice length");
    let total = MAGIC.len() + AUTH_BYTES + used + NONCE_BYTES;
    Ok((Authenticator(a), metadata, Nonce(n), total))
}

/// Prover signing key.
#[derive(Clone)]
pub struct ProverKey(SigningKey);

impl ProverKey {
    pub fn generate() -> Self {
        ProverKey(SigningKey::from_bytes(&rand::random()))
    }

    pub fn from_bytes(secret: [u8; 32]) -> Self {
        ProverKey(SigningKey::from_bytes(&secret))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> VerifierKey {
        VerifierKey(self.0.verifying_key())
    }

    fn sign(&self, msg: &[u8]) -> [u8; SIGNATURE_BYTES] {
        self.0.sign(msg).to_bytes()
    }
}

impl fmt::Debug for ProverKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ProverKey(..)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("not a valid Ed25519 public key")]
pub struct KeyError;

/// Prover public key, held by the verifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifierKey(VerifyingKey);

impl VerifierKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Result<Self, KeyError> {
        VerifyingKey::from_bytes(&bytes).map(VerifierKey).map_err(|_| KeyError)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    fn verify(&self, msg: &[u8], sig: &[u8; SIGNATURE_BYTES]) -> bool {
        self.0.verify(msg, &Signature::from_bytes(sig)).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub program_id: String,
    pub input: Vec<u32>,
    pub nonce: Nonce,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub program_id: String,
    #[serde(rename = "program_hash_hex", with = "hex_bytes")]
    pub program_hash: [u8; PROGRAM_HASH_BYTES],
    #[serde(rename = "nonce_hex")]
    pub nonce: Nonce,
    #[serde(rename = "A_hex")]
    pub authenticator: Authenticator,
    #[serde(rename = "L")]
    pub metadata: Vec<LoopSession>,
    #[serde(rename = "sig_hex", with = "hex_bytes")]
    pub signature: [u8; SIGNATURE_BYTES],
}

impl Report {
    /// The exact bytes the signature covers.
    pub fn signed_message(&self) -> Result<Vec<u8>, MetadataError> {
        let mut msg = canonical_serialize(&self.authenticator, &self.metadata, &self.nonce)?;
        msg.extend_from_slice(&self.program_hash);
        msg.extend_from_slice(self.program_id.as_bytes());
        Ok(msg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ReportError> {
        serde_json::from_str(s).map_err(|e| ReportError::Json(e.to_string()))
    }

    /// `u16 id length ‖ id ‖ program hash ‖ canonical bytes ‖ signature`.
    pub fn to_bytes(&self) -> Result<Vec<u8>, ReportError> {
        let id = self.program_id.as_bytes();
        let len = u16::try_from(id.len()).map_err(|_| ReportError::ProgramIdTooLong)?;
        let mut out = Vec::new();
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&self.program_hash);
        out.extend_from_slice(&canonical_serialize(
            &self.authenticator,
            &self.metadata,
            &self.nonce,
        )?);
        out.extend_from_slice(&self.signature);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ReportError> {
        let take = |from: usize, n: usize| bytes.get(from..from + n).ok_or(ReportError::Truncated);
        let len = u16::from_be_bytes(take(0, 2)?.try_into().expect("2 bytes")) as usize;
        let program_id = std::str::from_utf8(take(2, len)?)
            .map_err(|_| ReportError::BadProgramId)?
            .to_string();
        let mut pos = 2 + len;
        let program_hash = take(pos, PROGRAM_HASH_BYTES)?.try_into().expect("hash length");
        pos += PROGRAM_HASH_BYTES;
        let (authenticator, metadata, nonce, used) = parse_canonical(&bytes[pos..])?;
        pos += used;
        let signature = take(pos, SIGNATURE_BYTES)?.try_into().expect("signature length");
        pos += SIGNATURE_BYTES;
        if pos != bytes.len() {
            return Err(ReportError::TrailingBytes(bytes.len() - pos));
        }
        Ok(Report {
            program_id,
            program_hash,
            nonce,
            authenticator,
            metadata,
            signature,
        })
    }
}

/// Issued and consumed nonces.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonceStore {
    issued: BTreeSet<Nonce>,
    used: BTreeSet<Nonce>,
}

impl NonceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue(&mut self) -> Nonce {
        let n = Nonce::random();
        self.issued.insert(n);
        n
    }

    /// Accept a nonce issued elsewhere.
    pub fn register(&mut self, nonce: Nonce) {
        self.issued.insert(nonce);
    }

    pub fn is_fresh(&self, nonce: &Nonce) -> bool {
        self.issued.contains(nonce) && !self.used.contains(nonce)
    }

    /// Mark a nonce used. Returns false if it was not fresh.
    pub fn consume(&mut self, nonce: &Nonce) -> bool {
        let fresh = self.is_fresh(nonce);
        self.used.insert(*nonce);
        fresh
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).expect("store serializes");
        std::fs::write(path, text)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProveError {
    #[error("unknown program `{0}`")]
    UnknownProgram(String),
    #[error(transparent)]
    Emulator(#[from] EmuError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

/// What a prover hands back: the signed report plus local evidence.
#[derive(Clone, Debug)]
pub struct Attestation {
    pub report: Report,
    pub trace: Trace,
    pub measurement: Measurement,
}

pub struct Prover {
    key: ProverKey,
    programs: HashMap<String, Program>,
    pub emulator: EmulatorConfig,
    pub monitor: MonitorConfig,
}

impl Prover {
    pub fn new(key: ProverKey) -> Self {
        Prover {
            key,
            programs: HashMap::new(),
            emulator: EmulatorConfig::default(),
            monitor: MonitorConfig::default(),
        }
    }

    pub fn register(&mut self, program: Program) {
        self.programs.insert(program.id().to_string(), program);
    }

    /// Run the challenged program, optionally under attack, and sign the
    /// measurement.
    pub fn attest(
        &self,
        challenge: &Challenge,
        attack: Option<&AttackSpec>,
    ) -> Result<Attestation, ProveError> {
        let program = self
            .programs
            .get(&challenge.program_id)
            .ok_or_else(|| ProveError::UnknownProgram(challenge.program_id.clone()))?;
        let (trace, measurement) =
            measure(program, &challenge.input, attack, &self.emulator, &self.monitor)?;
        let mut report = Report {
            program_id: program.id().to_string(),
            program_hash: program.digest(),
            nonce: challenge.nonce,
            authenticator: measurement.authenticator,
            metadata: measurement.metadata.clone(),
            signature: [0; SIGNATURE_BYTES],
        };
        report.signature = self.key.sign(&report.signed_message()?);
        Ok(Attestation {
            report,
            trace,
            measurement,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    #[error("malformed report: {detail}")]
    Malformed { detail: String },
    #[error("report does not match the challenged program")]
    ProgramMismatch,
    #[error("nonce is stale, unknown, or does not match the challenge")]
    StaleNonce,
    #[error("signature does not verify")]
    BadSignature,
    #[error("loop session {session} reports impossible path {path}")]
    InvalidLoopPath { session: usize, path: PathId },
    #[error("authenticator differs from the reference execution")]
    AuthenticatorMismatch,
    #[error("loop metadata differs from the reference execution")]
    MetadataMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "warning", rename_all = "snake_case")]
pub enum Warning {
    /// A loop path could not be checked against the CFG.
    UnverifiablePath { session: usize, path: PathId },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::UnverifiablePath { session, path } => {
                write!(f, "loop session {session} path {path} could not be checked statically")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept { warnings: Vec<Warning> },
    Reject(RejectReason),
}

impl Verdict {
    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept { .. })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("reference execution failed: {0}")]
    Replay(EmuError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

struct Registered {
    program: Program,
    cfg: Cfg,
    hash: [u8; PROGRAM_HASH_BYTES],
}

pub struct Verifier {
    key: VerifierKey,
    programs: HashMap<String, Registered>,
    pub nonces: NonceStore,
    pub emulator: EmulatorConfig,
    pub monitor: MonitorConfig,
}

impl Verifier {
    pub fn new(key: VerifierKey) -> Self {
        Verifier {
            key,
            programs: HashMap::new(),
            nonces: NonceStore::new(),
            emulator: EmulatorConfig::default(),
            monitor: MonitorConfig::default(),
        }
    }

    pub fn register(&mut self, program: Program) -> Result<(), CfgError> {
        let cfg = build_cfg(&program)?;
        let hash = program.digest();
        self.programs
            .insert(program.id().to_string(), Registered { program, cfg, hash });
        Ok(())
    }

    pub fn cfg(&self, program_id: &str) -> Option<&Cfg> {
        self.programs.get(program_id).map(|r| &r.cfg)
    }

    pub fn challenge(&mut self, program_id: &str, input: Vec<u32>) -> Challenge {
        Challenge {
            program_id: program_id.to_string(),
            input,
            nonce: self.nonces.issue(),
        }
    }

    /// Verify a report, consuming its nonce. Returns the first failed check.
    pub fn verify(&mut self, report: &Report, challenge: &Challenge) -> Result<Verdict, VerifyError> {
        let fresh = self.nonces.is_fresh(&report.nonce);
        let (reasons, warnings, signed) = self.evaluate(report, challenge, fresh, true)?;
        if signed {
            self.nonces.consume(&report.nonce);
        }
        Ok(match reasons.into_iter().next() {
            Some(r) => Verdict::Reject(r),
            None => Verdict::Accept { warnings },
        })
    }

    /// Decode the binary report format, then [`verify`](Self::verify).
    pub fn verify_bytes(&mut self, bytes: &[u8], challenge: &Challenge) -> Result<Verdict, VerifyError> {
        match Report::from_bytes(bytes) {
            Ok(r) => self.verify(&r, challenge),
            Err(e) => Ok(Verdict::Reject(RejectReason::Malformed { detail: e.to_string() })),
        }
    }

    /// Every failed check, without touching the nonce store.
    pub fn diagnose(&self, report: &Report, challenge: &Challenge) -> Result<Vec<RejectReason>, VerifyError> {
        let fresh = self.nonces.is_fresh(&report.nonce);
        Ok(self.evaluate(report, challenge, fresh, false)?.0)
    }

    fn evaluate(
        &self,
        report: &Report,
        challenge: &Challenge,
        fresh: bool,
        first_only: bool,
    ) -> Result<(Vec<RejectReason>, Vec<Warning>, bool), VerifyError> {
        let mut reasons = Vec::new();
        let mut warnings = Vec::new();
        macro_rules! fail {
            ($r:expr) => {{
                reasons.push($r);
                if first_only {
                    return Ok((reasons, warnings, false));
                }
            }};
        }

        let reg = match self.programs.get(&challenge.program_id) {
            Some(reg) if report.program_id == challenge.program_id && report.program_hash == reg.hash => {
                reg
            }
            _ => {
                reasons.push(RejectReason::ProgramMismatch);
                return Ok((reasons, warnings, false));
            }
        };
        if !fresh || report.nonce != challenge.nonce {
            fail!(RejectReason::StaleNonce);
        }
        let signed = self.key.verify(&report.signed_message()?, &report.signature);
        if !signed {
            fail!(RejectReason::BadSignature);
        }

        let checker = PathChecker::new(&reg.program, &reg.cfg, self.monitor.indirect_bits);
        for f in checker.check_all(&report.metadata) {
            match f.check {
                PathCheck::Plausible => {}
                PathCheck::Unverifiable => warnings.push(Warning::UnverifiablePath {
                    session: f.session,
                    path: f.path,
                }),
                PathCheck::Invalid => {
                    if first_only {
                        reasons.push(RejectReason::InvalidLoopPath { session: f.session, path: f.path });
                        return Ok((reasons, warnings, signed));
                    }
                    if !reasons.iter().any(|r| matches!(r, RejectReason::InvalidLoopPath { .. })) {
                        reasons.push(RejectReason::InvalidLoopPath { session: f.session, path: f.path });
                    }
                }
            }
        }

        let (_, reference) = measure(
            &reg.program,
            &challenge.input,
            None,
            &self.emulator,
            &self.monitor,
        )
        .map_err(VerifyError::Replay)?;
        if reference.authenticator != report.authenticator {
            reasons.push(RejectReason::AuthenticatorMismatch);
            if first_only {
                return Ok((reasons, warnings, signed));
            }
        }
        if reference.metadata != report.metadata {
            reasons.push(RejectReason::MetadataMismatch);
        }
        Ok((reasons, warnings, signed))
    }
}
