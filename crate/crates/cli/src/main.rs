use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowattest::attestation::{analyze, NonceStore, Warning};
use flowattest::emulator::{read_events_jsonl, run_to_end, write_events_jsonl, Location, Trigger, DEFAULT_CYCLE_CAP};
use flowattest::hash_engine::{absorb_timeline, single_port_arrivals};
use flowattest::isa::Reg;
use flowattest::loop_monitor::memory_bits;
use flowattest::programs::sample;
use flowattest::{
    assemble, build_cfg, measure_trace, Addr, AttackKind, AttackSpec, Challenge, EmulatorConfig, MonitorConfig,
    Program, Prover, ProverKey, RejectReason, Report, Trace, Verdict, Verifier, VerifierKey,
};
use serde_json::json;

const EXIT_USAGE: u8 = 1;
const EXIT_PROTOCOL: u8 = 2;
const EXIT_METADATA: u8 = 3;
const EXIT_AUTHENTICATOR: u8 = 4;
const EXIT_LOOP_PATH: u8 = 5;
const EXIT_INTERNAL: u8 = 6;

#[derive(Parser)]
#[command(name = "flowattest", version, about = "Control-flow attestation with loop path compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Stop runaway programs after this many cycles
    #[arg(long, global = true, default_value_t = DEFAULT_CYCLE_CAP)]
    cycle_cap: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file into program JSON
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Print the disassembly listing instead of JSON
        #[arg(long)]
        listing: bool,
        /// Print the label table
        #[arg(long)]
        symbols: bool,
    },
    /// Print the control-flow graph as JSON
    Cfg(ProgramArgs),
    /// Execute a program and write its trace as JSON lines
    Run {
        #[command(flatten)]
        program: ProgramArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Attack spec JSON to apply
        #[arg(long)]
        attack: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Print data words `start..end` after the run
        #[arg(long, value_parser = parse_range)]
        dump: Option<(usize, usize)>,
    },
    /// Compute the authenticator and loop metadata for one execution
    Measure {
        #[command(flatten)]
        program: ProgramArgs,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        monitor: MonitorArgs,
        #[arg(long)]
        attack: Option<PathBuf>,
        /// Measure a trace written by `run` instead of executing
        #[arg(long, conflicts_with = "attack")]
        trace: Option<PathBuf>,
        /// Print every branch with its owning loop and status signals
        #[arg(long)]
        debug_events: bool,
        #[arg(long)]
        json: bool,
    },
    /// Generate a prover key pair (`<out>.key` and `<out>.pub`)
    Keygen {
        #[arg(short, long, default_value = "prover")]
        out: PathBuf,
    },
    /// Issue a challenge for a program
    Challenge {
        #[command(flatten)]
        program: ProgramArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Record the issued nonce here
        #[arg(long)]
        nonce_store: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Answer a challenge with a signed report
    Attest {
        #[command(flatten)]
        program: ProgramArgs,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        challenge: PathBuf,
        #[command(flatten)]
        monitor: MonitorArgs,
        #[arg(long)]
        attack: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Write the binary report format instead of JSON
        #[arg(long, requires = "out")]
        binary: bool,
    },
    /// Check a report against a challenge
    Verify {
        #[command(flatten)]
        program: ProgramArgs,
        #[arg(long)]
        pubkey: PathBuf,
        #[arg(long)]
        challenge: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        monitor: MonitorArgs,
        /// Nonce store written by `challenge`; without it the challenge's
        /// nonce is trusted once
        #[arg(long)]
        nonce_store: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run honest and attacked executions and show what the verifier sees
    Inject {
        #[command(flatten)]
        program: ProgramArgs,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        monitor: MonitorArgs,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Fire before this address (hex, decimal or label) executes
        #[arg(long, conflicts_with = "at_cycle", required_unless_present = "at_cycle")]
        at_pc: Option<String>,
        /// Which execution of `--at-pc` to fire on
        #[arg(long, default_value_t = 1, requires = "at_pc")]
        occurrence: u32,
        #[arg(long)]
        at_cycle: Option<u64>,
        /// `r5`, `ra`, `mem:100` or `code:0x104`
        #[arg(long)]
        target: String,
        #[arg(long)]
        value: String,
        /// Also save the attack spec
        #[arg(long)]
        emit: Option<PathBuf>,
    },
    /// Hash engine absorb model: FIFO occupancy for a measured run or a schedule
    Timing {
        #[command(flatten)]
        program: OptionalProgramArgs,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        monitor: MonitorArgs,
        /// Arrival cycles, one per line or a JSON array
        #[arg(long, conflicts_with = "program")]
        arrivals: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        buffer: usize,
        /// Print one line per cycle
        #[arg(long)]
        timeline: bool,
    },
    /// Loop monitor storage for a path width and nesting depth
    Memory {
        #[arg(long, default_value_t = 16)]
        path_bits: u32,
        #[arg(long, default_value_t = 3)]
        depth: u32,
    },
}

#[derive(Args)]
struct ProgramArgs {
    /// Program: `.s` source, program JSON, or a bundled sample name
    #[arg(short, long)]
    program: String,
}

#[derive(Args)]
struct OptionalProgramArgs {
    #[arg(short, long)]
    program: Option<String>,
}

#[derive(Args)]
struct InputArgs {
    /// Comma-separated input words; defaults to the sample's input
    #[arg(short, long, value_delimiter = ',', value_parser = parse_u32)]
    input: Option<Vec<u32>>,
}

#[derive(Args, Clone, Copy)]
struct MonitorArgs {
    #[arg(long, default_value_t = 4)]
    indirect_bits: u8,
    #[arg(long, default_value_t = 16)]
    path_bits: u8,
    #[arg(long, default_value_t = 3)]
    max_depth: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Decision,
    Counter,
    CodePointer,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Decision => AttackKind::CorruptDecisionVar,
            KindArg::Counter => AttackKind::CorruptLoopCounter,
            KindArg::CodePointer => AttackKind::CorruptCodePointer,
        }
    }
}

/// Bad user input: unreadable files, unparsable arguments.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Decimal (negative wraps), or `0x` hex.
fn parse_u32(s: &str) -> Result<u32, String> {
    let s = s.trim();
    let v = match s.strip_prefix("0x") {
        Some(h) => i64::from_str_radix(h, 16).ok(),
        None => s.parse::<i64>().ok(),
    };
    v.filter(|v| (i64::from(i32::MIN)..=i64::from(u32::MAX)).contains(v))
        .map(|v| v as u32)
        .ok_or_else(|| format!("`{s}` is not a 32-bit word"))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or("expected start..end")?;
    let a: usize = a.parse().map_err(|_| format!("bad start `{a}`"))?;
    let b: usize = b.parse().map_err(|_| format!("bad end `{b}`"))?;
    if a > b {
        return Err("start exceeds end".into());
    }
    Ok((a, b))
}

impl MonitorArgs {
    fn config(self) -> Result<MonitorConfig> {
        let c = MonitorConfig {
            indirect_bits: self.indirect_bits,
            path_bits: self.path_bits,
            max_depth: self.max_depth,
        };
        c.validate().map_err(|e| usage(e.to_string()))?;
        Ok(c)
    }
}

struct Loaded {
    program: Program,
    symbols: BTreeMap<String, Addr>,
    default_input: Vec<u32>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_program(spec: &str) -> Result<Loaded> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(s) = sample(spec) {
            let (program, symbols) = assemble(s.source).expect("bundled program assembles");
            return Ok(Loaded { program, symbols, default_input: s.input.to_vec() });
        }
        return Err(usage(format!("{spec}: no such file or bundled sample")));
    }
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let program: Program =
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(Loaded { program, symbols: BTreeMap::new(), default_input: Vec::new() })
    } else {
        let (program, symbols) = assemble(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(Loaded { program, symbols, default_input: Vec::new() })
    }
}

impl Loaded {
    fn input(&self, args: &InputArgs) -> Vec<u32> {
        args.input.clone().unwrap_or_else(|| self.default_input.clone())
    }

    fn address(&self, s: &str) -> Result<Addr> {
        if let Some(a) = self.symbols.get(s) {
            return Ok(*a);
        }
        parse_u32(s).map(Addr).map_err(|_| usage(format!("`{s}` is neither a label nor an address")))
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_attack(path: Option<&PathBuf>) -> Result<Option<AttackSpec>> {
    path.map(|p| load_json(p)).transpose()
}

fn read_key<const N: usize>(path: &Path) -> Result<[u8; N]> {
    let text = read(path)?;
    let mut out = [0u8; N];
    hex::decode_to_slice(text.trim(), &mut out)
        .map_err(|e| usage(format!("{}: expected {N} hex bytes: {e}", path.display())))?;
    Ok(out)
}

fn write_output(out: Option<&PathBuf>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn parse_location(s: &str, loaded: &Loaded) -> Result<Location> {
    if let Some(w) = s.strip_prefix("mem:") {
        return parse_u32(w).map(Location::Memory).map_err(usage);
    }
    if let Some(a) = s.strip_prefix("code:") {
        return loaded.address(a).map(Location::Code);
    }
    s.parse::<Reg>().map(Location::Register).map_err(usage)
}

fn verdict_code(v: &Verdict) -> u8 {
    match v {
        Verdict::Accept { .. } => 0,
        Verdict::Reject(r) => match r {
            RejectReason::Malformed { .. }
            | RejectReason::ProgramMismatch
            | RejectReason::StaleNonce
            | RejectReason::BadSignature => EXIT_PROTOCOL,
            RejectReason::MetadataMismatch => EXIT_METADATA,
            RejectReason::AuthenticatorMismatch => EXIT_AUTHENTICATOR,
            RejectReason::InvalidLoopPath { .. } => EXIT_LOOP_PATH,
        },
    }
}

fn verdict_json(v: &Verdict) -> serde_json::Value {
    match v {
        Verdict::Accept { warnings } => json!({ "verdict": "accept", "warnings": warnings }),
        Verdict::Reject(r) => json!({ "verdict": "reject", "reason": r, "message": r.to_string() }),
    }
}

fn print_warnings(warnings: &[Warning]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn describe_run(trace: &Trace) -> String {
    match trace.fault() {
        Some(pc) => format!("faulted at {pc} after {} cycles", trace.events.len()),
        None if trace.halted() => format!("halted after {} cycles", trace.events.len()),
        None => format!("stopped after {} cycles", trace.events.len()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let emu = EmulatorConfig { cycle_cap: cli.cycle_cap, ..EmulatorConfig::default() };
    match dispatch(cli.command, emu) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<Usage>().is_some() { EXIT_USAGE } else { EXIT_INTERNAL };
            ExitCode::from(code)
        }
    }
}

fn dispatch(command: Command, emu: EmulatorConfig) -> Result<u8> {
    match command {
        Command::Asm { source, out, listing, symbols } => {
            let (program, syms) = assemble(&read(&source)?).map_err(|e| usage(format!("{}: {e}", source.display())))?;
            if symbols {
                for (name, addr) in &syms {
                    println!("{addr} {name}");
                }
            }
            let text = if listing {
                program.listing()
            } else {
                serde_json::to_string_pretty(&program)? + "\n"
            };
            if !symbols || out.is_some() {
                write_output(out.as_ref(), text.as_bytes())?;
            }
            Ok(0)
        }
        Command::Cfg(p) => {
            let loaded = load_program(&p.program)?;
            let cfg = build_cfg(&loaded.program)?;
            println!("{}", cfg.to_json());
            Ok(0)
        }
        Command::Run { program, input, attack, out, dump } => {
            let loaded = load_program(&program.program)?;
            let attack = load_attack(attack.as_ref())?;
            let input = loaded.input(&input);
            let (t, state) = run_to_end(&loaded.program, &input, attack.as_ref(), &emu)?;
            let mut jsonl = Vec::new();
            write_events_jsonl(&t.events, &mut jsonl)?;
            write_output(out.as_ref(), &jsonl)?;
            eprintln!("{}: {}", loaded.program.id(), describe_run(&t));
            if let Some((a, b)) = dump {
                let end = b.min(state.data.len());
                for (i, w) in state.data[a.min(end)..end].iter().enumerate() {
                    eprintln!("data[{}] = {w}", a + i);
                }
            }
            Ok(0)
        }
        Command::Measure { program, input, monitor, attack, trace, debug_events, json } => {
            let loaded = load_program(&program.program)?;
            let config = monitor.config()?;
            let trace = match trace {
                Some(path) => {
                    let f = fs::File::open(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                    let events = read_events_jsonl(BufReader::new(f)).map_err(|e| usage(e.to_string()))?;
                    Trace { program_id: loaded.program.id().to_string(), input: Vec::new(), events }
                }
                None => {
                    let attack = load_attack(attack.as_ref())?;
                    let input = loaded.input(&input);
                    flowattest::run(&loaded.program, &input, attack.as_ref(), &emu)?
                }
            };
            if debug_events {
                for a in analyze(&trace, &config).events {
                    println!("{}", serde_json::to_string(&a)?);
                }
            }
            let m = measure_trace(&trace, &config);
            if json {
                let v = json!({
                    "program_id": loaded.program.id(),
                    "A_hex": m.authenticator,
                    "L": m.metadata,
                    "branches": m.branches,
                    "hashed_pairs": m.hashed_pairs,
                    "new_paths": m.new_paths,
                    "repeated_paths": m.repeated_paths,
                    "degraded_loops": m.degraded_loops,
                    "cycles": m.cycles,
                    "fault": m.fault,
                });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("program        {}", loaded.program.id());
                println!("run            {}", describe_run(&trace));
                println!("authenticator  {}", m.authenticator);
                println!(
                    "branches       {} ({} pairs hashed, {} new paths, {} repeats, {} loops past depth)",
                    m.branches, m.hashed_pairs, m.new_paths, m.repeated_paths, m.degraded_loops
                );
                for (i, s) in m.metadata.iter().enumerate() {
                    let parent = s.parent.map_or("-".to_string(), |p| p.to_string());
                    println!("loop {i:<3} entry {} depth {} parent {parent}", s.loop_entry, s.depth);
                    for p in &s.paths {
                        println!("    {:<20} x{}", p.path.to_string(), p.count);
                    }
                    if !s.indirect_targets.is_empty() {
                        let t: Vec<String> = s.indirect_targets.iter().map(|a| a.to_string()).collect();
                        println!("    targets {}", t.join(" "));
                    }
                }
            }
            Ok(0)
        }
        Command::Keygen { out } => {
            let key = ProverKey::generate();
            let secret = out.with_extension("key");
            let public = out.with_extension("pub");
            fs::write(&secret, hex::encode(key.to_bytes()) + "\n")?;
            fs::write(&public, hex::encode(key.public().to_bytes()) + "\n")?;
            println!("wrote {} and {}", secret.display(), public.display());
            Ok(0)
        }
        Command::Challenge { program, input, nonce_store, out } => {
            let loaded = load_program(&program.program)?;
            let mut store = match &nonce_store {
                Some(p) => NonceStore::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                None => NonceStore::new(),
            };
            let challenge = Challenge {
                program_id: loaded.program.id().to_string(),
                input: loaded.input(&input),
                nonce: store.issue(),
            };
            if let Some(p) = &nonce_store {
                store.save(p)?;
            }
            write_output(out.as_ref(), (serde_json::to_string_pretty(&challenge)? + "\n").as_bytes())?;
            Ok(0)
        }
        Command::Attest { program, key, challenge, monitor, attack, out, binary } => {
            let loaded = load_program(&program.program)?;
            let challenge: Challenge = load_json(&challenge)?;
            let attack = load_attack(attack.as_ref())?;
            let mut prover = Prover::new(ProverKey::from_bytes(read_key(&key)?));
            prover.monitor = monitor.config()?;
            prover.emulator = emu;
            prover.register(loaded.program);
            let att = prover.attest(&challenge, attack.as_ref())?;
            eprintln!(
                "{}: {}, {} loop sessions",
                att.report.program_id,
                describe_run(&att.trace),
                att.report.metadata.len()
            );
            let bytes = if binary {
                att.report.to_bytes()?
            } else {
                (att.report.to_json() + "\n").into_bytes()
            };
            write_output(out.as_ref(), &bytes)?;
            Ok(0)
        }
        Command::Verify { program, pubkey, challenge, report, monitor, nonce_store, json } => {
            let loaded = load_program(&program.program)?;
            let challenge: Challenge = load_json(&challenge)?;
            let key = VerifierKey::from_bytes(read_key(&pubkey)?).map_err(|e| usage(e.to_string()))?;
            let mut verifier = Verifier::new(key);
            verifier.monitor = monitor.config()?;
            verifier.emulator = emu;
            verifier.register(loaded.program)?;
            match &nonce_store {
                Some(p) => verifier.nonces = NonceStore::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                None => verifier.nonces.register(challenge.nonce),
            }
            let bytes = fs::read(&report).map_err(|e| usage(format!("{}: {e}", report.display())))?;
            let verdict = if bytes.first() == Some(&b'{') {
                match Report::from_json(&String::from_utf8_lossy(&bytes)) {
                    Ok(r) => verifier.verify(&r, &challenge)?,
                    Err(e) => Verdict::Reject(RejectReason::Malformed { detail: e.to_string() }),
                }
            } else {
                verifier.verify_bytes(&bytes, &challenge)?
            };
            if let Some(p) = &nonce_store {
                verifier.nonces.save(p)?;
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&verdict_json(&verdict))?);
            } else {
                match &verdict {
                    Verdict::Accept { warnings } => {
                        print_warnings(warnings);
                        println!("accept");
                    }
                    Verdict::Reject(r) => {
                        println!("reject");
                        eprintln!("reject: {r}");
                    }
                }
            }
            Ok(verdict_code(&verdict))
        }
        Command::Inject { program, input, monitor, kind, at_pc, occurrence, at_cycle, target, value, emit } => {
            let loaded = load_program(&program.program)?;
            let trigger = match (at_pc, at_cycle) {
                (Some(pc), _) => Trigger::Pc { pc: loaded.address(&pc)?, occurrence },
                (None, Some(c)) => Trigger::Cycle(c),
                (None, None) => bail!(usage("one of --at-pc or --at-cycle is required")),
            };
            let value = match loaded.symbols.get(&value) {
                Some(a) => a.value(),
                None => parse_u32(&value).map_err(usage)?,
            };
            let attack = AttackSpec { kind: kind.into(), trigger, target: parse_location(&target, &loaded)?, value };
            if let Some(p) = &emit {
                fs::write(p, serde_json::to_string_pretty(&attack)? + "\n")?;
            }
            inject(&loaded, loaded.input(&input), monitor.config()?, emu, &attack)
        }
        Command::Timing { program, input, monitor, arrivals, buffer, timeline } => {
            let arrivals = match (program.program, arrivals) {
                (_, Some(path)) => parse_arrivals(&read(&path)?)?,
                (Some(spec), None) => {
                    let loaded = load_program(&spec)?;
                    let input = loaded.input(&input);
                    let trace = flowattest::run(&loaded.program, &input, None, &emu)?;
                    let m = measure_trace(&trace, &monitor.config()?);
                    single_port_arrivals(&m.absorb_cycles)
                }
                (None, None) => bail!(usage("give --program or --arrivals")),
            };
            let (report, states) = absorb_timeline(&arrivals, buffer).map_err(|e| usage(e.to_string()))?;
            if timeline {
                println!("cycle  in  absorb  busy  fill  fifo");
                for s in &states {
                    println!(
                        "{:>5}  {:>2}  {:>6}  {:>4}  {:>4}  {:>4}",
                        s.cycle,
                        if s.arrived { "+" } else { "" },
                        if s.absorbed { "*" } else { "" },
                        if s.busy { "#" } else { "" },
                        s.fill,
                        s.occupancy
                    );
                }
            }
            println!("{}", serde_json::to_string_pretty(&json!({ "buffer": buffer, "report": report }))?);
            if report.overflow {
                eprintln!("FIFO of {buffer} words overflowed (peak {})", report.max_occupancy);
            }
            Ok(0)
        }
        Command::Memory { path_bits, depth } => {
            let bits = memory_bits(path_bits, depth);
            println!("{bits} bits ({:.3} Mbit, {} KiB)", bits as f64 / (1u64 << 20) as f64, bits / 8 / 1024);
            Ok(0)
        }
    }
}

fn parse_arrivals(text: &str) -> Result<Vec<u64>> {
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| usage(e.to_string()));
    }
    text.split_whitespace()
        .map(|w| w.parse::<u64>().map_err(|_| usage(format!("bad arrival cycle `{w}`"))))
        .collect()
}

fn inject(loaded: &Loaded, input: Vec<u32>, config: MonitorConfig, emu: EmulatorConfig, attack: &AttackSpec) -> Result<u8> {
    let key = ProverKey::generate();
    let mut verifier = Verifier::new(key.public());
    let mut prover = Prover::new(key);
    prover.monitor = config;
    verifier.monitor = config;
    prover.emulator = emu;
    verifier.emulator = emu;
    prover.register(loaded.program.clone());
    verifier.register(loaded.program.clone())?;

    let honest_ch = verifier.challenge(loaded.program.id(), input.clone());
    let honest = prover.attest(&honest_ch, None)?;
    let ch = verifier.challenge(loaded.program.id(), input);
    let attacked = match prover.attest(&ch, Some(attack)) {
        Ok(a) => a,
        Err(flowattest::attestation::ProveError::Emulator(e)) => return Err(usage(format!("attack not applied: {e}"))),
        Err(e) => return Err(e.into()),
    };
    println!("honest    {}", describe_run(&honest.trace));
    println!("attacked  {}", describe_run(&attacked.trace));
    let same_a = honest.report.authenticator == attacked.report.authenticator;
    let same_l = honest.report.metadata == attacked.report.metadata;
    println!("authenticator {}", if same_a { "unchanged" } else { "changed" });
    println!("loop metadata {}", if same_l { "unchanged" } else { "changed" });
    for r in verifier.diagnose(&attacked.report, &ch)? {
        println!("  finding: {r}");
    }
    let verdict = verifier.verify(&attacked.report, &ch)?;
    match &verdict {
        Verdict::Accept { warnings } => {
            print_warnings(warnings);
            println!("verdict: accept (attack not detected)");
        }
        Verdict::Reject(r) => println!("verdict: reject: {r}"),
    }
    Ok(verdict_code(&verdict))
}
