//! Browser bindings for the demo page. Every export takes and returns plain
//! strings (JSON for structured results) so the page needs no bundler.

use flowattest::attestation::analyze;
use flowattest::branch_filter::LoopStatusKind;
use flowattest::hash_engine::{self, single_port_arrivals};
use flowattest::loop_monitor::{self, ClosedPath, LoopMonitor};
use flowattest::{parse_program, run, Addr, EmulatorConfig, HashEngine, MonitorConfig, PathId};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Keeps a runaway program from freezing the tab.
const CYCLE_CAP: u64 = 200_000;
/// Branch rows sent to the page; the summary always covers the whole run.
const EVENT_ROWS: usize = 2_000;

#[derive(Serialize)]
struct SampleInfo {
    name: &'static str,
    source: &'static str,
    input: String,
}

#[wasm_bindgen]
pub fn samples() -> String {
    let list: Vec<SampleInfo> = flowattest::programs::SAMPLES
        .iter()
        .map(|s| SampleInfo {
            name: s.name,
            source: s.source,
            input: join(s.input),
        })
        .collect();
    serde_json::to_string(&list).expect("samples serialize")
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(|w| w.parse().map_err(|_| format!("bad {what} `{w}`")))
        .collect()
}

#[derive(Serialize)]
struct Row {
    cycle: u64,
    src: Addr,
    dest: Addr,
    kind: String,
    /// Loop session encoding this branch, if any.
    owner: Option<usize>,
    entered: Vec<usize>,
    /// Path register of the innermost active loop after this branch.
    register: Option<PathId>,
    closed: Vec<ClosedPath>,
    exited: Vec<usize>,
    /// Pairs sent to the hash engine at this step.
    hashed: usize,
}

#[derive(Serialize)]
struct Measured {
    program_id: String,
    outcome: String,
    authenticator: String,
    hashed_pairs: usize,
    branches: usize,
    new_paths: u64,
    repeated_paths: u64,
    degraded_loops: usize,
    sessions: Vec<flowattest::LoopSession>,
    arrivals: Vec<u64>,
    rows: Vec<Row>,
    truncated: bool,
}

/// Assemble and run `source` on comma-separated `input`, then walk the branch
/// stream through the loop monitor, recording what each branch does.
#[wasm_bindgen]
pub fn measure_program(
    source: &str,
    input: &str,
    indirect_bits: u8,
    path_bits: u8,
    max_depth: u8,
) -> Result<String, String> {
    let config = MonitorConfig { indirect_bits, path_bits, max_depth };
    config.validate().map_err(|e| e.to_string())?;
    let program = parse_program(source).map_err(|e| e.to_string())?;
    let input: Vec<u32> = parse_list(input, "input word")?;
    let emu = EmulatorConfig { cycle_cap: CYCLE_CAP, ..EmulatorConfig::default() };
    let trace = run(&program, &input, None, &emu).map_err(|e| e.to_string())?;
    let analysis = analyze(&trace, &config);

    let mut monitor = LoopMonitor::new(config, Vec::<(Addr, Addr, u64)>::new());
    let mut rows = Vec::new();
    for a in &analysis.events {
        let before = monitor.sink().len();
        monitor.process(a);
        if rows.len() == EVENT_ROWS {
            continue;
        }
        rows.push(Row {
            cycle: a.event.cycle,
            src: a.event.src,
            dest: a.event.dest,
            kind: format!("{:?}", a.event.kind),
            owner: a.owner,
            entered: a.before.iter().map(|s| s.context.session).collect(),
            register: monitor.active().last().map(|s| s.partial()),
            closed: monitor.last_closed().to_vec(),
            exited: a
                .after
                .iter()
                .filter(|s| s.kind == LoopStatusKind::Exit)
                .map(|s| s.context.session)
                .collect(),
            hashed: monitor.sink().len() - before,
        });
    }
    let (new_paths, repeated_paths) = monitor.path_stats();
    let (mut sessions, pairs) = monitor.finish();
    if let Some(pc) = trace.fault() {
        sessions.push(flowattest::LoopSession::fault_marker(pc));
    }
    let mut engine = HashEngine::new();
    for (s, d, _) in &pairs {
        engine.absorb(*s, *d);
    }
    let cycles: Vec<u64> = pairs.iter().map(|p| p.2).collect();
    let outcome = match trace.fault() {
        Some(pc) => format!("faulted at {pc} after {} cycles", trace.events.len()),
        None => format!("halted after {} cycles", trace.events.len()),
    };
    let out = Measured {
        program_id: program.id().to_string(),
        outcome,
        authenticator: engine.finalize().to_hex(),
        hashed_pairs: pairs.len(),
        branches: analysis.events.len(),
        new_paths,
        repeated_paths,
        degraded_loops: analysis.degraded,
        sessions,
        arrivals: single_port_arrivals(&cycles),
        truncated: rows.len() < analysis.events.len(),
        rows,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Per-cycle absorb schedule for arrival cycles given as a comma or
/// whitespace separated list.
#[wasm_bindgen]
pub fn absorb_timeline(arrivals: &str, buffer: usize) -> Result<String, String> {
    let arrivals: Vec<u64> = parse_list(arrivals, "arrival cycle")?;
    let (report, states) = hash_engine::absorb_timeline(&arrivals, buffer).map_err(|e| e.to_string())?;
    Ok(serde_json::json!({ "report": report, "cycles": states }).to_string())
}

/// Counter storage in bits for `depth` levels of `path_bits`-bit identifiers.
/// Returned as `f64` because JavaScript numbers cannot hold a `u128`.
#[wasm_bindgen]
pub fn memory_bits(path_bits: u32, depth: u32) -> Result<f64, String> {
    if path_bits > 64 {
        return Err("path width is at most 64 bits".into());
    }
    Ok(loop_monitor::memory_bits(path_bits, depth) as f64)
}
