//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails the
//! test if any criterion failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use flowattest::attestation::{measure, RejectReason, Report, Verdict};
use flowattest::branch_filter::BranchFilter;
use flowattest::cfg::build_cfg;
use flowattest::emulator::{run, run_observed, write_events_jsonl};
use flowattest::hash_engine::simulate_absorb;
use flowattest::loop_monitor::memory_bits;
use flowattest::programs::{sample, SAMPLES};
use flowattest::structural::{PathCheck, PathChecker};
use flowattest::{
    measure_trace, Challenge, EmulatorConfig, MonitorConfig, PathId, Prover, ProverKey, Verifier,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{attack_matrix, random_program, Expect};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn pair() -> (Prover, Verifier) {
    let key = ProverKey::generate();
    let mut prover = Prover::new(key.clone());
    let mut verifier = Verifier::new(key.public());
    for s in SAMPLES {
        prover.register(s.program());
        verifier.register(s.program()).unwrap();
    }
    (prover, verifier)
}

fn paths_of(m: &flowattest::Measurement) -> Vec<(String, u64)> {
    m.metadata
        .iter()
        .flat_map(|s| s.paths.iter().map(|p| (p.path.to_string(), p.count)))
        .collect()
}

fn branchloop_paths() -> Outcome {
    let p = sample("branchloop").unwrap().program();
    let cfg = (EmulatorConfig::default(), MonitorConfig::default());
    // One traversal through the non-zero arm, one through the zero arm.
    let (_, m) = measure(&p, &[2, 1, 0], None, &cfg.0, &cfg.1).map_err(|e| e.to_string())?;
    let paths = paths_of(&m);
    ensure!(
        paths == [("011".to_string(), 1), ("0011".to_string(), 1), ("1".to_string(), 1)],
        "unexpected paths {paths:?}"
    );
    Ok("non-zero arm = 011, zero arm = 0011".into())
}

fn hash_invariance() -> Outcome {
    let p = sample("branchloop").unwrap().program();
    let mut first = None;
    for k in [1u32, 5, 100, 10_000] {
        let mut input = vec![k];
        input.extend(std::iter::repeat_n(0, k as usize));
        let (_, m) = measure(&p, &input, None, &EmulatorConfig::default(), &MonitorConfig::default())
            .map_err(|e| e.to_string())?;
        let paths = paths_of(&m);
        ensure!(
            paths == [("0011".to_string(), k as u64), ("1".to_string(), 1)],
            "k={k}: paths {paths:?}"
        );
        match first {
            None => first = Some(m.authenticator),
            Some(a) => ensure!(a == m.authenticator, "k={k}: authenticator changed"),
        }
    }
    Ok("A identical for k in {1,5,100,10000}; count = k plus one exit path".into())
}

fn attack_detection() -> Outcome {
    let (prover, mut verifier) = pair();
    let cases = attack_matrix();
    let mut programs = std::collections::BTreeSet::new();
    for case in &cases {
        let honest = verifier.challenge(case.program, case.input.clone());
        let h = prover.attest(&honest, None).map_err(|e| e.to_string())?;
        let v = verifier.verify(&h.report, &honest).map_err(|e| e.to_string())?;
        ensure!(v.is_accept(), "{} honest run rejected: {v:?}", case.program);

        let ch = verifier.challenge(case.program, case.input.clone());
        let att = prover
            .attest(&ch, Some(&case.attack))
            .map_err(|e| format!("{} {:?}: {e}", case.program, case.attack.kind))?;
        ensure!(
            att.trace.halted(),
            "{} {:?}: attacked run did not halt",
            case.program,
            case.attack.kind
        );
        let all = verifier.diagnose(&att.report, &ch).map_err(|e| e.to_string())?;
        let verdict = verifier.verify(&att.report, &ch).map_err(|e| e.to_string())?;
        let label = format!("{} {:?}", case.program, case.attack.kind);
        match case.expect {
            Expect::Metadata => {
                ensure!(
                    verdict == Verdict::Reject(RejectReason::MetadataMismatch),
                    "{label}: {verdict:?}"
                );
                ensure!(
                    att.report.authenticator == h.report.authenticator,
                    "{label}: authenticator changed"
                );
            }
            Expect::Authenticator => ensure!(
                verdict == Verdict::Reject(RejectReason::AuthenticatorMismatch),
                "{label}: {verdict:?}"
            ),
            Expect::LoopPathAndAuthenticator => {
                ensure!(
                    matches!(verdict, Verdict::Reject(RejectReason::InvalidLoopPath { .. })),
                    "{label}: {verdict:?}"
                );
                ensure!(
                    all.contains(&RejectReason::AuthenticatorMismatch),
                    "{label}: diagnostics {all:?}"
                );
            }
        }
        programs.insert((case.program, case.attack.kind as u8));
    }
    // Honest runs over the whole corpus.
    for s in SAMPLES {
        let ch = verifier.challenge(s.name, s.input.to_vec());
        let r = prover.attest(&ch, None).map_err(|e| e.to_string())?.report;
        let v = verifier.verify(&r, &ch).map_err(|e| e.to_string())?;
        ensure!(v.is_accept(), "{} honest run rejected: {v:?}", s.name);
    }
    let full: std::collections::BTreeSet<_> = programs.iter().map(|(p, _)| *p).collect();
    let covered = full
        .iter()
        .filter(|p| (0..3).all(|k| programs.contains(&(**p, k))))
        .count();
    ensure!(covered >= 3, "only {covered} programs cover all three classes");
    Ok(format!(
        "{} attacked runs rejected as expected, {} programs x 3 classes, {} honest runs accepted",
        cases.len(),
        covered,
        cases.len() + SAMPLES.len()
    ))
}

fn memory_formula() -> Outcome {
    let bits = memory_bits(16, 3);
    ensure!(bits == 1_572_864, "got {bits}");
    ensure!(bits == 3 * (1 << 20) / 2, "not 1.5 Mbit");
    Ok("memory_bits(16, 3) = 1572864 = 1.5 Mbit".into())
}

fn absorb_model() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0;
    for pattern in 0..1000 {
        let mut arrivals: Vec<u64> = Vec::new();
        let density = rng.gen_range(0.3..1.0);
        for t in 0..400u64 {
            let in_window = arrivals.iter().rev().take_while(|&&a| a + 12 > t).count();
            if in_window < 9 && rng.gen_bool(density) {
                arrivals.push(t);
            }
        }
        let r = simulate_absorb(&arrivals, 3).map_err(|e| e.to_string())?;
        ensure!(!r.overflow, "pattern {pattern} overflowed (max occupancy {})", r.max_occupancy);
        worst = worst.max(r.max_occupancy);
    }
    let sustained: Vec<u64> = (0..1000).collect();
    for b in 0..=64 {
        let r = simulate_absorb(&sustained, b).map_err(|e| e.to_string())?;
        ensure!(r.overflow, "1 word/cycle did not overflow B={b}");
    }
    Ok(format!(
        "1000 constrained patterns, max occupancy {worst} <= 3; 1 word/cycle overflows B=0..64"
    ))
}

fn protocol_round_trip() -> Outcome {
    let (prover, mut verifier) = pair();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mutations = 0;
    for i in 0..200 {
        let s = &SAMPLES[i % SAMPLES.len()];
        let mut input = s.input.to_vec();
        for w in input.iter_mut().skip(1) {
            *w = rng.gen_range(0..10);
        }
        if s.name == "recsum" {
            input[0] = rng.gen_range(0..6);
        }
        let ch = verifier.challenge(s.name, input);
        let report = prover.attest(&ch, None).map_err(|e| e.to_string())?.report;
        let bytes = report.to_bytes().map_err(|e| e.to_string())?;

        // Single-byte mutations: every position for the first report, a
        // random one for the rest.
        let positions: Vec<usize> = if i == 0 {
            (0..bytes.len()).collect()
        } else {
            vec![rng.gen_range(0..bytes.len())]
        };
        for pos in positions {
            let mut bad = bytes.clone();
            bad[pos] ^= rng.gen_range(1..=255u8);
            let v = verifier.verify_bytes(&bad, &ch).map_err(|e| e.to_string())?;
            ensure!(!v.is_accept(), "report {i}: mutation at byte {pos} accepted");
            mutations += 1;
        }

        let v = verifier.verify_bytes(&bytes, &ch).map_err(|e| e.to_string())?;
        ensure!(v.is_accept(), "report {i} ({}) rejected: {v:?}", s.name);

        let fresh: Challenge = verifier.challenge(s.name, ch.input.clone());
        let v = verifier.verify(&report, &fresh).map_err(|e| e.to_string())?;
        ensure!(
            matches!(
                v,
                Verdict::Reject(RejectReason::StaleNonce | RejectReason::BadSignature)
            ),
            "report {i} replayed against a fresh nonce: {v:?}"
        );
        let again = Report::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure!(
            !verifier.verify(&again, &ch).map_err(|e| e.to_string())?.is_accept(),
            "report {i} accepted twice"
        );
    }
    Ok(format!(
        "200 honest cycles accepted, replays rejected, {mutations} single-byte mutations rejected"
    ))
}

fn replay_symmetry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut loops, mut paths) = (0, 0);
    for i in 0..100 {
        let id = format!("rand{i}");
        let (program, input) = random_program(&mut rng, &id);
        let key = ProverKey::from_bytes(rng.gen());
        let mut prover = Prover::new(key.clone());
        let mut verifier = Verifier::new(key.public());
        prover.register(program.clone());
        verifier
            .register(program.clone())
            .map_err(|e| format!("{id}: {e}"))?;

        let ch = verifier.challenge(&id, input.clone());
        let att = prover.attest(&ch, None).map_err(|e| format!("{id}: {e}"))?;
        let (_, reference) = measure(&program, &input, None, &EmulatorConfig::default(), &MonitorConfig::default())
            .map_err(|e| format!("{id}: {e}"))?;
        ensure!(att.measurement == reference, "{id}: prover and verifier measurements differ");

        let cfg = build_cfg(&program).map_err(|e| e.to_string())?;
        let checker = PathChecker::new(&program, &cfg, 4);
        for f in checker.check_all(&reference.metadata) {
            ensure!(
                f.check == PathCheck::Plausible,
                "{id}: session {} path {} is {:?}\n{}",
                f.session,
                f.path,
                f.check,
                program.listing()
            );
            paths += 1;
        }
        for s in &reference.metadata {
            ensure!(s.depth <= 3, "{id}: depth {}", s.depth);
            ensure!(
                s.paths.iter().all(|p| p.path != PathId::OVERFLOW && p.path.len() <= 16),
                "{id}: path over 16 bits"
            );
        }
        loops += reference.metadata.len();
        let v = verifier.verify(&att.report, &ch).map_err(|e| e.to_string())?;
        ensure!(
            v == Verdict::Accept { warnings: vec![] },
            "{id}: {v:?}\n{}",
            program.listing()
        );
    }
    Ok(format!(
        "100 random programs: measurements match, {loops} loop sessions, {paths} paths decode"
    ))
}

fn transparency() -> Outcome {
    let emu = EmulatorConfig::default();
    let mut checked = 0;
    for s in SAMPLES {
        let p = s.program();
        let bare = run(&p, s.input, None, &emu).map_err(|e| e.to_string())?;
        let mut bf = BranchFilter::new();
        let observed = run_observed(&p, s.input, None, &emu, |e| bf.observe(e)).map_err(|e| e.to_string())?;
        measure_trace(&observed, &MonitorConfig::default());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_events_jsonl(&bare.events, &mut a).map_err(|e| e.to_string())?;
        write_events_jsonl(&observed.events, &mut b).map_err(|e| e.to_string())?;
        ensure!(a == b, "{}: trace changed under measurement", s.name);
        ensure!(!bf.events().is_empty(), "{}: no branches observed", s.name);
        checked += 1;
    }
    Ok(format!("{checked} corpus traces byte-identical with and without the pipeline"))
}

#[test]
fn acceptance_suite() {
    type Criterion = (u32, &'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 8] = [
        (1, "branchloop path identifiers", branchloop_paths, Duration::from_secs(1)),
        (2, "hash-compression invariance", hash_invariance, Duration::from_secs(5)),
        (3, "attack-detection matrix", attack_detection, Duration::from_secs(60)),
        (4, "memory formula", memory_formula, Duration::from_secs(1)),
        (5, "absorb-cadence model", absorb_model, Duration::from_secs(5)),
        (6, "protocol round trip and freshness", protocol_round_trip, Duration::from_secs(10)),
        (7, "replay-oracle symmetry", replay_symmetry, Duration::from_secs(60)),
        (8, "measurement transparency", transparency, Duration::from_secs(5)),
    ];
    let mut failed = Vec::new();
    for (n, name, f, limit) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; took {took:?}, limit {limit:?}")),
            other => other,
        };
        match &outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} ({took:.2?})"),
            Err(why) => {
                println!("criterion {n} FAIL  {name}: {why} ({took:.2?})");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
