//! One PASS/FAIL line per acceptance criterion. Known, documented failures
//! are pinned so that any other outcome still fails the test.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use notionlab::adversaries::{exact_advantage, run_script, AttackScript, GuessRule, Step};
use notionlab::challenger::{Challenger, GameConfig};
use notionlab::harness::{
    estimate_advantage, run_suite, twisted_pair_attack, Bounds, Exec, QuerySampler, SuiteConfig, SuiteReport,
};
use notionlab::hierarchy::{closure, graph};
use notionlab::model::{Batch, ChallengeBatchQuery, Communication};
use notionlab::notions;
use notionlab::props::{Pair, PropertyAtom};
use notionlab::protocols::{twisted_pair_protocol, LeakageFunction, Observation, Protocol, ProtocolSpec, TWISTED_TABLE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn suite(name: &str) -> SuiteReport {
    run_suite(name, &SuiteConfig::default()).expect("known suite")
}

fn failures(r: &SuiteReport) -> String {
    r.failures().iter().map(|c| format!("{}: {}", c.id, c.detail)).collect::<Vec<_>>().join("; ")
}

fn hierarchy_consistency() -> Outcome {
    let r = suite("implications");
    let ok = r.passed && r.cases.len() == graph().edges.len() && r.runtime_ms < 60_000;
    outcome(ok, format!("{} edges, {} failed, {} ms {}", r.cases.len(), r.failures().len(), r.runtime_ms, failures(&r)))
}

/// The reference table marks S!O[M!O-|M|] => M!O, but M!O-|M| is strictly
/// weaker than M!O and the P17 witness separates the pair.
const KNOWN_TABLE_MISMATCHES: [(&str, &str); 1] = [("S!O[M!O-|M|]", "M!O")];

fn hierarchy_completeness() -> Outcome {
    let report = graph().check_table();
    let bad: Vec<(String, String)> =
        report.mismatches().iter().map(|c| (c.pair[0].clone(), c.pair[1].clone())).collect();
    let known: Vec<(String, String)> = KNOWN_TABLE_MISMATCHES.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    assert_eq!(bad, known, "table mismatches changed");
    let (same, total) = report.label_agreement();
    outcome(
        bad.is_empty(),
        format!("{} cells, {} mismatches {:?}, witness labels {same}/{total}", report.rows.len(), bad.len(), bad),
    )
}

fn separations() -> Outcome {
    let started = Instant::now();
    let r = suite("separations");
    let labels: BTreeSet<&str> = r.cases.iter().filter_map(|c| c.id.split_whitespace().next()).collect();
    let first_table = ["P1", "P2", "P3", "P4", "P5"].iter().all(|l| labels.contains(l));
    let second_table = ["P10", "P15", "P21", "P22"].iter().all(|l| labels.contains(l));
    let twisted = ["P16", "P23"].iter().all(|l| labels.contains(l));
    let secs = started.elapsed().as_secs_f64();
    let ok = r.passed && r.cases.len() >= 15 && first_table && second_table && twisted && secs < 300.0;
    outcome(ok, format!("{} witnesses incl. twisted pair, {} failed, {secs:.0} s {}", r.cases.len(), r.failures().len(), failures(&r)))
}

fn property_lattice() -> Outcome {
    let missing: Vec<String> = common::required_rules()
        .into_iter()
        .filter(|(a, b)| !closure(&BTreeSet::from([*a])).contains(b))
        .map(|(a, b)| format!("{} => {}", a.name(), b.name()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    let mut checked = 0u64;
    for _ in 0..10_000 {
        let queries = common::random_pair(&mut rng);
        violations += common::lattice_violations(&queries).len();
        checked += common::pair_atoms().iter().filter(|&&a| common::accepts(a, &queries)).count() as u64;
    }
    outcome(
        missing.is_empty() && violations == 0,
        format!("10000 pairs, {checked} accepting atom verdicts, {violations} violations, missing rules {missing:?}"),
    )
}

fn null_baseline() -> Outcome {
    let r = suite("baselines");
    outcome(r.passed, format!("{} scripts at 10000 trials per bit, {} outside the band {}", r.cases.len(), r.failures().len(), failures(&r)))
}

fn equivalences() -> Outcome {
    let eq = suite("equivalences");
    let opts = suite("options");
    let renumbered: f64 = opts.cases.iter().filter_map(|c| c.metrics.get("attacks")).sum();
    outcome(
        eq.passed && opts.passed && renumbered >= 1000.0,
        format!(
            "{} equivalence cases, {renumbered} renumbered attacks, failures: {} {}",
            eq.cases.len(),
            failures(&eq),
            failures(&opts)
        ),
    )
}

#[derive(Serialize, Deserialize)]
struct Recorded {
    seed: u64,
    protocol: ProtocolSpec,
    script: AttackScript,
    log: String,
}

fn play(protocol: &ProtocolSpec, script: &AttackScript, seed: u64) -> String {
    let notion = notions::parse(&script.notion).unwrap();
    let mut ch = Challenger::new_game(notion, protocol.build(seed).unwrap(), seed);
    run_script(script, &mut ch, seed);
    ch.log_jsonl()
}

fn challenger_replay() -> Outcome {
    use LeakageFunction::*;
    let notions = ["S!O", "SM!L", "(SR)!O", "(SM)!L", "C!O", "S!O-P", "(2S)!L", "M!O[M!L]"];
    let leaks = [vec![], vec![CommCount], vec![MessageLengths], vec![Partition(notionlab::props::Side::Sender)]];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut recorded = Vec::new();
    for i in 0..100u64 {
        let notion = notions::parse(notions[i as usize % notions.len()]).unwrap();
        let sample = QuerySampler::new(&notion, &Bounds::default()).sample(&mut rng);
        let script = AttackScript { notion: notion.name.clone(), steps: sample.steps, guess: GuessRule::Uniform };
        let protocol = ProtocolSpec::leaky(&leaks[rng.gen_range(0..leaks.len())]);
        let seed = rng.gen();
        let log = play(&protocol, &script, seed);
        recorded.push(serde_json::to_string(&Recorded { seed, protocol, script, log }).unwrap());
    }
    let diverged = recorded
        .iter()
        .filter(|line| {
            let r: Recorded = serde_json::from_str(line).unwrap();
            play(&r.protocol, &r.script, r.seed) != r.log
        })
        .count();
    let entries: usize = recorded.iter().map(|l| serde_json::from_str::<Recorded>(l).unwrap().log.lines().count()).sum();
    outcome(diverged == 0, format!("100 transcripts, {entries} log entries, {diverged} diverged"))
}

fn twisted_fidelity() -> Outcome {
    let c = |u: u32, m: &str| Communication::real(u, 0, m);
    // the four columns of the reference table, each as two batches
    let expected = [
        ([(0, "a"), (1, "b")], [(1, "b"), (0, "a")], 0u8),
        ([(1, "a"), (0, "b")], [(0, "b"), (1, "a")], 1),
        ([(0, "a"), (0, "a")], [(1, "b"), (1, "b")], 1),
        ([(1, "a"), (1, "a")], [(0, "b"), (0, "b")], 0),
    ];
    let mut proto = twisted_pair_protocol(Pair::SM, 0);
    let mut table_ok = TWISTED_TABLE.len() == 8;
    for (top, bottom, bit) in expected {
        for rows in [top, bottom] {
            let batch = Batch::new(rows.iter().map(|&(u, m)| c(u, m)).collect()).unwrap();
            table_ok &= proto.table_bit(&batch) == Some(bit);
            table_ok &= proto.process_batch(&batch) == Observation::Bit { bit: Some(bit) };
        }
    }

    let spec = ProtocolSpec::TwistedPair { pair: "SM".into() };
    let linked = notions::parse("(SM)!L").unwrap();
    let attack = twisted_pair_attack(&linked, Pair::SM).expect("table gives an attack");
    let exact = exact_advantage(&linked, &spec, &attack, GameConfig::default()).unwrap();
    let est = estimate_advantage(&linked, &spec, &attack, 1000, 0, GameConfig::default(), Exec::Parallel).unwrap();

    // the same challenge row entered twice, each copy its own challenge
    let observed = notions::parse("(SM)!O").unwrap();
    let tagged = |psi| {
        [[c(0, "a"), c(0, "b")], [c(1, "b"), c(1, "a")]].map(|pair| pair.map(|x| x.with_challenge(Some(psi))))
    };
    let dup = AttackScript {
        notion: observed.name.clone(),
        steps: vec![Step::batch(ChallengeBatchQuery::from_rows(&[tagged(1), tagged(2)]).unwrap())],
        guess: GuessRule::ZeroIfSeen { transcripts: vec![vec![Observation::Bit { bit: Some(1) }]] },
    };
    let null = estimate_advantage(&observed, &spec, &dup, 10_000, 0, GameConfig::default(), Exec::Parallel).unwrap();
    let dup_exact = exact_advantage(&observed, &spec, &dup, GameConfig::default()).unwrap();

    outcome(
        table_ok && exact == 1.0 && est.advantage == 1.0 && null.within_null_band() && dup_exact.abs() < 1e-12,
        format!(
            "table {}, (SM)!L attack exact {exact:.3} empirical {:.3}, duplicated row {:.4} (band {:.4}, exact {dup_exact:.3})",
            if table_ok { "reproduced" } else { "differs" },
            est.advantage,
            null.advantage,
            2.0 * null.half_width
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("hierarchy consistency", hierarchy_consistency),
        ("hierarchy completeness", hierarchy_completeness),
        ("separations", separations),
        ("property lattice", property_lattice),
        ("null baseline", null_baseline),
        ("equivalence theorems", equivalences),
        ("challenger replay", challenger_replay),
        ("twisted-pair fidelity", twisted_fidelity),
    ];
    // criterion 2 is expected to fail; see KNOWN_TABLE_MISMATCHES
    let expected_fail = [2usize];
    let mut unexpected = Vec::new();
    println!();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        let o = run();
        println!("{} criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        if o.passed == expected_fail.contains(&n) {
            unexpected.push(n);
        }
    }
    assert!(unexpected.is_empty(), "criteria with unexpected outcome: {unexpected:?}");
}

#[test]
fn property_atoms_cover_the_lattice() {
    let atoms = common::pair_atoms();
    assert!(atoms.contains(&PropertyAtom::Permutation));
    assert!(atoms.len() >= 15);
}
