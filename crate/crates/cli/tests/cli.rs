use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use notionlab::harness::{self, SuiteConfig, SuiteReport};
use notionlab::hierarchy;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_notionlab")).args(args).env_remove("NOTIONLAB_SEED").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name).display().to_string()
}

fn scratch(name: &str, contents: &str) -> String {
    let path: PathBuf = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::write(&path, contents).unwrap();
    path.display().to_string()
}

const COMPLIANT: &str = r#"[{"scenarios":[[{"s":0,"r":0,"m":"YQ=="}],[{"s":1,"r":0,"m":"YQ=="}]]}]"#;

#[test]
fn check_exit_codes() {
    let ok = run(&["check", "S!O", &scratch("compliant.json", COMPLIANT)]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("query 0: accept"));

    let empty = run(&["check", "S!O", &data("mixed.json")]);
    assert_eq!(empty.status.code(), Some(1));
    assert!(stdout(&empty).contains("reject SOMETHING"));

    let broken = run(&["check", "S!O", &scratch("broken.json", "[{\"scenarios\":")]);
    assert_eq!(broken.status.code(), Some(2));
    assert_eq!(run(&["check", "S?O", &data("mixed.json")]).status.code(), Some(2));
}

fn witness_attack_file(x1: &str, x2: &str, name: &str) -> (String, Value) {
    let o = run(&["--format", "json", "hierarchy", "implies", x1, x2, "--attack"]);
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["implication"]["answer"], "no");
    (scratch(name, &v["attack"].to_string()), v["implication"]["witness"].clone())
}

fn advantage(o: &Output) -> f64 {
    let v: Value = serde_json::from_str(&stdout(o)).unwrap();
    v["estimate"]["advantage"].as_f64().unwrap()
}

#[test]
fn play_replays_witness_attacks() {
    let (file, witness) = witness_attack_file("S!O{R!O-|U'|}", "(2R)!L", "p4.json");
    assert_eq!(witness["label"], "P4");
    let o = run(&["--format", "json", "play", "--attack", &file, "--leaks", "|U'|", "-n", "500"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(advantage(&o) >= 0.99);

    // the same queries leak nothing through the ideal protocol
    let o = run(&["--format", "json", "play", "--attack", &file, "-n", "2000"]);
    assert!(advantage(&o) <= 2.0 * harness::hoeffding_half_width(2000, harness::DEFAULT_ALPHA));

    // the queries break the rules of a stricter notion
    let o = run(&["play", "--attack", &file, "--notion", "S!O", "--leaks", "|U'|"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn play_checks_epsilon_delta() {
    let (file, _) = witness_attack_file("!O", "C!O", "p1.json");
    let o = run(&["--format", "json", "play", "--attack", &file, "--leaks", "#comm", "--epsilon", "0.5", "--delta", "0.1"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["epsilon_delta"]["holds"], false);
    let o = run(&["--format", "json", "play", "--attack", &file, "--epsilon", "0.5", "--delta", "0.1"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["epsilon_delta"]["holds"], true);
}

#[test]
fn play_accepts_protocol_descriptors() {
    let (file, _) = witness_attack_file("(SM)!O", "(SM)!L", "p23.json");
    let o = run(&["--format", "json", "play", "--attack", &file, "--protocol", r#"{"kind":"twisted_pair","pair":"SM"}"#]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(advantage(&o), 1.0);
    let o = run(&["play", "--attack", &file, "--protocol", r#"{"kind":"nope"}"#]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn hierarchy_answers() {
    let yes = run(&["hierarchy", "implies", "C!O", "!O"]);
    assert_eq!(stdout(&yes), "YES\npath: C!O -> !O\n");

    let no = stdout(&run(&["hierarchy", "implies", "S!O", "R!O"]));
    assert!(no.starts_with("NO\nwitness: P8"), "{no}");
    assert!(no.contains("leak: 1.R"), "{no}");

    assert_eq!(run(&["hierarchy", "implies", "S!O", "nonsense"]).status.code(), Some(2));
}

#[test]
fn hierarchy_json_matches_library() {
    for (x1, x2) in [("C!O", "!O"), ("S!O", "R!O"), ("(SM)!O", "(SM)!L"), ("S!O'", "S!O")] {
        let o = run(&["--format", "json", "hierarchy", "implies", x1, x2]);
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        let lib = serde_json::to_value(hierarchy::implies(x1, x2).unwrap()).unwrap();
        assert_eq!(v["implication"], lib, "{x1} vs {x2}");
    }
}

#[test]
fn hierarchy_dot_and_check() {
    let dot = stdout(&run(&["hierarchy", "dot"]));
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot, hierarchy::graph().export_dot(None));
    let sender = stdout(&run(&["hierarchy", "dot", "--family", "sender"]));
    assert!(sender.len() < dot.len());

    // the reference table holds one cell the derivation disagrees with
    let check = run(&["hierarchy", "check"]);
    assert_eq!(check.status.code(), Some(1));
    assert!(stdout(&check).contains("MISMATCH S!O[M!O-|M|] vs M!O"));

    let w = stdout(&run(&["hierarchy", "witnesses", "--curated"]));
    assert!(w.lines().any(|l| l.starts_with("P23 ") && l.contains("twisted pair SM")));
}

#[test]
fn oracle_exit_codes() {
    assert_eq!(run(&["oracle", "!O", "--leaks", "#comm"]).status.code(), Some(0));
    let broken = run(&["oracle", "C!O", "--leaks", "#comm"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stdout(&broken).starts_with("BROKEN"));
    assert_eq!(run(&["oracle", "C!O", "--leaks", "bogus"]).status.code(), Some(2));
}

#[test]
fn suite_output_matches_library() {
    let o = run(&["--format", "json", "suite", "options", "--samples", "60"]);
    assert_eq!(o.status.code(), Some(0));
    let cli: SuiteReport = serde_json::from_str(&stdout(&o)).unwrap();
    let lib = harness::run_suite("options", &SuiteConfig { samples: 60, ..SuiteConfig::default() }).unwrap();
    assert_eq!(cli.without_runtime(), lib.without_runtime());

    let seq = run(&["--format", "json", "--sequential", "suite", "options", "--samples", "60"]);
    let seq: SuiteReport = serde_json::from_str(&stdout(&seq)).unwrap();
    assert_eq!(seq.without_runtime(), lib.without_runtime());

    assert_eq!(run(&["suite", "nonexistent"]).status.code(), Some(2));
}

#[test]
fn seed_comes_from_the_environment() {
    let with_env = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_notionlab"))
            .args(["--format", "json", "suite", "options", "--samples", "30"])
            .env("NOTIONLAB_SEED", seed)
            .output()
            .unwrap();
        serde_json::from_str::<SuiteReport>(&stdout(&o)).unwrap()
    };
    assert_eq!(with_env("5").seed, 5);
    let flag = run(&["--format", "json", "--seed", "5", "suite", "options", "--samples", "30"]);
    let flag: SuiteReport = serde_json::from_str(&stdout(&flag)).unwrap();
    assert_eq!(flag.without_runtime(), with_env("5").without_runtime());
}

#[test]
fn notions_are_listed() {
    let list = stdout(&run(&["notions", "list"]));
    assert!(list.lines().any(|l| l.starts_with("(SM)!L ")));
    assert!(list.lines().count() >= 50);
}
