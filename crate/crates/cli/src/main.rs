//! `notionlab` command-line front end.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use notionlab::adversaries::AttackScript;
use notionlab::challenger::{Evaluator, GameConfig, GameState};
use notionlab::harness::{
    self, epsilon_delta_holds, estimate_advantage, exhaustive_safety_with, Bounds, Exec, Safety, SuiteConfig,
};
use notionlab::hierarchy::{self, Implication};
use notionlab::model::{ChallengeBatchQuery, Message};
use notionlab::notions::{self, Family};
use notionlab::props::Verdict;
use notionlab::protocols::{LeakageFunction, ProtocolSpec};

#[derive(Parser, Debug)]
#[command(name = "notionlab", version, about = "Privacy-notion games, oracles and hierarchy")]
struct Cli {
    /// Base seed for all randomness.
    #[arg(long, global = true, env = "NOTIONLAB_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Senders in enumerated universes.
    #[arg(long, global = true, default_value_t = 2)]
    senders: u32,
    /// Receivers in enumerated universes.
    #[arg(long, global = true, default_value_t = 2)]
    receivers: u32,
    /// Run trials and enumeration on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a JSON array of batch queries against a notion.
    Check { notion: String, file: PathBuf },
    /// Replay an attack script and estimate its advantage.
    Play(PlayArgs),
    /// Search the bounded query space for a distinguishing query.
    Oracle(OracleArgs),
    #[command(subcommand)]
    Hierarchy(HierarchyCmd),
    /// Run an experiment suite.
    Suite(SuiteArgs),
    #[command(subcommand)]
    Notions(NotionsCmd),
}

#[derive(Args, Debug)]
struct PlayArgs {
    #[arg(long)]
    attack: PathBuf,
    /// Notion to play under; defaults to the script's own.
    #[arg(long)]
    notion: Option<String>,
    /// Protocol descriptor as JSON, e.g. {"kind":"leaky","leaks":["|U|"]}.
    #[arg(long, conflicts_with = "leaks")]
    protocol: Option<String>,
    /// Comma-separated leaks of the leaky ideal protocol.
    #[arg(long, value_delimiter = ',')]
    leaks: Vec<String>,
    #[arg(short = 'n', long, default_value_t = 1000)]
    trials: u64,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, requires = "epsilon")]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    notion: String,
    #[arg(long, value_delimiter = ',')]
    leaks: Vec<String>,
    #[arg(long, default_value_t = 3)]
    max_batch_len: usize,
    #[arg(long, default_value_t = 2)]
    max_batches: usize,
    /// Message alphabet.
    #[arg(long, value_delimiter = ',', default_value = "a,b,aa")]
    messages: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum HierarchyCmd {
    /// Whether the first notion implies the second.
    Implies {
        x1: String,
        x2: String,
        /// Also derive and print the witness attack.
        #[arg(long)]
        attack: bool,
    },
    /// Graphviz rendering of the graph.
    Dot {
        #[arg(long, value_enum)]
        family: Option<FamilyArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the graph with the reference table.
    Check,
    /// List separation witnesses.
    Witnesses {
        /// Only hand-written ones.
        #[arg(long)]
        curated: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Impartial,
    Sender,
    Receiver,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    #[arg(value_parser = clap::builder::PossibleValuesParser::new(harness::SUITES))]
    name: String,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    null_trials: Option<u64>,
    /// Witness labels, comma-separated.
    #[arg(long, value_delimiter = ',')]
    witnesses: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum NotionsCmd {
    List,
}

struct Ctx {
    seed: u64,
    format: Format,
    exec: Exec,
    bounds: Bounds,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn print_json<T: serde::Serialize + ?Sized>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn parse_leaks(raw: &[String]) -> Result<Vec<LeakageFunction>, String> {
    raw.iter().filter(|s| !s.is_empty()).map(|s| s.trim().parse().map_err(|e| format!("{e}"))).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        format: cli.format,
        exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel },
        bounds: Bounds { senders: cli.senders, receivers: cli.receivers, ..Bounds::default() },
    };
    if cli.verbose > 0 {
        eprintln!("seed {} exec {:?}", ctx.seed, ctx.exec);
    }
    match cli.command {
        Command::Check { notion, file } => check(&ctx, &notion, &file),
        Command::Play(args) => play(&ctx, args),
        Command::Oracle(args) => oracle(&ctx, args),
        Command::Hierarchy(cmd) => hierarchy_cmd(&ctx, cmd),
        Command::Suite(args) => suite(&ctx, args),
        Command::Notions(NotionsCmd::List) => list(&ctx),
    }
}

fn check(ctx: &Ctx, notion: &str, file: &PathBuf) -> ExitCode {
    let notion = match notions::parse(notion) {
        Ok(n) => n,
        Err(e) => return fail(2, e),
    };
    let text = match fs::read_to_string(file) {
        Ok(t) => t,
        Err(e) => return fail(2, format!("{}: {e}", file.display())),
    };
    let queries: Vec<ChallengeBatchQuery> = match serde_json::from_str(&text) {
        Ok(q) => q,
        Err(e) => return fail(2, format!("{}: {e}", file.display())),
    };
    let eval = Evaluator::new(notion, GameConfig::default());
    let mut state = GameState::default();
    let mut verdicts = Vec::new();
    for q in &queries {
        match eval.evaluate(&state, q, 1, &mut |_| 0) {
            Ok(acc) => {
                state = acc.state;
                verdicts.push(Verdict::Accept);
            }
            Err(v) => verdicts.push(v),
        }
    }
    match ctx.format {
        Format::Json => print_json(&verdicts),
        Format::Text => {
            for (i, v) in verdicts.iter().enumerate() {
                match v {
                    Verdict::Accept => println!("query {i}: accept"),
                    Verdict::Reject { atom, reason } => println!("query {i}: reject {atom}: {reason}"),
                }
            }
        }
    }
    if verdicts.iter().all(Verdict::is_accept) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn play(ctx: &Ctx, args: PlayArgs) -> ExitCode {
    let script: AttackScript = match fs::read_to_string(&args.attack)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => return fail(2, format!("{}: {e}", args.attack.display())),
    };
    let notion = match notions::parse(args.notion.as_deref().unwrap_or(&script.notion)) {
        Ok(n) => n,
        Err(e) => return fail(2, e),
    };
    let protocol = match (&args.protocol, parse_leaks(&args.leaks)) {
        (Some(p), _) => match serde_json::from_str::<ProtocolSpec>(p) {
            Ok(p) => p,
            Err(e) => return fail(2, format!("protocol: {e}")),
        },
        (None, Ok(leaks)) => ProtocolSpec::leaky(&leaks),
        (None, Err(e)) => return fail(2, e),
    };
    let est = match estimate_advantage(&notion, &protocol, &script, args.trials, ctx.seed, GameConfig::default(), ctx.exec)
    {
        Ok(e) => e,
        Err(e) => return fail(1, e),
    };
    let check = args.epsilon.map(|eps| epsilon_delta_holds(&est, eps, args.delta.unwrap_or(0.0)));
    match ctx.format {
        Format::Json => print_json(&serde_json::json!({ "estimate": est, "epsilon_delta": check })),
        Format::Text => {
            println!(
                "advantage {:.4} (p0 {:.4}, p1 {:.4}, {} trials per bit, half-width {:.4} at alpha {})",
                est.advantage, est.p0, est.p1, est.trials, est.half_width, est.alpha
            );
            if let Some(c) = check {
                println!("epsilon {} delta {}: {}", c.epsilon, c.delta, if c.holds { "holds" } else { "violated" });
            }
        }
    }
    ExitCode::SUCCESS
}

fn oracle(ctx: &Ctx, args: OracleArgs) -> ExitCode {
    let notion = match notions::parse(&args.notion) {
        Ok(n) => n,
        Err(e) => return fail(2, e),
    };
    let leaks = match parse_leaks(&args.leaks) {
        Ok(l) => l,
        Err(e) => return fail(2, e),
    };
    let bounds = Bounds {
        max_batch_len: args.max_batch_len,
        max_batches: args.max_batches,
        messages: args.messages.iter().map(|m| Message::from(m.as_str())).collect(),
        ..ctx.bounds.clone()
    };
    let result = match exhaustive_safety_with(&notion, &leaks, &bounds, ctx.exec) {
        Ok(r) => r,
        Err(e) => return fail(2, e),
    };
    match ctx.format {
        Format::Json => print_json(&result),
        Format::Text => match &result {
            Safety::Safe { cases } => println!("SAFE ({cases} cases)"),
            Safety::Broken { steps, certain } => {
                println!("BROKEN{}", if *certain { "" } else { " (transcripts overlap for some instances)" });
                println!("{}", serde_json::to_string(steps).expect("serializable"));
            }
        },
    }
    if result.is_safe() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn hierarchy_cmd(ctx: &Ctx, cmd: HierarchyCmd) -> ExitCode {
    let g = hierarchy::graph();
    match cmd {
        HierarchyCmd::Implies { x1, x2, attack } => {
            let answer = match g.implies(&x1, &x2) {
                Ok(a) => a,
                Err(e) => return fail(2, e),
            };
            let script = match (&answer, attack) {
                (Implication::No { witness }, true) => match harness::witness_attack(witness, &ctx.bounds) {
                    Ok(s) => Some(s),
                    Err(e) => return fail(1, e),
                },
                _ => None,
            };
            match ctx.format {
                Format::Json => print_json(&serde_json::json!({ "implication": answer, "attack": script })),
                Format::Text => match &answer {
                    Implication::Yes { path } => println!("YES\npath: {}", path.join(" -> ")),
                    Implication::No { witness } => {
                        let leaks: Vec<String> = witness.leaks.iter().map(|l| l.to_string()).collect();
                        println!("NO\nwitness: {} ({} =/=> {})", witness.label, witness.x1, witness.x2);
                        match &witness.protocol {
                            ProtocolSpec::TwistedPair { pair } => println!("protocol: twisted pair {pair}"),
                            ProtocolSpec::Leaky { .. } => println!("leak: {}", leaks.join(", ")),
                        }
                        if let Some(s) = &script {
                            println!("attack: {}", serde_json::to_string(s).expect("serializable"));
                        }
                    }
                    Implication::Unknown => println!("UNKNOWN"),
                },
            }
            ExitCode::SUCCESS
        }
        HierarchyCmd::Dot { family, out } => {
            let family = family.map(|f| match f {
                FamilyArg::Impartial => Family::Impartial,
                FamilyArg::Sender => Family::Sender,
                FamilyArg::Receiver => Family::Receiver,
            });
            let dot = g.export_dot(family);
            match out {
                Some(path) => {
                    if let Err(e) = fs::write(&path, dot) {
                        return fail(2, format!("{}: {e}", path.display()));
                    }
                }
                None => print!("{dot}"),
            }
            ExitCode::SUCCESS
        }
        HierarchyCmd::Check => {
            let report = g.check_table();
            let bad = report.mismatches();
            match ctx.format {
                Format::Json => print_json(&report.rows),
                Format::Text => {
                    for m in &bad {
                        println!("MISMATCH {} vs {}: expected {}, derived {}", m.pair[0], m.pair[1], m.expected, m.derived);
                    }
                    let (same, total) = report.label_agreement();
                    println!(
                        "{} cells, {} mismatches, witness labels agree on {same} of {total} separated cells",
                        report.rows.len(),
                        bad.len()
                    );
                }
            }
            if bad.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        HierarchyCmd::Witnesses { curated } => {
            let list: Vec<_> = g.separations.iter().filter(|w| !curated || w.is_curated()).collect();
            match ctx.format {
                Format::Json => print_json(&list),
                Format::Text => {
                    for w in list {
                        let leaks: Vec<String> = w.leaks.iter().map(|l| l.to_string()).collect();
                        let how = match &w.protocol {
                            ProtocolSpec::TwistedPair { pair } => format!("twisted pair {pair}"),
                            ProtocolSpec::Leaky { .. } => format!("leaks {}", leaks.join(", ")),
                        };
                        println!("{:6} {} =/=> {}  [{how}; base {}]", w.label, w.x1, w.x2, w.base);
                    }
                }
            }
            ExitCode::SUCCESS
        }
    }
}

fn suite(ctx: &Ctx, args: SuiteArgs) -> ExitCode {
    let defaults = SuiteConfig::default();
    let config = SuiteConfig {
        seed: ctx.seed,
        trials: args.trials.unwrap_or(defaults.trials),
        null_trials: args.null_trials.unwrap_or(defaults.null_trials),
        samples: args.samples.unwrap_or(defaults.samples),
        bounds: ctx.bounds.clone(),
        witnesses: (!args.witnesses.is_empty()).then_some(args.witnesses),
        exec: ctx.exec,
    };
    let report = match harness::run_suite(&args.name, &config) {
        Ok(r) => r,
        Err(e) => return fail(2, e),
    };
    let json = serde_json::to_string_pretty(&report).expect("serializable");
    if let Some(path) = &args.out {
        if let Err(e) = fs::write(path, &json) {
            return fail(2, format!("{}: {e}", path.display()));
        }
    }
    match ctx.format {
        Format::Json => println!("{json}"),
        Format::Text => print!("{}", report.summary()),
    }
    if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn list(ctx: &Ctx) -> ExitCode {
    let all = notions::registry().all();
    match ctx.format {
        Format::Json => print_json(&all),
        Format::Text => {
            for n in all {
                let atoms: Vec<String> = n.atoms.iter().map(|a| a.to_string()).collect();
                println!("{:18} {:10} {:34} {}", n.name, format!("{:?}", n.family), n.cluster.to_string(), atoms.join(" "));
            }
        }
    }
    ExitCode::SUCCESS
}
