//! Experiment suites over the hierarchy, the witnesses and the equivalences.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adversaries::{
    self, exact_advantage, observable_distinguisher, random_guesser, translate, AttackScript, GuessRule, Step,
    Translation,
};
use crate::challenger::{digest, GameConfig};
use crate::harness::{estimate_advantage, run_indexed, trial_seed, Bounds, Exec, HarnessError, QuerySampler};
use crate::hierarchy::{graph, EdgeKind, SeparationWitness};
use crate::model::{Batch, Communication, Message};
use crate::notions::{self, NotionSpec};
use crate::props::{self, BatchLinking, PropertyAtom, Side};
use crate::protocols::{LeakageFunction, ProtocolSpec};

pub const SUITES: [&str; 5] = ["implications", "separations", "options", "equivalences", "baselines"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Trials per challenge bit for witness attacks.
    pub trials: u64,
    /// Trials per challenge bit for null baselines.
    pub null_trials: u64,
    /// Random queries or generated attacks per case.
    pub samples: usize,
    pub bounds: Bounds,
    /// Witness labels to run; `None` selects every curated witness of the sender side.
    pub witnesses: Option<Vec<String>>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            trials: 1000,
            null_trials: 10_000,
            samples: 1000,
            bounds: Bounds::default(),
            witnesses: None,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: String,
    pub passed: bool,
    pub detail: String,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl CaseResult {
    fn new(id: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CaseResult { id: id.into(), passed, detail: detail.into(), metrics: BTreeMap::new() }
    }

    fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.into(), value);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub config_digest: String,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
    pub runtime_ms: u64,
}

impl SuiteReport {
    /// The report with its runtime zeroed, for reproducibility comparisons.
    pub fn without_runtime(&self) -> SuiteReport {
        SuiteReport { runtime_ms: 0, ..self.clone() }
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.passed).collect()
    }

    /// One line per case followed by a summary line.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            out.push_str(&format!("{} {} {}\n", if c.passed { "PASS" } else { "FAIL" }, c.id, c.detail));
        }
        let failed = self.failures().len();
        out.push_str(&format!(
            "{}: {} cases, {} failed, {} ms\n",
            self.suite,
            self.cases.len(),
            failed,
            self.runtime_ms
        ));
        out
    }
}

pub fn run_suite(name: &str, config: &SuiteConfig) -> Result<SuiteReport, HarnessError> {
    let start = Instant::now();
    let cases = match name {
        "implications" => implications(config),
        "separations" => separations(config),
        "options" => options(config),
        "equivalences" => equivalences(config),
        "baselines" => baselines(config),
        other => return Err(HarnessError::UnknownSuite(other.to_string())),
    }?;
    Ok(SuiteReport {
        suite: name.to_string(),
        seed: config.seed,
        config_digest: digest(config),
        passed: cases.iter().all(|c| c.passed),
        cases,
        runtime_ms: start.elapsed().as_millis() as u64,
    })
}

fn parse(name: &str) -> NotionSpec {
    notions::parse(name).expect("registered notion")
}

fn rng_for(config: &SuiteConfig, case: usize, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(trial_seed(config.seed, 0, case as u64, stream))
}

fn nothing_leaked() -> ProtocolSpec {
    ProtocolSpec::leaky(&[])
}

/// Whether `notion` accepts every step of `steps`.
pub fn script_valid(notion: &NotionSpec, steps: &[Step]) -> Result<(), String> {
    adversaries::simulate(notion, &nothing_leaked(), steps, GameConfig::default(), 0)
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn nontrivial(steps: &[Step]) -> bool {
    steps.iter().any(|s| match s {
        Step::Batch { query, .. } => !query.challenge_rows().is_empty(),
        _ => false,
    })
}

// ---------------------------------------------------------------------------
// implications

fn implications(config: &SuiteConfig) -> Result<Vec<CaseResult>, HarnessError> {
    let edges = &graph().edges;
    Ok(run_indexed(edges.len(), config.exec, |i| {
        let e = &edges[i];
        let (x1, x2) = (parse(&e.from), parse(&e.to));
        let sampler = QuerySampler::new(&x2, &config.bounds);
        let mut rng = rng_for(config, i, 4);
        let mut failures = 0usize;
        let mut first_failure = String::new();
        let mut interesting = 0usize;
        for _ in 0..config.samples {
            let sample = sampler.sample(&mut rng);
            interesting += usize::from(nontrivial(&sample.steps));
            let outcome = match &e.kind {
                EdgeKind::Transform { translation, .. } => {
                    let script = AttackScript { notion: x2.name.clone(), steps: sample.steps.clone(), guess: GuessRule::Uniform };
                    match translate(*translation, &script, &x1.name) {
                        Ok(out) => out.iter().try_for_each(|s| script_valid(&x1, &s.steps)),
                        Err(err) => Err(err.to_string()),
                    }
                }
                _ => {
                    let source = if x1.uses_instances() == x2.uses_instances() { &sample.steps } else { &sample.realized };
                    let steps: Vec<Step> = source
                        .iter()
                        .filter(|s| x1.has_stages() || !matches!(s, Step::SwitchStage))
                        .cloned()
                        .collect();
                    script_valid(&x1, &steps)
                }
            };
            if let Err(why) = outcome {
                if failures == 0 {
                    first_failure = format!("{why} on {}", serde_json::to_string(&sample.steps).unwrap_or_default());
                }
                failures += 1;
            }
        }
        let kind = match e.kind {
            EdgeKind::Definitional => "definitional",
            EdgeKind::Entailment => "entailment",
            EdgeKind::Transform { .. } => "transform",
        };
        let detail = if failures == 0 {
            format!("{kind}: {} queries transferred, {interesting} with challenge rows", config.samples)
        } else {
            format!("{kind}: {failures} rejected; first: {first_failure}")
        };
        CaseResult::new(format!("{} => {}", e.from, e.to), failures == 0, detail)
            .metric("samples", config.samples as f64)
            .metric("with_challenge_rows", interesting as f64)
            .metric("failures", failures as f64)
    }))
}

// ---------------------------------------------------------------------------
// separations and baselines

/// Curated witnesses named in `labels`, or every curated sender-side one.
pub fn selected_witnesses(labels: Option<&[String]>) -> Vec<SeparationWitness> {
    graph()
        .separations
        .iter()
        .filter(|w| match labels {
            Some(l) => l.contains(&w.label),
            None => w.is_curated() && !w.label.ends_with('\''),
        })
        .cloned()
        .collect()
}

type AttackCache = Mutex<BTreeMap<(String, String, String, String), AttackScript>>;

/// Witness attacks are deterministic in the bounds, so they are derived once per process.
pub fn witness_attack(w: &SeparationWitness, bounds: &Bounds) -> Result<AttackScript, String> {
    static CACHE: OnceLock<AttackCache> = OnceLock::new();
    let key = (w.label.clone(), w.x1.clone(), w.x2.clone(), digest(bounds));
    let cache = CACHE.get_or_init(Default::default);
    if let Some(a) = cache.lock().expect("cache lock").get(&key) {
        return Ok(a.clone());
    }
    let a = w.attack(bounds).map_err(|e| e.to_string())?;
    cache.lock().expect("cache lock").insert(key, a.clone());
    Ok(a)
}

fn separations(config: &SuiteConfig) -> Result<Vec<CaseResult>, HarnessError> {
    let mut out = Vec::new();
    for (i, w) in selected_witnesses(config.witnesses.as_deref()).iter().enumerate() {
        let id = format!("{} {} =/=> {}", w.label, w.x1, w.x2);
        let leaks: Vec<String> = w.leaks.iter().map(|l| l.to_string()).collect();
        let started = Instant::now();
        let safe = match w.x1_safe(&config.bounds) {
            Ok(s) => s,
            Err(e) => {
                out.push(CaseResult::new(id, false, format!("oracle failed: {e}")));
                continue;
            }
        };
        let attack = match witness_attack(w, &config.bounds) {
            Ok(a) => a,
            Err(e) => {
                out.push(CaseResult::new(id, false, format!("safe={safe}, no attack: {e}")));
                continue;
            }
        };
        let est = estimate_advantage(
            &parse(&w.x2),
            &w.protocol,
            &attack,
            config.trials,
            config.seed.wrapping_add(i as u64),
            GameConfig::default(),
            config.exec,
        )?;
        let passed = safe && est.advantage >= 0.99;
        out.push(
            CaseResult::new(
                id,
                passed,
                format!(
                    "leaks [{}], {} safe={safe}, advantage {:.3} over {} trials",
                    leaks.join(", "),
                    w.x1,
                    est.advantage,
                    est.trials
                ),
            )
            .metric("advantage", est.advantage)
            .metric("seconds", started.elapsed().as_secs_f64()),
        );
    }
    Ok(out)
}

fn baselines(config: &SuiteConfig) -> Result<Vec<CaseResult>, HarnessError> {
    let mut scripts: Vec<(String, AttackScript)> = ["C!O", "S!O", "(SM)!L", "(2S)!L"]
        .iter()
        .map(|n| (format!("random guesser {n}"), random_guesser(&parse(n))))
        .collect();
    for w in selected_witnesses(config.witnesses.as_deref()) {
        match witness_attack(&w, &config.bounds) {
            Ok(a) => scripts.push((format!("{} attack on {}", w.label, w.x2), a)),
            Err(e) => return Err(HarnessError::Setup(format!("{}: {e}", w.label))),
        }
    }
    let mut out = Vec::new();
    for (i, (id, script)) in scripts.iter().enumerate() {
        let notion = notions::parse(&script.notion).map_err(|e| HarnessError::Setup(e.to_string()))?;
        let est = estimate_advantage(
            &notion,
            &nothing_leaked(),
            script,
            config.null_trials,
            config.seed.wrapping_add(1000 + i as u64),
            GameConfig::default(),
            config.exec,
        )?;
        out.push(
            CaseResult::new(
                id.clone(),
                est.within_null_band(),
                format!("advantage {:.4}, band {:.4}", est.advantage, est.half_width * 2.0),
            )
            .metric("advantage", est.advantage),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// options: challenge renumbering

/// Notions and leaks used to generate attacks for the renumbering check.
const RENUMBER_POOL: [(&str, &[LeakageFunction]); 6] = [
    ("S!O", &[LeakageFunction::Active(Side::Sender)]),
    ("SM!L", &[LeakageFunction::Partition(Side::Sender)]),
    ("M!O", &[LeakageFunction::MessageContents]),
    ("!O", &[LeakageFunction::SenderReceiverPairs]),
    ("(SR)!O", &[LeakageFunction::FirstSenderReceiver]),
    ("(SM)!L", &[LeakageFunction::SenderLengthPairs]),
];

/// Sampled attacks: random compliant steps with the observation-equality guess.
fn generated_attack(notion: &NotionSpec, leaks: &[LeakageFunction], steps: Vec<Step>) -> Option<AttackScript> {
    let spec = ProtocolSpec::leaky(leaks);
    observable_distinguisher(notion, &spec, steps, GameConfig::default()).ok()
}

fn sample_attacks(
    config: &SuiteConfig,
    case: usize,
    notion: &NotionSpec,
    leaks: &[LeakageFunction],
    want: usize,
) -> Vec<AttackScript> {
    let sampler = QuerySampler::new(notion, &config.bounds);
    let mut rng = rng_for(config, case, 5);
    let mut out = Vec::new();
    for _ in 0..want * 50 {
        if out.len() == want {
            break;
        }
        let sample = sampler.sample(&mut rng);
        if sample.steps.is_empty() {
            continue;
        }
        if let Some(a) = generated_attack(notion, leaks, sample.steps) {
            out.push(a);
        }
    }
    out
}

fn options(config: &SuiteConfig) -> Result<Vec<CaseResult>, HarnessError> {
    let per = config.samples.div_ceil(RENUMBER_POOL.len());
    Ok(run_indexed(RENUMBER_POOL.len(), config.exec, |i| {
        let (name, leaks) = RENUMBER_POOL[i];
        let notion = parse(name);
        let spec = ProtocolSpec::leaky(leaks);
        let attacks = sample_attacks(config, i, &notion, leaks, per);
        let paired = notion.atoms.iter().any(|a| matches!(a, PropertyAtom::Mixed(_)));
        let mut rng = rng_for(config, i, 6);
        let mut failures = Vec::new();
        for a in &attacks {
            let k = if paired { 2 * rng.gen_range(1..=2) } else { rng.gen_range(1..=3) };
            let result = translate(Translation::ChallengeRenumber { per_challenge: k }, a, &notion.name)
                .map_err(|e| e.to_string())
                .and_then(|out| {
                    let renumbered = &out[0];
                    let target = notions::parse(&renumbered.notion).map_err(|e| e.to_string())?;
                    let rescripted = generated_attack(&target, leaks, renumbered.steps.clone())
                        .ok_or_else(|| format!("renumbered attack on {} no longer distinguishes", target.name))?;
                    let before = exact_advantage(&notion, &spec, a, GameConfig::default()).map_err(|e| e.to_string())?;
                    let after =
                        exact_advantage(&target, &spec, &rescripted, GameConfig::default()).map_err(|e| e.to_string())?;
                    if (before - after).abs() > 1e-12 {
                        return Err(format!("advantage {before} became {after} under {}", target.name));
                    }
                    Ok(())
                });
            if let Err(e) = result {
                failures.push(e);
            }
        }
        let enough = attacks.len() == per;
        let detail = match failures.first() {
            None if enough => format!("{} attacks renumbered with validity and advantage kept", attacks.len()),
            None => format!("only {} of {per} attacks generated", attacks.len()),
            Some(first) => format!("{} of {} failed; first: {first}", failures.len(), attacks.len()),
        };
        CaseResult::new(format!("renumber {name} leaking {}", leaks[0]), failures.is_empty() && enough, detail)
            .metric("attacks", attacks.len() as f64)
            .metric("failures", failures.len() as f64)
    }))
}

// ---------------------------------------------------------------------------
// equivalences

fn equivalences(config: &SuiteConfig) -> Result<Vec<CaseResult>, HarnessError> {
    let mut out = vec![batch_split_case(config), sender_replace_case(config)];
    out.push(permutation_case(3, 3, 3));
    for (a, b) in &graph().equivalences {
        let same = graph().resolve(a).ok().as_deref() == Some(b.as_str());
        out.push(CaseResult::new(format!("alias {a} = {b}"), same, "resolved through the equivalence list"));
    }
    Ok(out)
}

/// Split attacks from random compliant observability queries keep their
/// deterministic advantage against a communication counter.
fn batch_split_case(config: &SuiteConfig) -> CaseResult {
    let (source, target) = (parse("C!O"), parse("LS!O"));
    let leaks = [LeakageFunction::CommCount];
    let spec = ProtocolSpec::leaky(&leaks);
    let attacks = sample_attacks(config, 100, &source, &leaks, config.samples);
    let mut failures = Vec::new();
    for a in &attacks {
        let check = translate(Translation::BatchSplit, a, &target.name).map_err(|e| e.to_string()).and_then(|out| {
            let split = generated_attack(&target, &leaks, out[0].steps.clone())
                .ok_or_else(|| "split attack does not distinguish".to_string())?;
            let before = exact_advantage(&source, &spec, a, GameConfig::default()).map_err(|e| e.to_string())?;
            let after = exact_advantage(&target, &spec, &split, GameConfig::default()).map_err(|e| e.to_string())?;
            if before != after {
                return Err(format!("advantage {before} became {after}"));
            }
            Ok(())
        });
        if let Err(e) = check {
            failures.push(e);
        }
    }
    let ok = failures.is_empty() && attacks.len() == config.samples;
    CaseResult::new(
        "batch split C!O -> LS!O",
        ok,
        match failures.first() {
            Some(f) => format!("{} of {} failed; first: {f}", failures.len(), attacks.len()),
            None => format!("{} attacks split", attacks.len()),
        },
    )
    .metric("attacks", attacks.len() as f64)
}

/// Attacks on sender unobservability stay valid once the first challenge
/// sender of scenario 1 is replaced by an unused sender.
fn sender_replace_case(config: &SuiteConfig) -> CaseResult {
    let (source, target) = (parse("S!O"), parse("S!O'"));
    let sampler = QuerySampler::new(&source, &config.bounds);
    let mut rng = rng_for(config, 101, 4);
    let mut failures = Vec::new();
    let mut checked = 0;
    for _ in 0..config.samples {
        let sample = sampler.sample(&mut rng);
        if !nontrivial(&sample.steps) {
            continue;
        }
        checked += 1;
        let script = AttackScript { notion: source.name.clone(), steps: sample.steps, guess: GuessRule::Uniform };
        let check = translate(Translation::SenderReplace, &script, &target.name)
            .map_err(|e| e.to_string())
            .and_then(|out| script_valid(&target, &out[0].steps));
        if let Err(e) = check {
            failures.push(e);
        }
    }
    CaseResult::new(
        "sender replace S!O -> S!O'",
        failures.is_empty(),
        match failures.first() {
            Some(f) => format!("{} of {checked} failed; first: {f}", failures.len()),
            None => format!("{checked} attacks replaced"),
        },
    )
    .metric("attacks", checked as f64)
}

/// Messages sent by each sender, as a sorted list of multisets keyed by sender.
fn per_sender(batch: &[Communication]) -> BTreeMap<u32, Vec<Message>> {
    let mut m: BTreeMap<u32, Vec<Message>> = BTreeMap::new();
    for c in batch {
        if let Some(r) = c.as_real() {
            m.entry(r.sender).or_default().push(r.message.clone());
        }
    }
    for v in m.values_mut() {
        v.sort();
    }
    m
}

fn permutations(n: u32) -> Vec<Vec<u32>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Whether some sender bijection maps the messages each sender sends in
/// one batch onto those of its image in the other.
fn sender_permutation_exists(
    m0: &BTreeMap<u32, Vec<Message>>,
    m1: &BTreeMap<u32, Vec<Message>>,
    senders: u32,
    perms: &[Vec<u32>],
) -> bool {
    perms.iter().any(|p| (0..senders).all(|u| m0.get(&u) == m1.get(&p[u as usize])))
}

/// Every pair of equally long single batches within the bounds: the
/// permutation atom, the partition atom and a brute-force search for a
/// sender bijection must agree.
pub fn permutation_case(senders: u32, messages: usize, max_len: usize) -> CaseResult {
    let alphabet: Vec<Message> = ["a", "b", "c"].iter().take(messages).map(|m| Message::from(*m)).collect();
    let mut universe = vec![Communication::Empty];
    for s in 0..senders {
        for m in &alphabet {
            universe.push(Communication::real(s, 0, m.clone()));
        }
    }
    let perms = permutations(senders);
    let mut batches: Vec<Vec<Communication>> = Vec::new();
    for len in 1..=max_len {
        let mut idx = vec![0usize; len];
        loop {
            batches.push(idx.iter().map(|&i| universe[i].clone()).collect());
            let mut k = 0;
            while k < len {
                idx[k] += 1;
                if idx[k] < universe.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == len {
                break;
            }
        }
    }
    let linking: Vec<BatchLinking> =
        batches.iter().map(|b| BatchLinking::of(&Batch::new(b.clone()).expect("non-empty"))).collect();
    let g: Vec<_> = linking
        .iter()
        .map(|l| props::feature(PropertyAtom::Permutation, std::slice::from_ref(l)).ok())
        .collect();
    let p: Vec<_> = linking
        .iter()
        .map(|l| props::feature(PropertyAtom::Partition(Side::Sender), std::slice::from_ref(l)).ok())
        .collect();
    let sent: Vec<_> = batches.iter().map(|b| per_sender(b)).collect();
    let mut checked = 0u64;
    let mut mismatch = None;
    let by_len: BTreeSet<usize> = batches.iter().map(Vec::len).collect();
    for len in by_len {
        let ids: Vec<usize> = (0..batches.len()).filter(|&i| batches[i].len() == len).collect();
        for &i in &ids {
            for &j in &ids {
                checked += 1;
                let brute = sender_permutation_exists(&sent[i], &sent[j], senders, &perms);
                let via_g = g[i].is_some() && g[i] == g[j];
                let via_p = p[i].is_some() && p[i] == p[j];
                if (brute != via_g || via_g != via_p) && mismatch.is_none() {
                    mismatch = Some(format!("{:?} vs {:?}: brute {brute}, G {via_g}, P {via_p}", batches[i], batches[j]));
                }
            }
        }
    }
    CaseResult::new(
        format!("G vs P on single batches, {senders} senders, {messages} messages"),
        mismatch.is_none(),
        mismatch.unwrap_or_else(|| format!("{checked} batch pairs agree")),
    )
    .metric("pairs", checked as f64)
}
