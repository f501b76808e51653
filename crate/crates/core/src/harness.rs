//! Advantage estimation and the bounded exhaustive oracle.

use std::collections::hash_map::{DefaultHasher, Entry};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversaries::{self, run_script, AttackScript, Step};
use crate::challenger::{Challenger, Evaluator, GameConfig, GameState};
use crate::model::{Batch, ChallengeBatchQuery, Communication, Message, Real, UserId};
use crate::notions::NotionSpec;
use crate::props::{self, eval_complex, AtomKind, BatchLinking, ChallengeView, Four, PropertyAtom};
use crate::protocols::{leaky_ideal, LeakageFunction, LeakyIdeal, Observation, Protocol, ProtocolSpec};

pub use crate::suites::{
    permutation_case, run_suite, script_valid, selected_witnesses, witness_attack, CaseResult, SuiteConfig, SuiteReport, SUITES,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("trial {trial} (b = {bit}) aborted: {reason}")]
    AttackAborted { trial: u64, bit: u8, reason: String },
    #[error("enumeration exceeds {limit} cases")]
    SpaceTooLarge { limit: u64 },
    #[error("not supported by the oracle: {0}")]
    Unsupported(String),
    #[error("unknown suite {0}")]
    UnknownSuite(String),
    #[error("{0}")]
    Setup(String),
}

/// Execution mode for trials and enumeration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

/// Maps `f` over `0..n`, in index order, on the rayon pool when enabled.
pub(crate) fn run_indexed<T: Send>(n: usize, exec: Exec, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

// ---------------------------------------------------------------------------
// Statistics

pub const DEFAULT_ALPHA: f64 = 0.01;

/// Hoeffding radius of an empirical probability from `n` Bernoulli trials.
pub fn hoeffding_half_width(n: u64, alpha: f64) -> f64 {
    ((2.0 / alpha).ln() / (2.0 * n.max(1) as f64)).sqrt()
}

/// Band around 0 for the difference of two arms of `n` trials each.
pub fn null_band(n: u64, alpha: f64) -> f64 {
    2.0 * hoeffding_half_width(n, alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEstimate {
    pub trials: u64,
    /// Pr[g = 0 | b = 0]
    pub p0: f64,
    /// Pr[g = 0 | b = 1]
    pub p1: f64,
    pub advantage: f64,
    pub half_width: f64,
    pub alpha: f64,
}

impl AdvantageEstimate {
    pub fn within_null_band(&self) -> bool {
        self.advantage <= 2.0 * self.half_width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonDeltaCheck {
    pub epsilon: f64,
    pub delta: f64,
    pub holds: bool,
}

/// Whether `p0 <= e^eps * p1 + delta` is consistent with the estimate.
pub fn epsilon_delta_holds(est: &AdvantageEstimate, epsilon: f64, delta: f64) -> EpsilonDeltaCheck {
    let h = est.half_width;
    let lower_p0 = (est.p0 - h).max(0.0);
    let upper_p1 = (est.p1 + h).min(1.0);
    EpsilonDeltaCheck { epsilon, delta, holds: lower_p0 <= epsilon.exp() * upper_p1 + delta }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one stream of one trial; independent of the execution mode.
pub fn trial_seed(base: u64, bit: u8, trial: u64, stream: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ trial.wrapping_mul(4).wrapping_add(bit as u64)) ^ stream)
}

/// Runs `trials` games per challenge bit and estimates the advantage.
pub fn estimate_advantage(
    notion: &NotionSpec,
    protocol: &ProtocolSpec,
    script: &AttackScript,
    trials: u64,
    seed: u64,
    config: GameConfig,
    exec: Exec,
) -> Result<AdvantageEstimate, HarnessError> {
    protocol.build(0).map_err(|e| HarnessError::Setup(e.to_string()))?;
    let n = trials.max(1);
    let results = run_indexed((2 * n) as usize, exec, |k| {
        let bit = (k as u64 / n) as u8;
        let trial = k as u64 % n;
        let proto = protocol.build(trial_seed(seed, bit, trial, 1)).expect("checked above");
        let mut ch = Challenger::with_bit(notion.clone(), proto, trial_seed(seed, bit, trial, 0), bit, config);
        let run = run_script(script, &mut ch, trial_seed(seed, bit, trial, 2));
        if run.aborted {
            let reason = match run.transcript.last() {
                Some(Observation::Abort { reason }) => reason.clone(),
                other => format!("{other:?}"),
            };
            Err(HarnessError::AttackAborted { trial, bit, reason })
        } else {
            Ok(run.guess == 0)
        }
    });
    let mut zeros = [0u64; 2];
    for (k, r) in results.into_iter().enumerate() {
        if r? {
            zeros[k / n as usize] += 1;
        }
    }
    let p0 = zeros[0] as f64 / n as f64;
    let p1 = zeros[1] as f64 / n as f64;
    Ok(AdvantageEstimate {
        trials: n,
        p0,
        p1,
        advantage: (p0 - p1).abs(),
        half_width: hoeffding_half_width(n, DEFAULT_ALPHA),
        alpha: DEFAULT_ALPHA,
    })
}

// ---------------------------------------------------------------------------
// Exhaustive oracle

/// Size of the enumerated universe.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub senders: u32,
    pub receivers: u32,
    pub messages: Vec<Message>,
    pub max_batch_len: usize,
    pub max_batches: usize,
    pub max_cases: u64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            senders: 2,
            receivers: 2,
            messages: ["a", "b", "aa"].into_iter().map(Message::from).collect(),
            max_batch_len: 3,
            max_batches: 2,
            max_cases: 20_000_000,
        }
    }
}

impl Bounds {
    fn reals(&self) -> Vec<Communication> {
        let mut out = Vec::new();
        for s in 0..self.senders {
            for r in 0..self.receivers {
                for m in &self.messages {
                    out.push(Communication::real(s as UserId, r as UserId, m.clone()));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "safety", rename_all = "snake_case")]
pub enum Safety {
    Safe { cases: u64 },
    /// `certain`: the scenario-0 and scenario-1 transcripts never coincide.
    Broken { steps: Vec<Step>, certain: bool },
}

impl Safety {
    pub fn is_safe(&self) -> bool {
        matches!(self, Safety::Safe { .. })
    }
}

fn hash_of<T: Hash + ?Sized>(v: &T) -> u64 {
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

fn chain(prev: u64, v: impl Hash) -> u64 {
    hash_of(&(prev, v))
}

fn history_free(notion: &NotionSpec, leaks: &[LeakageFunction]) -> bool {
    notion.options.is_empty()
        && notion.atoms.iter().all(|a| !a.uses_history() && a.kind() != AtomKind::Challenge)
        && leaks.iter().all(|l| !l.uses_history())
}

fn first_sensitive(leaks: &[LeakageFunction]) -> bool {
    use LeakageFunction::*;
    leaks.iter().any(|l| {
        matches!(l, FirstSenderReceiver | FirstSenderLength | FirstReceiverLength | FirstSender | FirstReceiver)
    })
}

/// Checks whether any compliant query within `bounds` makes the leaky ideal
/// protocol's observations depend on the challenge bit.
pub fn exhaustive_safety(notion: &NotionSpec, leaks: &[LeakageFunction], bounds: &Bounds) -> Result<Safety, HarnessError> {
    exhaustive_safety_with(notion, leaks, bounds, Exec::default())
}

pub fn exhaustive_safety_with(
    notion: &NotionSpec,
    leaks: &[LeakageFunction],
    bounds: &Bounds,
    exec: Exec,
) -> Result<Safety, HarnessError> {
    if notion.options.session || notion.options.behavior.is_some() || notion.options.corruption.is_some() {
        return Err(HarnessError::Unsupported(format!("{} has session or corruption options", notion.name)));
    }
    let independent = notion.atoms.iter().all(|a| {
        matches!(a, PropertyAtom::Something | PropertyAtom::Nothing) || a.kind() == AtomKind::Activity
    }) && notion.options.is_empty();
    let raw = if independent { independent_scenarios(notion, leaks, bounds)? } else { paired(notion, leaks, bounds, exec)? };
    Ok(match raw {
        Safety::Broken { steps, .. } => {
            let spec = ProtocolSpec::leaky(leaks);
            let config = GameConfig::default();
            let zero = adversaries::simulate(notion, &spec, &steps, config, 0)
                .map_err(|e| HarnessError::Setup(format!("oracle produced an invalid query: {e}")))?;
            let one = adversaries::simulate(notion, &spec, &steps, config, 1)
                .map_err(|e| HarnessError::Setup(format!("oracle produced an invalid query: {e}")))?;
            Safety::Broken { certain: zero.is_disjoint(&one), steps }
        }
        safe => safe,
    })
}

/// Non-decreasing index sequences of length `len` over `0..n`.
fn multisets(n: usize, len: usize, ordered: bool) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(len);
    fn rec(n: usize, len: usize, ordered: bool, cur: &mut Vec<u16>, out: &mut Vec<Vec<u16>>) {
        if cur.len() == len {
            out.push(cur.clone());
            return;
        }
        let start = if ordered { 0 } else { cur.last().copied().unwrap_or(0) as usize };
        for i in start..n {
            cur.push(i as u16);
            rec(n, len, ordered, cur, out);
            cur.pop();
        }
    }
    rec(n, len, ordered, &mut cur, &mut out);
    out
}

/// Every batch shape of one scenario: index multisets, with each distinct
/// element moved to the front when the first communication is observable.
fn batch_shapes(n: usize, max_len: usize, ordered_first: bool) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    for len in 1..=max_len {
        for m in multisets(n, len, false) {
            if ordered_first {
                let mut seen = Vec::new();
                for (k, &x) in m.iter().enumerate() {
                    if seen.contains(&x) {
                        continue;
                    }
                    seen.push(x);
                    let mut v = vec![x];
                    v.extend(m.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, y)| *y));
                    out.push(v);
                }
            } else {
                out.push(m);
            }
        }
    }
    out
}

/// Oracle for notions whose only constraints are scenario-wise activity
/// features: a pair of histories is compliant iff the feature trajectories
/// agree, so it suffices to check that leakage is a function of them.
fn independent_scenarios(notion: &NotionSpec, leaks: &[LeakageFunction], bounds: &Bounds) -> Result<Safety, HarnessError> {
    let mut universe = bounds.reals();
    if !notion.has(PropertyAtom::Something) {
        universe.push(Communication::Empty);
    }
    let acts: Vec<PropertyAtom> = notion.atoms.iter().copied().filter(|a| a.kind() == AtomKind::Activity).collect();
    let depth = if history_free(notion, leaks) { 1 } else { bounds.max_batches };
    let first = first_sensitive(leaks);
    let shapes_first = batch_shapes(universe.len(), bounds.max_batch_len, first);
    let shapes_rest = batch_shapes(universe.len(), bounds.max_batch_len, false);

    struct Walk<'a> {
        universe: &'a [Communication],
        acts: &'a [PropertyAtom],
        depth: usize,
        shapes_first: &'a [Vec<u16>],
        shapes_rest: &'a [Vec<u16>],
        seen: HashMap<u64, (u64, Vec<Vec<u16>>)>,
        cases: u64,
        limit: u64,
    }

    impl Walk<'_> {
        fn batch(&self, shape: &[u16]) -> Batch {
            Batch::new(shape.iter().map(|&i| self.universe[i as usize].clone()).collect()).expect("non-empty")
        }

        fn go(
            &mut self,
            history: &mut Vec<BatchLinking>,
            proto: &LeakyIdeal,
            key: u64,
            leak: u64,
            path: &mut Vec<Vec<u16>>,
        ) -> Result<Option<(Vec<Vec<u16>>, Vec<Vec<u16>>)>, HarnessError> {
            let shapes = if path.is_empty() { self.shapes_first } else { self.shapes_rest };
            for shape in shapes {
                self.cases += 1;
                if self.cases > self.limit {
                    return Err(HarnessError::SpaceTooLarge { limit: self.limit });
                }
                let batch = self.batch(shape);
                history.push(BatchLinking::of(&batch));
                let features: Result<Vec<props::Feature>, _> =
                    self.acts.iter().map(|&a| props::feature(a, history)).collect();
                let Ok(features) = features else {
                    history.pop();
                    continue;
                };
                let mut next = proto.clone();
                let obs = next.process_batch(&batch);
                let key2 = chain(key, (shape.len(), &features));
                let leak2 = chain(leak, &obs);
                path.push(shape.clone());
                match self.seen.entry(key2) {
                    Entry::Vacant(v) => {
                        v.insert((leak2, path.clone()));
                    }
                    Entry::Occupied(o) => {
                        if o.get().0 != leak2 {
                            return Ok(Some((o.get().1.clone(), path.clone())));
                        }
                    }
                }
                if path.len() < self.depth {
                    if let Some(found) = self.go(history, &next, key2, leak2, path)? {
                        return Ok(Some(found));
                    }
                }
                path.pop();
                history.pop();
            }
            Ok(None)
        }
    }

    let mut walk = Walk {
        universe: &universe,
        acts: &acts,
        depth,
        shapes_first: &shapes_first,
        shapes_rest: &shapes_rest,
        seen: HashMap::new(),
        cases: 0,
        limit: bounds.max_cases,
    };
    let found = walk.go(&mut Vec::new(), &leaky_ideal(leaks), 0, 0, &mut Vec::new())?;
    let Some((p0, p1)) = found else {
        return Ok(Safety::Safe { cases: walk.cases });
    };
    let mut steps = Vec::new();
    for (s0, s1) in p0.iter().zip(&p1) {
        let q = ChallengeBatchQuery::simple(walk.batch(s0), walk.batch(s1)).map_err(|e| HarnessError::Setup(e.to_string()))?;
        steps.push(Step::batch(q));
    }
    Ok(Safety::Broken { steps, certain: false })
}

/// Candidate rows: four communications satisfying every row-local atom.
fn row_candidates(notion: &NotionSpec, bounds: &Bounds) -> Vec<Four> {
    let mut universe = bounds.reals();
    universe.push(Communication::Empty);
    let local: Vec<PropertyAtom> = notion.atoms.iter().copied().filter(|a| a.kind() == AtomKind::RowLocal).collect();
    let ok = |f: &Four| {
        let q = ChallengeBatchQuery::from_rows(std::slice::from_ref(f)).expect("one row");
        local.iter().all(|&a| props::eval_simple(a, &q).map(|v| v.is_accept()).unwrap_or(false))
    };
    let mut out = Vec::new();
    if notion.uses_instances() {
        for w in &universe {
            for x in &universe {
                for y in &universe {
                    for z in &universe {
                        let f = [[w.clone(), x.clone()], [y.clone(), z.clone()]];
                        if ok(&f) {
                            out.push(f);
                        }
                    }
                }
            }
        }
    } else {
        for x in &universe {
            for y in &universe {
                let f = [[x.clone(), y.clone()], [x.clone(), y.clone()]];
                if ok(&f) {
                    out.push(f);
                }
            }
        }
    }
    out
}

/// Whether a batch prefix can still be completed to follow the challenge
/// patterns and row limits of `notion`.
fn prefix_ok(notion: &NotionSpec, challenge_atoms: &[PropertyAtom], state: &GameState, q: &ChallengeBatchQuery) -> bool {
    if challenge_atoms.is_empty() && notion.options.challenge_rows.is_none() {
        return true;
    }
    let cr = q.challenge_rows();
    if cr.is_empty() {
        return true;
    }
    let prior = state.challenges.get(&1);
    if let Some(k) = notion.options.challenge_rows {
        if prior.map_or(0, |c| c.rows) + cr.len() as u64 > k as u64 {
            return false;
        }
    }
    let slot = (state.stage - 1) as usize;
    let first = prior.and_then(|c| c.first[slot].clone()).unwrap_or_else(|| props::four_of(q, cr[0]));
    let stage_one = prior.and_then(|c| c.first[0].clone());
    let view = ChallengeView { rows: &cr, first: &first, stage: state.stage, stage_one: stage_one.as_ref(), partial: true };
    challenge_atoms.iter().all(|&a| matches!(eval_complex(a, q, view), Ok(props::Verdict::Accept)))
}

struct Paired<'a> {
    notion: &'a NotionSpec,
    eval: Evaluator,
    rows: Vec<Four>,
    depth: usize,
    max_len: usize,
    ordered: bool,
    first_ordered: bool,
    challenge_atoms: Vec<PropertyAtom>,
    cases: &'a AtomicU64,
    limit: u64,
    /// Smallest top-level index that found a distinguishing query.
    found_at: &'a AtomicUsize,
}

#[derive(Clone)]
struct Node {
    /// Per instance selection: game state, protocols for b = 0 and 1, transcript digests.
    games: Vec<(GameState, [LeakyIdeal; 2], [u64; 2])>,
    /// Row indices of each batch so far; `None` marks a stage switch.
    path: Vec<Option<Vec<u16>>>,
}

impl Node {
    fn signature(&self) -> u64 {
        hash_of(&self.games)
    }
}

impl Paired<'_> {
    fn query(&self, idx: &[u16]) -> ChallengeBatchQuery {
        let rows: Vec<Four> = idx.iter().map(|&i| self.rows[i as usize].clone()).collect();
        ChallengeBatchQuery::from_rows(&rows).expect("non-empty")
    }

    /// Rejects prefixes no completion can repair: challenge patterns and row limits.
    fn prefix_ok(&self, node: &Node, idx: &[u16]) -> bool {
        prefix_ok(self.notion, &self.challenge_atoms, &node.games[0].0, &self.query(idx))
    }

    fn distinguishes(node: &Node) -> bool {
        let mut t0: Vec<u64> = node.games.iter().map(|g| g.2[0]).collect();
        let mut t1: Vec<u64> = node.games.iter().map(|g| g.2[1]).collect();
        t0.sort_unstable();
        t1.sort_unstable();
        t0 != t1
    }

    /// Plays a complete batch; `None` if rejected.
    fn play(&self, node: &Node, idx: &[u16]) -> Option<Node> {
        let q = self.query(idx);
        let mut games = Vec::with_capacity(node.games.len());
        for (sel, (state, protos, digests)) in node.games.iter().enumerate() {
            let acc = self.eval.evaluate(state, &q, 1, &mut |_| sel as u8).ok()?;
            let mut protos = protos.clone();
            let mut digests = *digests;
            for b in 0..2 {
                let obs = protos[b].process_batch(&acc.played(b));
                digests[b] = chain(digests[b], &obs);
            }
            games.push((acc.state, protos, digests));
        }
        let mut path = node.path.clone();
        path.push(Some(idx.to_vec()));
        Some(Node { games, path })
    }

    fn steps(&self, path: &[Option<Vec<u16>>]) -> Vec<Step> {
        path.iter()
            .map(|p| match p {
                Some(idx) => Step::batch(self.query(idx)),
                None => Step::SwitchStage,
            })
            .collect()
    }

    fn batches_played(node: &Node) -> usize {
        node.path.iter().filter(|p| p.is_some()).count()
    }

    fn stop(&self, top: usize) -> bool {
        self.found_at.load(Ordering::Relaxed) < top
    }

    /// Completes the current batch from the prefix `idx`, then recurses.
    /// A nonzero `exact` plays only batches of that length.
    fn rows(
        &self,
        node: &Node,
        idx: &mut Vec<u16>,
        top: usize,
        exact: usize,
        seen: &mut HashSet<u64>,
    ) -> Result<Option<Vec<Step>>, HarnessError> {
        if !idx.is_empty() && (exact == 0 || idx.len() == exact) {
            if self.stop(top) {
                return Ok(None);
            }
            let n = self.cases.fetch_add(1, Ordering::Relaxed) + 1;
            if n > self.limit {
                return Err(HarnessError::SpaceTooLarge { limit: self.limit });
            }
            if let Some(next) = self.play(node, idx) {
                if Self::distinguishes(&next) {
                    return Ok(Some(self.steps(&next.path)));
                }
                if Self::batches_played(&next) < self.depth {
                    if let Some(found) = self.batches(&next, top, seen)? {
                        return Ok(Some(found));
                    }
                }
            }
        }
        if idx.len() == self.max_len || (exact != 0 && idx.len() == exact) {
            return Ok(None);
        }
        let ordered = self.ordered || (self.first_ordered && node.path.is_empty());
        let start = if ordered { 0 } else { idx.last().copied().unwrap_or(0) as usize };
        for i in start..self.rows.len() {
            idx.push(i as u16);
            if self.prefix_ok(node, idx) {
                if let Some(found) = self.rows(node, idx, top, exact, seen)? {
                    return Ok(Some(found));
                }
            }
            idx.pop();
        }
        Ok(None)
    }

    /// Starts a new batch after `node`, optionally switching the stage first.
    fn batches(&self, node: &Node, top: usize, seen: &mut HashSet<u64>) -> Result<Option<Vec<Step>>, HarnessError> {
        if !seen.insert(node.signature()) {
            return Ok(None);
        }
        if let Some(found) = self.rows(node, &mut Vec::new(), top, 0, seen)? {
            return Ok(Some(found));
        }
        if self.notion.has_stages() && node.games[0].0.stage == 1 {
            let mut switched = node.clone();
            for g in &mut switched.games {
                g.0.stage = 2;
            }
            switched.path.push(None);
            if let Some(found) = self.rows(&switched, &mut Vec::new(), top, 0, seen)? {
                return Ok(Some(found));
            }
        }
        Ok(None)
    }
}

/// Oracle walking compliant queries row by row over both scenarios jointly.
fn paired(notion: &NotionSpec, leaks: &[LeakageFunction], bounds: &Bounds, exec: Exec) -> Result<Safety, HarnessError> {
    let challenge_atoms: Vec<PropertyAtom> =
        notion.atoms.iter().copied().filter(|a| a.kind() == AtomKind::Challenge).collect();
    let cases = AtomicU64::new(0);
    let found_at = AtomicUsize::new(usize::MAX);
    let mut ctx = Paired {
        notion,
        eval: Evaluator::new(notion.clone(), GameConfig::default()),
        rows: row_candidates(notion, bounds),
        depth: if history_free(notion, leaks) { 1 } else { bounds.max_batches },
        max_len: bounds.max_batch_len,
        ordered: !challenge_atoms.is_empty(),
        first_ordered: first_sensitive(leaks),
        challenge_atoms,
        cases: &cases,
        limit: bounds.max_cases,
        found_at: &found_at,
    };
    let selections = if notion.uses_instances() { 2 } else { 1 };
    let root = Node {
        games: (0..selections).map(|_| (GameState::default(), [leaky_ideal(leaks), leaky_ideal(leaks)], [0, 0])).collect(),
        path: Vec::new(),
    };
    // Fewest batches first, then shortest first batch; parallel over its first row.
    let max_depth = ctx.depth;
    for (depth, len) in (1..=max_depth).flat_map(|d| (1..=bounds.max_batch_len).map(move |l| (d, l))) {
        ctx.depth = depth;
        let ctx = &ctx;
        found_at.store(usize::MAX, Ordering::Relaxed);
        let results = run_indexed(ctx.rows.len(), exec, |top| {
            if ctx.stop(top) {
                return Ok(None);
            }
            let mut idx = vec![top as u16];
            if !ctx.prefix_ok(&root, &idx) {
                return Ok(None);
            }
            let out = ctx.rows(&root, &mut idx, top, len, &mut HashSet::new());
            if let Ok(Some(_)) = &out {
                found_at.fetch_min(top, Ordering::Relaxed);
            }
            out
        });
        for r in results {
            if let Some(steps) = r? {
                return Ok(Safety::Broken { steps, certain: false });
            }
        }
    }
    Ok(Safety::Safe { cases: cases.load(Ordering::Relaxed) })
}

// ---------------------------------------------------------------------------
// Random compliant queries

/// One sampled query sequence.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Steps as submitted, instance variants included.
    pub steps: Vec<Step>,
    /// The same batches with every challenge resolved to its drawn instance.
    pub realized: Vec<Step>,
}

/// Random walk over query sequences `notion` accepts, by rejection.
pub struct QuerySampler {
    notion: NotionSpec,
    eval: Evaluator,
    rows: Vec<Four>,
    trivial: Vec<usize>,
    challenge_atoms: Vec<PropertyAtom>,
    varying: Vec<props::Dim>,
    max_len: usize,
    max_batches: usize,
    pattern: Option<props::Pair>,
    pattern_rows: usize,
    reals: Vec<Real>,
}

const BATCH_TRIES: usize = 64;

impl QuerySampler {
    pub fn new(notion: &NotionSpec, bounds: &Bounds) -> Self {
        let rows = row_candidates(notion, bounds);
        let trivial = (0..rows.len())
            .filter(|&i| {
                let f = &rows[i];
                !f[0][0].is_empty() && f[0][0] == f[0][1] && f[0][0] == f[1][0] && f[0][0] == f[1][1]
            })
            .collect();
        let varying = notion
            .atoms
            .iter()
            .find_map(|a| match a {
                PropertyAtom::Equal(v) => Some(v.dims().to_vec()),
                _ => None,
            })
            .unwrap_or_else(|| vec![props::Dim::S, props::Dim::R, props::Dim::M]);
        let pattern = notion.atoms.iter().find_map(|a| match a {
            PropertyAtom::Fixed(p) | PropertyAtom::Mixed(p) => Some(*p),
            _ => None,
        });
        let pattern_rows = if notion.atoms.iter().any(|a| matches!(a, PropertyAtom::Mixed(_))) { 2 } else { 1 };
        QuerySampler {
            notion: notion.clone(),
            eval: Evaluator::new(notion.clone(), GameConfig::default()),
            rows,
            trivial,
            challenge_atoms: notion.atoms.iter().copied().filter(|a| a.kind() == AtomKind::Challenge).collect(),
            varying,
            max_len: bounds.max_batch_len,
            max_batches: bounds.max_batches,
            pattern,
            pattern_rows,
            reals: bounds.reals().into_iter().filter_map(|c| c.as_real().cloned()).collect(),
        }
    }

    /// Challenge rows laid out exactly as the fixed or mixed pattern asks,
    /// which blind draws almost never hit.
    fn pattern_block(&self, rng: &mut impl Rng) -> Option<Vec<Four>> {
        #[derive(Clone, PartialEq)]
        enum Value {
            User(UserId),
            Msg(Message),
        }
        let pair = self.pattern?;
        let (d1, d2, _) = pair.dims();
        let x = &self.reals[rng.gen_range(0..self.reals.len())];
        let y = &self.reals[rng.gen_range(0..self.reals.len())];
        let get = |r: &Real, d| match d {
            props::Dim::S => Value::User(r.sender),
            props::Dim::R => Value::User(r.receiver),
            props::Dim::M => Value::Msg(r.message.clone()),
        };
        let (v, w) = ([get(x, d1), get(y, d1)], [get(x, d2), get(y, d2)]);
        if v[0] == v[1] || w[0] == w[1] {
            return None;
        }
        let comm = |i: usize, j: usize| {
            let mut r = x.clone();
            for (d, val) in [(d1, &v[i]), (d2, &w[j])] {
                match (d, val) {
                    (props::Dim::S, Value::User(u)) => r.sender = *u,
                    (props::Dim::R, Value::User(u)) => r.receiver = *u,
                    (props::Dim::M, Value::Msg(m)) => r.message = m.clone(),
                    _ => unreachable!("dimension and value kinds agree"),
                }
            }
            Communication::Real(r)
        };
        let row = |k: usize| -> Four {
            [0, 1].map(|a| {
                let i = (a + k) % 2;
                [comm(i, i), comm(i, 1 - i)]
            })
        };
        Some((0..self.pattern_rows).map(row).collect())
    }

    fn random_rows(&self, rng: &mut impl Rng, state: &GameState, len: usize, seen: &[Four]) -> Option<ChallengeBatchQuery> {
        let mut rows: Vec<Four> = Vec::with_capacity(len);
        while rows.len() < len {
            let mut placed = false;
            for _ in 0..32 {
                let pick: Vec<Four> = match rng.gen_range(0..5) {
                    4 if self.pattern.is_some() => match self.pattern_block(rng) {
                        Some(block) => block,
                        None => continue,
                    },
                    0 if !self.trivial.is_empty() => {
                        vec![self.rows[self.trivial[rng.gen_range(0..self.trivial.len())]].clone()]
                    }
                    1 if !seen.is_empty() => {
                        let j = rng.gen_range(0..seen.len());
                        seen[j..(j + 2).min(seen.len())].to_vec()
                    }
                    _ => vec![self.rows[rng.gen_range(0..self.rows.len())].clone()],
                };
                let mut next = rows.clone();
                next.extend(pick);
                next.truncate(len);
                let q = ChallengeBatchQuery::from_rows(&next).ok()?;
                if prefix_ok(&self.notion, &self.challenge_atoms, state, &q) {
                    rows = next;
                    placed = true;
                    break;
                }
            }
            if !placed {
                return None;
            }
        }
        ChallengeBatchQuery::from_rows(&rows).ok()
    }

    /// Scenario 1 reuses scenario 0 with the varying dimensions taken from
    /// shuffled rows, which keeps per-batch activity counts intact.
    fn shuffled(&self, rng: &mut impl Rng, len: usize) -> Option<ChallengeBatchQuery> {
        use rand::seq::SliceRandom;
        let s0: Vec<Communication> = (0..len)
            .map(|_| {
                let f = &self.rows[rng.gen_range(0..self.rows.len())];
                f[0][0].clone()
            })
            .collect();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        let s1: Vec<Communication> = (0..len)
            .map(|j| match (&s0[j], &s0[order[j]]) {
                (Communication::Real(x), Communication::Real(y)) => {
                    let mut r = x.clone();
                    for d in &self.varying {
                        match d {
                            props::Dim::S => r.sender = y.sender,
                            props::Dim::R => r.receiver = y.receiver,
                            props::Dim::M => r.message = y.message.clone(),
                        }
                    }
                    Communication::Real(r)
                }
                (c, _) => c.clone(),
            })
            .collect();
        ChallengeBatchQuery::simple(Batch::new(s0).ok()?, Batch::new(s1).ok()?).ok()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Sample {
        let mut state = GameState::default();
        let mut steps = Vec::new();
        let mut realized = Vec::new();
        let mut seen: Vec<Four> = Vec::new();
        let batches = rng.gen_range(1..=self.max_batches.max(1));
        for k in 0..batches {
            if k > 0 && self.notion.has_stages() && state.stage == 1 && rng.gen_bool(0.5) {
                state.stage = 2;
                steps.push(Step::SwitchStage);
                realized.push(Step::SwitchStage);
            }
            let mut accepted = None;
            for _ in 0..BATCH_TRIES {
                let len = rng.gen_range(1..=self.max_len.max(1));
                let q = if !self.notion.uses_instances() && rng.gen_bool(0.5) {
                    self.shuffled(rng, len)
                } else {
                    self.random_rows(rng, &state, len, &seen)
                };
                let Some(q) = q else { continue };
                let mut draw = |_| rng.gen_range(0..2u8);
                if let Ok(acc) = self.eval.evaluate(&state, &q, 1, &mut draw) {
                    accepted = Some((q, acc));
                    break;
                }
            }
            let Some((q, acc)) = accepted else { break };
            seen.extend((0..q.len()).map(|j| props::four_of(&q, j)).filter(|f| f[0][0] != f[0][1] || f[0][0] != f[1][0]));
            let played = ChallengeBatchQuery::simple(acc.played(0), acc.played(1)).expect("same length");
            steps.push(Step::batch(q));
            realized.push(Step::batch(played));
            state = acc.state;
        }
        Sample { steps, realized }
    }
}

type Weigh<'a> = Box<dyn Fn(&ChallengeBatchQuery, usize) -> Option<u32> + 'a>;

/// Every two-row query over the twisted-pair values that `notion` accepts,
/// with Pr[bit = 1 | b] in eighths: two instance bits times a fair coin for
/// batches outside the table.
fn twisted_queries(notion: &NotionSpec, pair: props::Pair) -> Vec<(ChallengeBatchQuery, [u32; 2])> {
    use crate::protocols::{twisted_pair_protocol, TwistedPair};
    let bounds = Bounds { messages: vec![Message::from("a"), Message::from("b")], ..Bounds::default() };
    let rows = row_candidates(notion, &bounds);
    let eval = Evaluator::new(notion.clone(), GameConfig::default());
    let proto: TwistedPair = twisted_pair_protocol(pair, 0);
    let weight: Weigh<'_> = Box::new(move |q, b| {
        let mut total = 0;
        for mask in 0..4u8 {
            let acc = eval.evaluate(&GameState::default(), q, 1, &mut |psi| (mask >> (psi - 1)) & 1).ok()?;
            total += match proto.table_bit(&acc.played(b)) {
                Some(1) => 2,
                Some(_) => 0,
                None => 1,
            };
        }
        Some(total)
    });
    let mut out = Vec::new();
    for tags in [[1u32, 2], [1, 1]] {
        for r0 in &rows {
            for r1 in &rows {
                let tagged: Vec<Four> = [r0, r1]
                    .iter()
                    .zip(tags)
                    .map(|(f, psi)| (**f).clone().map(|pair| pair.map(|c| c.with_challenge(Some(psi)))))
                    .collect();
                let q = ChallengeBatchQuery::from_rows(&tagged).expect("two rows");
                if let (Some(w0), Some(w1)) = (weight(&q, 0), weight(&q, 1)) {
                    out.push((q, [w0, w1]));
                }
            }
        }
    }
    out
}

/// Exact check of the twisted pair against every accepted two-row query:
/// the output bit distribution must not depend on b.
pub fn twisted_pair_safe(notion: &NotionSpec, pair: props::Pair) -> bool {
    twisted_queries(notion, pair).iter().all(|(_, [w0, w1])| w0 == w1)
}

/// A one-batch attack on which the twisted pair answers deterministically
/// and differently for the two challenge bits.
pub fn twisted_pair_attack(notion: &NotionSpec, pair: props::Pair) -> Option<AttackScript> {
    let (q, [w0, _]) = twisted_queries(notion, pair).into_iter().find(|(_, [w0, w1])| w0 % 8 == 0 && w0 + w1 == 8)?;
    let zero = Observation::Bit { bit: Some(u8::from(w0 == 8)) };
    Some(AttackScript {
        notion: notion.name.clone(),
        steps: vec![Step::batch(q)],
        guess: adversaries::GuessRule::ZeroIfSeen { transcripts: vec![vec![zero]] },
    })
}

/// Observations per trial index, for determinism checks.
pub fn transcripts(
    notion: &NotionSpec,
    protocol: &ProtocolSpec,
    script: &AttackScript,
    trials: u64,
    seed: u64,
    exec: Exec,
) -> Vec<(u8, u8, String)> {
    run_indexed(trials as usize, exec, |t| {
        let bit = (trial_seed(seed, 0, t as u64, 3) & 1) as u8;
        let proto: Box<dyn Protocol> = protocol.build(trial_seed(seed, bit, t as u64, 1)).expect("valid protocol");
        let mut ch = Challenger::with_bit(notion.clone(), proto, trial_seed(seed, bit, t as u64, 0), bit, GameConfig::default());
        let run = run_script(script, &mut ch, trial_seed(seed, bit, t as u64, 2));
        (bit, run.guess, ch.log_jsonl())
    })
}

/// Number of distinct values per key, used by tests of the oracle itself.
pub fn group_count<K: Ord, V: Ord>(pairs: impl IntoIterator<Item = (K, V)>) -> BTreeMap<K, usize> {
    let mut m: BTreeMap<K, std::collections::BTreeSet<V>> = BTreeMap::new();
    for (k, v) in pairs {
        m.entry(k).or_default().insert(v);
    }
    m.into_iter().map(|(k, v)| (k, v.len())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notions;
    use LeakageFunction::*;

    fn safe(notion: &str, leaks: &[LeakageFunction]) -> bool {
        exhaustive_safety(&notions::parse(notion).unwrap(), leaks, &Bounds::default()).unwrap().is_safe()
    }

    #[test]
    fn half_width_closed_form() {
        let h = hoeffding_half_width(1000, 0.01);
        assert!((h - ((200f64).ln() / 2000.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        assert!(safe("SM!L", &[Frequencies(props::Side::Sender)]));
        assert!(!safe("SM!L", &[Partition(props::Side::Sender)]));
        assert!(!safe("C!O", &[CommCount]));
        assert!(safe("C!O", &[]));
    }

    #[test]
    fn twisted_pair_needs_one_row_per_challenge() {
        let p = |n: &str| notions::parse(n).unwrap();
        // a repeated row inside one challenge shares the instance bit and is answered by the table
        assert!(!twisted_pair_safe(&p("(SM)!O"), props::Pair::SM));
        assert!(twisted_pair_safe(&p("(SM)!O+CR_1"), props::Pair::SM));
        assert!(twisted_pair_safe(&p("(SR)!O+CR_1"), props::Pair::SR));
        assert!(!twisted_pair_safe(&p("(SM)!L"), props::Pair::SM));
        assert!(twisted_pair_attack(&p("(SM)!L"), props::Pair::SM).is_some());
    }

    #[test]
    fn oracle_modes_agree() {
        let n = notions::parse("S!O").unwrap();
        let b = Bounds { max_batch_len: 2, ..Bounds::default() };
        let seq = exhaustive_safety_with(&n, &[UserCount(props::Side::Receiver)], &b, Exec::Sequential).unwrap();
        let par = exhaustive_safety_with(&n, &[UserCount(props::Side::Receiver)], &b, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn estimation_is_mode_independent() {
        let n = notions::parse("C!O").unwrap();
        let script = adversaries::random_guesser(&n);
        let spec = ProtocolSpec::leaky(&[]);
        let a = estimate_advantage(&n, &spec, &script, 200, 7, GameConfig::default(), Exec::Sequential).unwrap();
        let b = estimate_advantage(&n, &spec, &script, 200, 7, GameConfig::default(), Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }
}
