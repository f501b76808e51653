//! Attack scripts, the observation-equality distinguisher and attack translations.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::challenger::{Challenger, GameConfig, Party, Response};
use crate::model::{Batch, ChallengeBatchQuery, Communication, ModelError, UserId};
use crate::notions::{self, NotionSpec, ParseError};
use crate::props::{AtomKind, PropertyAtom};
use crate::protocols::{Observation, ProtocolError, ProtocolSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttackError {
    #[error("scenarios yield overlapping observations")]
    NotDistinguishing,
    #[error("attack is not valid: {0}")]
    Invalid(String),
    #[error("translation does not apply: {0}")]
    TranslationInapplicable(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum Step {
    Batch {
        query: ChallengeBatchQuery,
        #[serde(default = "one")]
        psi: u32,
    },
    Corrupt {
        party: Party,
    },
    Protocol {
        payload: String,
    },
    SwitchStage,
}

impl Step {
    pub fn batch(query: ChallengeBatchQuery) -> Step {
        Step::Batch { query, psi: 1 }
    }
}

/// How the adversary turns its transcript into a guess.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GuessRule {
    /// Guess 0 iff the whole transcript equals one of these.
    ZeroIfSeen { transcripts: Vec<Vec<Observation>> },
    Uniform,
    Constant { bit: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScript {
    pub notion: String,
    pub steps: Vec<Step>,
    pub guess: GuessRule,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub guess: u8,
    pub transcript: Vec<Observation>,
    pub aborted: bool,
}

/// Plays the script against a challenger.
pub fn run_script(script: &AttackScript, challenger: &mut Challenger, adversary_seed: u64) -> RunOutcome {
    let mut transcript = Vec::with_capacity(script.steps.len());
    let mut aborted = false;
    for step in &script.steps {
        let response = match step {
            Step::Batch { query, psi } => challenger.batch_query(query, *psi),
            Step::Corrupt { party } => challenger.corrupt_query(*party),
            Step::Protocol { payload } => challenger.protocol_query(payload),
            Step::SwitchStage => challenger.switch_stage(),
        };
        aborted |= matches!(response, Response::Abort { .. });
        transcript.push(response.observation());
        if aborted {
            break;
        }
    }
    let guess = match &script.guess {
        GuessRule::ZeroIfSeen { transcripts } => u8::from(!transcripts.contains(&transcript)),
        GuessRule::Uniform => ChaCha20Rng::seed_from_u64(adversary_seed).gen_range(0..2),
        GuessRule::Constant { bit } => *bit & 1,
    };
    RunOutcome { guess, transcript, aborted }
}

/// Adversary that submits nothing and guesses uniformly.
pub fn random_guesser(notion: &NotionSpec) -> AttackScript {
    AttackScript { notion: notion.name.clone(), steps: Vec::new(), guess: GuessRule::Uniform }
}

/// Challenge numbers a script refers to.
fn challenges_used(steps: &[Step]) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for s in steps {
        if let Step::Batch { query, psi } = s {
            out.insert(*psi);
            out.extend((0..query.len()).filter_map(|j| query.row_challenge(j)));
        }
    }
    out
}

/// Transcripts of `steps` for challenge bit `b` under every instance selection.
pub fn simulate(
    notion: &NotionSpec,
    protocol: &ProtocolSpec,
    steps: &[Step],
    config: GameConfig,
    b: u8,
) -> Result<BTreeSet<Vec<Observation>>, AttackError> {
    let used = challenges_used(steps);
    let top = used.iter().max().copied().unwrap_or(1).min(16);
    let masks: u64 = if notion.uses_instances() { 1 << top } else { 1 };
    let probe = AttackScript { notion: notion.name.clone(), steps: steps.to_vec(), guess: GuessRule::Constant { bit: 0 } };
    let mut out = BTreeSet::new();
    for mask in 0..masks {
        let mut ch = Challenger::with_bit(notion.clone(), protocol.build(0)?, 0, b, config);
        ch.force_instances(mask);
        let run = run_script(&probe, &mut ch, 0);
        if run.aborted {
            return Err(AttackError::Invalid(format!("{:?}", run.transcript.last())));
        }
        out.insert(run.transcript);
    }
    Ok(out)
}

/// Advantage of `script` against a deterministic protocol, averaged over
/// every instance selection rather than sampled.
pub fn exact_advantage(
    notion: &NotionSpec,
    protocol: &ProtocolSpec,
    script: &AttackScript,
    config: GameConfig,
) -> Result<f64, AttackError> {
    if script.guess == GuessRule::Uniform {
        return Ok(0.0);
    }
    let top = challenges_used(&script.steps).iter().max().copied().unwrap_or(1).min(16);
    let masks: u64 = if notion.uses_instances() { 1 << top } else { 1 };
    let mut p = [0.0; 2];
    for (b, pb) in p.iter_mut().enumerate() {
        let mut zeros = 0u64;
        for mask in 0..masks {
            let mut ch = Challenger::with_bit(notion.clone(), protocol.build(0)?, 0, b as u8, config);
            ch.force_instances(mask);
            let run = run_script(script, &mut ch, 0);
            if run.aborted {
                return Err(AttackError::Invalid(format!("{:?}", run.transcript.last())));
            }
            zeros += u64::from(run.guess == 0);
        }
        *pb = zeros as f64 / masks as f64;
    }
    Ok((p[0] - p[1]).abs())
}

/// Builds the script that guesses 0 exactly on scenario-0 transcripts.
pub fn observable_distinguisher(
    notion: &NotionSpec,
    protocol: &ProtocolSpec,
    steps: Vec<Step>,
    config: GameConfig,
) -> Result<AttackScript, AttackError> {
    let zero = simulate(notion, protocol, &steps, config, 0)?;
    let one = simulate(notion, protocol, &steps, config, 1)?;
    if !zero.is_disjoint(&one) {
        return Err(AttackError::NotDistinguishing);
    }
    Ok(AttackScript {
        notion: notion.name.clone(),
        steps,
        guess: GuessRule::ZeroIfSeen { transcripts: zero.into_iter().collect() },
    })
}

// ---------------------------------------------------------------------------
// Translations

/// Rewrites of attacks along implication edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Translation {
    /// Fixes the instance; with `cross`, scenario 1 takes the other instance.
    InstanceFix { cross: bool },
    /// Fixes the instance and swaps the two rows of every paired challenge in scenario 1.
    RowDuplicate,
    /// Splits each batch into a scenario-0-only and a scenario-1-only batch.
    BatchSplit,
    /// Replaces the first challenge sender in scenario 1 with an unused sender.
    SenderReplace,
    /// Assigns at most `per_challenge` challenge rows to each challenge number.
    ChallengeRenumber { per_challenge: u32 },
}

fn empty_like(b: &Batch) -> Batch {
    Batch::new(vec![Communication::Empty; b.len()]).expect("non-empty")
}

fn map_batches(
    script: &AttackScript,
    notion: String,
    mut f: impl FnMut(&ChallengeBatchQuery, u32) -> Result<Vec<Step>, AttackError>,
) -> Result<AttackScript, AttackError> {
    let mut steps = Vec::new();
    for s in &script.steps {
        match s {
            Step::Batch { query, psi } => steps.extend(f(query, *psi)?),
            other => steps.push(other.clone()),
        }
    }
    Ok(AttackScript { notion, steps, guess: script.guess.clone() })
}

fn fix_instance(q: &ChallengeBatchQuery, a: usize, cross: bool, swap_pairs: bool) -> Result<ChallengeBatchQuery, AttackError> {
    let s0 = q.batch(a, 0).clone();
    let mut s1 = q.batch(if cross { 1 - a } else { a }, 1).clone().into_rows();
    if swap_pairs {
        let cr = q.challenge_rows();
        for pair in cr.chunks(2) {
            if let [j, k] = pair {
                s1.swap(*j, *k);
            }
        }
    }
    Ok(ChallengeBatchQuery::simple(s0, Batch::new(s1)?)?)
}

fn lowest_unused(used: &BTreeSet<UserId>) -> UserId {
    (0..).find(|u| !used.contains(u)).expect("finite set")
}

/// Translates an attack on the source notion of an implication edge into
/// attacks on its target.
pub fn translate(translation: Translation, script: &AttackScript, target: &str) -> Result<Vec<AttackScript>, AttackError> {
    let source = notions::parse(&script.notion)?;
    let target = target.to_string();
    match translation {
        Translation::InstanceFix { cross } => (0..2)
            .map(|a| map_batches(script, target.clone(), |q, psi| Ok(vec![Step::Batch { query: fix_instance(q, a, cross, false)?, psi }])))
            .collect(),
        Translation::RowDuplicate => (0..2)
            .map(|a| map_batches(script, target.clone(), |q, psi| Ok(vec![Step::Batch { query: fix_instance(q, a, false, true)?, psi }])))
            .collect(),
        Translation::BatchSplit => {
            if source.uses_instances() {
                return Err(AttackError::TranslationInapplicable("source notion draws instances".into()));
            }
            let out = map_batches(script, target, |q, psi| {
                let (s0, s1) = (q.batch(0, 0).clone(), q.batch(0, 1).clone());
                Ok(vec![
                    Step::Batch { query: ChallengeBatchQuery::simple(s0.clone(), empty_like(&s0))?, psi },
                    Step::Batch { query: ChallengeBatchQuery::simple(empty_like(&s1), s1)?, psi },
                ])
            })?;
            Ok(vec![out])
        }
        Translation::SenderReplace => {
            if source.uses_instances() {
                return Err(AttackError::TranslationInapplicable("source notion draws instances".into()));
            }
            let mut used = BTreeSet::new();
            for s in &script.steps {
                if let Step::Batch { query, .. } = s {
                    for b in 0..2 {
                        used.extend(query.batch(0, b).rows().iter().filter_map(Communication::sender));
                    }
                }
            }
            let fresh = lowest_unused(&used);
            let mut first: BTreeMap<u32, UserId> = BTreeMap::new();
            let out = map_batches(script, target, |q, psi| {
                let q = q.collapsed();
                for &j in &q.challenge_rows() {
                    let p = q.row_challenge(j).unwrap_or(psi);
                    if let Some(u) = q.batch(0, 0).rows()[j].sender() {
                        first.entry(p).or_insert(u);
                    }
                }
                let replaced: BTreeSet<UserId> = first.values().copied().collect();
                let s1 = q.batch(0, 1).map(|c| match c {
                    Communication::Real(r) if replaced.contains(&r.sender) => {
                        let mut r = r.clone();
                        r.sender = fresh;
                        Communication::Real(r)
                    }
                    other => other.clone(),
                });
                Ok(vec![Step::Batch { query: ChallengeBatchQuery::simple(q.batch(0, 0).clone(), s1)?, psi }])
            })?;
            Ok(vec![out])
        }
        Translation::ChallengeRenumber { per_challenge } => {
            if per_challenge == 0 {
                return Err(AttackError::TranslationInapplicable("zero rows per challenge".into()));
            }
            let pairs = source.atoms.iter().any(|a| matches!(a, PropertyAtom::Mixed(_)));
            if pairs && per_challenge % 2 == 1 {
                return Err(AttackError::TranslationInapplicable("paired rows would be split".into()));
            }
            let staged = source.has_stages();
            let mut counter = 0u32;
            let uses_instances = source.uses_instances();
            let mut out = map_batches(script, target, |q, _psi| {
                let norm = if uses_instances { q.stripped() } else { q.stripped().collapsed() };
                let cr = norm.challenge_rows();
                let mut tagged = norm.clone();
                for &j in &cr {
                    let tag = 1 + counter / per_challenge;
                    counter += 1;
                    tagged = tagged.map(|_, _, b| {
                        let mut rows = b.clone().into_rows();
                        rows[j] = rows[j].with_challenge(Some(tag));
                        Batch::new(rows).expect("non-empty")
                    })?;
                }
                Ok(vec![Step::Batch { query: tagged, psi: 1 }])
            })?;
            if staged && counter > per_challenge {
                return Err(AttackError::TranslationInapplicable("staged challenges would be split".into()));
            }
            let mut spec = notions::parse(&out.notion)?;
            let mut opts = spec.options.clone();
            opts.challenge_rows = Some(per_challenge);
            spec = spec.with_options(opts);
            out.notion = spec.name;
            let _ = AtomKind::Option;
            Ok(vec![out])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocols::LeakageFunction;

    fn c(s: u32, r: u32, m: &str) -> Communication {
        Communication::real(s, r, m)
    }

    fn simple(r0: Vec<Communication>, r1: Vec<Communication>) -> ChallengeBatchQuery {
        ChallengeBatchQuery::simple(Batch::new(r0).unwrap(), Batch::new(r1).unwrap()).unwrap()
    }

    #[test]
    fn comm_count_distinguishes_empty() {
        let notion = notions::parse("C!O").unwrap();
        let spec = ProtocolSpec::leaky(&[LeakageFunction::CommCount]);
        let steps = vec![Step::batch(simple(vec![c(0, 0, "a")], vec![Communication::Empty]))];
        let script = observable_distinguisher(&notion, &spec, steps, GameConfig::default()).unwrap();
        for b in 0..2 {
            let mut ch = Challenger::with_bit(notion.clone(), spec.build(0).unwrap(), 1, b, GameConfig::default());
            assert_eq!(run_script(&script, &mut ch, 0).guess, b);
        }
    }

    #[test]
    fn no_leak_does_not_distinguish() {
        let notion = notions::parse("C!O").unwrap();
        let steps = vec![Step::batch(simple(vec![c(0, 0, "a")], vec![Communication::Empty]))];
        assert_eq!(
            observable_distinguisher(&notion, &ProtocolSpec::leaky(&[]), steps, GameConfig::default()),
            Err(AttackError::NotDistinguishing)
        );
    }

    #[test]
    fn batch_split_is_valid_for_target() {
        let script = AttackScript {
            notion: "C!O".into(),
            steps: vec![Step::batch(simple(vec![c(0, 0, "a"), c(1, 1, "b")], vec![Communication::Empty, c(1, 1, "b")]))],
            guess: GuessRule::Constant { bit: 0 },
        };
        let out = translate(Translation::BatchSplit, &script, "LS!O").unwrap();
        assert_eq!(out[0].steps.len(), 2);
        let target = notions::parse("LS!O").unwrap();
        for s in &out[0].steps {
            let Step::Batch { query, .. } = s else { panic!() };
            assert!(notions::validate_query(&target, query).is_accept());
        }
    }

    #[test]
    fn renumber_tags_rows() {
        let script = AttackScript {
            notion: "S!O".into(),
            steps: vec![Step::batch(simple(vec![c(0, 0, "a"), c(0, 1, "a")], vec![c(1, 0, "a"), c(1, 1, "a")]))],
            guess: GuessRule::Constant { bit: 0 },
        };
        let out = translate(Translation::ChallengeRenumber { per_challenge: 1 }, &script, "S!O").unwrap();
        assert_eq!(out[0].notion, "S!O+CR_1");
        let Step::Batch { query, .. } = &out[0].steps[0] else { panic!() };
        assert_eq!(query.row_challenge(0), Some(1));
        assert_eq!(query.row_challenge(1), Some(2));
    }
}
