//! The challenger of the indistinguishability game.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Batch, ChallengeBatchQuery, Communication, UserId};
use crate::notions::NotionSpec;
use crate::props::{
    self, eval_activity, eval_complex, eval_simple, four_of, AtomKind, BatchLinking, ChallengeView,
    CorruptBehavior, CorruptionMode, Four, Histories, PropertyAtom, Side, Verdict,
};
use crate::protocols::{Observation, Protocol};

/// A corruptible user: its side and its id within that side's namespace.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Party {
    pub side: Side,
    pub id: UserId,
}

/// Game parameters: number of challenges `n` and total challenge-row budget `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameConfig {
    pub challenges: u32,
    pub budget: u64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig { challenges: 8, budget: 64 }
    }
}

/// Session label that challenge rows of challenge `psi` must carry in `stage`.
pub fn session_token(stage: u8, psi: u32) -> String {
    format!("stage{stage}-challenge{psi}")
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChallengeState {
    pub instance: u8,
    pub rows: u64,
    /// First challenge row per stage.
    pub first: [Option<Four>; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GameState {
    pub stage: u8,
    pub total_rows: u64,
    pub challenges: BTreeMap<u32, ChallengeState>,
    pub histories: Histories,
    pub corrupted: BTreeSet<Party>,
    pub batches: u64,
}

impl Default for GameState {
    fn default() -> Self {
        GameState {
            stage: 1,
            total_rows: 0,
            challenges: BTreeMap::new(),
            histories: Default::default(),
            corrupted: BTreeSet::new(),
            batches: 0,
        }
    }
}

/// An accepted batch query, ready to be played.
#[derive(Clone, Debug)]
pub struct Accepted {
    pub state: GameState,
    /// Query with challenge numbers removed (and collapsed for single-instance notions).
    pub query: ChallengeBatchQuery,
    /// Challenge of each challenge row; `None` for rows equal in all four batches.
    pub row_challenge: Vec<Option<u32>>,
}

impl Accepted {
    /// The batch the protocol receives for scenario `b`.
    pub fn played(&self, b: usize) -> Batch {
        let rows = (0..self.query.len())
            .map(|j| {
                let a = self.row_challenge[j].map_or(0, |psi| self.state.challenges[&psi].instance as usize);
                self.query.batch(a, b).rows()[j].clone()
            })
            .collect();
        Batch::new(rows).expect("non-empty")
    }
}

/// Validity checks for one notion, independent of randomness.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub notion: NotionSpec,
    pub config: GameConfig,
}

fn reject_err(atom: PropertyAtom, e: props::PropError) -> Verdict {
    Verdict::reject(atom, e.to_string())
}

impl Evaluator {
    pub fn new(notion: NotionSpec, config: GameConfig) -> Self {
        Evaluator { notion, config }
    }

    /// Verdict for a query in a fresh game.
    pub fn check_fresh(&self, q: &ChallengeBatchQuery) -> Verdict {
        match self.evaluate(&GameState::default(), q, 1, &mut |_| 0) {
            Ok(_) => Verdict::Accept,
            Err(v) => v,
        }
    }

    /// Validates a batch query; `draw` supplies the instance of each new challenge.
    pub fn evaluate(
        &self,
        state: &GameState,
        raw: &ChallengeBatchQuery,
        psi: u32,
        draw: &mut dyn FnMut(u32) -> u8,
    ) -> Result<Accepted, Verdict> {
        let n = self.config.challenges;
        let in_range = |p: u32| (1..=n).contains(&p);
        if !in_range(psi) {
            return Err(Verdict::reject("CHALLENGE", format!("challenge number {psi} outside 1..={n}")));
        }
        let mut tags = Vec::with_capacity(raw.len());
        for j in 0..raw.len() {
            let r = raw.row(j);
            let found: BTreeSet<u32> =
                [r[0][0], r[0][1], r[1][0], r[1][1]].iter().filter_map(|c| c.challenge()).collect();
            if found.len() > 1 {
                return Err(Verdict::reject("CHALLENGE", format!("row {j} carries conflicting challenge numbers")));
            }
            let p = found.into_iter().next().unwrap_or(psi);
            if !in_range(p) {
                return Err(Verdict::reject("CHALLENGE", format!("challenge number {p} outside 1..={n}")));
            }
            tags.push(p);
        }

        let uses_instances = self.notion.uses_instances();
        let q = if uses_instances { raw.stripped() } else { raw.stripped().collapsed() };
        let cr = q.challenge_rows();
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for &j in &cr {
            groups.entry(tags[j]).or_default().push(j);
        }

        let mut next = state.clone();
        next.total_rows += cr.len() as u64;
        if next.total_rows > self.config.budget {
            return Err(Verdict::reject(
                "BUDGET",
                format!("{} challenge rows exceed the budget of {}", next.total_rows, self.config.budget),
            ));
        }
        for (&p, rows) in &groups {
            let used = state.challenges.get(&p).map_or(0, |c| c.rows) + rows.len() as u64;
            if let Some(k) = self.notion.options.challenge_rows {
                if used > k as u64 {
                    return Err(Verdict::reject(
                        PropertyAtom::ChallengeRows(k),
                        format!("challenge {p} has {used} challenge rows"),
                    ));
                }
            }
        }

        // existence checks first, so a stray ◇ is reported as such
        let existence = |a: &PropertyAtom| matches!(a, PropertyAtom::Something | PropertyAtom::EmptyOrEqual);
        let local = self.notion.atoms.iter().filter(|a| a.kind() == AtomKind::RowLocal);
        for &atom in local.clone().filter(|a| existence(a)).chain(local.filter(|a| !existence(a))) {
            match eval_simple(atom, &q) {
                Ok(Verdict::Accept) => {}
                Ok(v) => return Err(v),
                Err(e) => return Err(reject_err(atom, e)),
            }
        }

        let stage = state.stage;
        let slot = (stage - 1) as usize;
        for (&p, rows) in &groups {
            let ch = next.challenges.entry(p).or_insert_with(|| ChallengeState {
                instance: if uses_instances { draw(p) & 1 } else { 0 },
                rows: 0,
                first: [None, None],
            });
            ch.rows += rows.len() as u64;
            let first = ch.first[slot].clone().unwrap_or_else(|| four_of(&q, rows[0]));
            let stage_one = ch.first[0].clone();
            let view = ChallengeView { rows, first: &first, stage, stage_one: stage_one.as_ref(), partial: false };
            for &atom in self.notion.atoms.iter().filter(|a| a.kind() == AtomKind::Challenge) {
                match eval_complex(atom, &q, view) {
                    Ok(Verdict::Accept) => {}
                    Ok(v) => return Err(v),
                    Err(e) => return Err(reject_err(atom, e)),
                }
            }
            if self.notion.options.session {
                self.check_session(&q, rows, &first, stage, p)?;
            }
            if ch.first[slot].is_none() {
                ch.first[slot] = Some(first);
            }
        }
        // Challenge atoms also apply to later batches of a challenge with no new challenge rows.
        for &atom in self.notion.atoms.iter().filter(|a| matches!(a, PropertyAtom::NoSend(_))) {
            for (&p, ch) in &state.challenges {
                if groups.contains_key(&p) {
                    continue;
                }
                if let Some(first) = &ch.first[0] {
                    let view = ChallengeView { rows: &[], first, stage, stage_one: None, partial: false };
                    match eval_complex(atom, &q, view) {
                        Ok(Verdict::Accept) => {}
                        Ok(v) => return Err(v),
                        Err(e) => return Err(reject_err(atom, e)),
                    }
                }
            }
        }

        for b in 0..2 {
            let zero = BatchLinking::of(q.batch(0, b));
            let one = if uses_instances { BatchLinking::of(q.batch(1, b)) } else { zero.clone() };
            next.histories[0][b].push(zero);
            next.histories[1][b].push(one);
        }
        for &atom in self.notion.atoms.iter().filter(|a| a.kind() == AtomKind::Activity) {
            match eval_activity(atom, &next.histories) {
                Ok(Verdict::Accept) => {}
                Ok(v) => return Err(v),
                Err(e) => return Err(reject_err(atom, e)),
            }
        }

        if let Some(behavior) = self.notion.options.behavior {
            self.check_behavior(&q, &state.corrupted, behavior)?;
        }

        next.batches += 1;
        let row_challenge = (0..q.len()).map(|j| if cr.contains(&j) { Some(tags[j]) } else { None }).collect();
        Ok(Accepted { state: next, query: q, row_challenge })
    }

    fn check_session(&self, q: &ChallengeBatchQuery, rows: &[usize], first: &Four, stage: u8, psi: u32) -> Result<(), Verdict> {
        let token = session_token(stage, psi);
        for &j in rows {
            let r = q.row(j);
            for a in 0..2 {
                for b in 0..2 {
                    let c = r[a][b];
                    let f = &first[a][b];
                    let same_users = c.sender() == f.sender() && c.receiver() == f.receiver();
                    if c.session() != Some(token.as_str()) || !same_users {
                        return Err(Verdict::reject(
                            PropertyAtom::Session,
                            format!("row {j} does not carry session {token} for its first users"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_behavior(
        &self,
        q: &ChallengeBatchQuery,
        corrupted: &BTreeSet<Party>,
        behavior: CorruptBehavior,
    ) -> Result<(), Verdict> {
        let atom = PropertyAtom::Behavior(behavior);
        let user = |c: &Communication, side: Side| match side {
            Side::Sender => c.sender(),
            Side::Receiver => c.receiver(),
        };
        for party in corrupted {
            for j in 0..q.len() {
                let r = q.row(j);
                for a in 0..2 {
                    let (c0, c1) = (r[a][0], r[a][1]);
                    let hit0 = user(c0, party.side) == Some(party.id);
                    let hit1 = user(c1, party.side) == Some(party.id);
                    let bad = match behavior {
                        CorruptBehavior::NoComm => hit0 || hit1,
                        CorruptBehavior::NoSend => party.side == Side::Sender && (hit0 || hit1),
                        CorruptBehavior::NoReceive => party.side == Side::Receiver && (hit0 || hit1),
                        CorruptBehavior::Equal => (hit0 || hit1) && !(hit0 && hit1 && c0.message() == c1.message()),
                    };
                    if bad {
                        return Err(Verdict::reject(atom, format!("row {j} involves corrupted {party:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Verdict for a corrupt query.
    pub fn check_corrupt(&self, state: &GameState, party: Party) -> Verdict {
        match self.notion.options.corruption {
            Some(CorruptionMode::Forbidden) => {
                Verdict::reject(PropertyAtom::Corruption(CorruptionMode::Forbidden), "corruption is not allowed")
            }
            Some(CorruptionMode::Static) if state.batches > 0 && !state.corrupted.contains(&party) => Verdict::reject(
                PropertyAtom::Corruption(CorruptionMode::Static),
                "new corruption after the first batch query",
            ),
            _ => Verdict::Accept,
        }
    }
}

/// Answer of the challenger to one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "response", rename_all = "snake_case")]
pub enum Response {
    Observed { observation: Observation },
    Ack,
    Abort { reason: String },
}

impl Response {
    /// The observation the adversary records for this response.
    pub fn observation(&self) -> Observation {
        match self {
            Response::Observed { observation } => observation.clone(),
            Response::Ack => Observation::Ack,
            Response::Abort { reason } => Observation::Abort { reason: reason.clone() },
        }
    }

    pub fn is_abort(&self) -> bool {
        matches!(self, Response::Abort { .. })
    }
}

/// One line of the transcript log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: String,
    pub verdict: String,
    pub observation: Option<String>,
}

/// SHA-256 of the canonical JSON encoding.
pub fn digest<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

pub struct Challenger {
    eval: Evaluator,
    protocol: Box<dyn Protocol>,
    state: GameState,
    bit: u8,
    rng: ChaCha20Rng,
    forced_instances: Option<u64>,
    aborted: Option<String>,
    switched: bool,
    sessions: BTreeMap<String, String>,
    log: Vec<LogEntry>,
}

impl Challenger {
    /// New game with the challenge bit drawn from `seed`.
    pub fn new_game(notion: NotionSpec, protocol: Box<dyn Protocol>, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let bit = rng.gen_range(0..2u8);
        Self::build(notion, protocol, rng, bit, GameConfig::default())
    }

    /// New game with a fixed challenge bit.
    pub fn with_bit(notion: NotionSpec, protocol: Box<dyn Protocol>, seed: u64, bit: u8, config: GameConfig) -> Self {
        Self::build(notion, protocol, ChaCha20Rng::seed_from_u64(seed), bit & 1, config)
    }

    fn build(notion: NotionSpec, protocol: Box<dyn Protocol>, rng: ChaCha20Rng, bit: u8, config: GameConfig) -> Self {
        Challenger {
            eval: Evaluator::new(notion, config),
            protocol,
            state: GameState::default(),
            bit,
            rng,
            forced_instances: None,
            aborted: None,
            switched: false,
            sessions: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    /// Fixes instances: challenge `psi` gets bit `psi - 1` of `mask`.
    pub fn force_instances(&mut self, mask: u64) {
        self.forced_instances = Some(mask);
    }

    pub fn bit(&self) -> u8 {
        self.bit
    }

    pub fn notion(&self) -> &NotionSpec {
        &self.eval.notion
    }

    pub fn state(&self) -> &GameState {
        &self.state
    }

    pub fn is_aborted(&self) -> bool {
        self.aborted.is_some()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// Transcript log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }

    fn record<P: Serialize>(&mut self, kind: &str, payload: &P, response: &Response) {
        let (verdict, observation) = match response {
            Response::Observed { observation } => ("accept".to_string(), Some(digest(observation))),
            Response::Ack => ("accept".to_string(), None),
            Response::Abort { reason } => (format!("abort: {reason}"), None),
        };
        self.log.push(LogEntry { kind: kind.into(), payload: digest(payload), verdict, observation });
    }

    fn abort(&mut self, reason: String) -> Response {
        self.aborted = Some(reason.clone());
        Response::Abort { reason }
    }

    fn absorbing(&self) -> Option<Response> {
        self.aborted.as_ref().map(|r| Response::Abort { reason: format!("game already aborted: {r}") })
    }

    fn verdict_reason(v: &Verdict) -> String {
        match v {
            Verdict::Accept => String::new(),
            Verdict::Reject { atom, reason } => format!("{atom}: {reason}"),
        }
    }

    pub fn batch_query(&mut self, q: &ChallengeBatchQuery, psi: u32) -> Response {
        let response = self.batch_inner(q, psi);
        self.record("batch", &(q, psi), &response);
        response
    }

    fn batch_inner(&mut self, q: &ChallengeBatchQuery, psi: u32) -> Response {
        if let Some(r) = self.absorbing() {
            return r;
        }
        let forced = self.forced_instances;
        let rng = &mut self.rng;
        let mut draw = |p: u32| match forced {
            Some(mask) => ((mask >> (p.saturating_sub(1) % 64)) & 1) as u8,
            None => rng.gen_range(0..2u8),
        };
        match self.eval.evaluate(&self.state, q, psi, &mut draw) {
            Err(v) => self.abort(Self::verdict_reason(&v)),
            Ok(acc) => {
                let played = acc.played(self.bit as usize);
                let played = self.rewrite_sessions(played);
                self.state = acc.state;
                let observation = self.protocol.process_batch(&played);
                Response::Observed { observation }
            }
        }
    }

    /// Replaces each session label with a fresh random identifier.
    fn rewrite_sessions(&mut self, batch: Batch) -> Batch {
        let rows = batch
            .into_rows()
            .into_iter()
            .map(|c| match c.session().map(str::to_string) {
                None => c,
                Some(label) => {
                    let rng = &mut self.rng;
                    let id = self
                        .sessions
                        .entry(label)
                        .or_insert_with(|| format!("{:032x}", rng.gen::<u128>()))
                        .clone();
                    c.with_session(Some(id))
                }
            })
            .collect();
        Batch::new(rows).expect("non-empty")
    }

    pub fn corrupt_query(&mut self, party: Party) -> Response {
        let response = if let Some(r) = self.absorbing() {
            r
        } else {
            match self.eval.check_corrupt(&self.state, party) {
                Verdict::Accept => {
                    self.state.corrupted.insert(party);
                    Response::Observed { observation: self.protocol.corrupt(party) }
                }
                v => self.abort(Self::verdict_reason(&v)),
            }
        };
        self.record("corrupt", &party, &response);
        response
    }

    pub fn switch_stage(&mut self) -> Response {
        let response = if let Some(r) = self.absorbing() {
            r
        } else if !self.eval.notion.has_stages() {
            self.abort("notion has no stages".into())
        } else if self.switched {
            self.abort("stage already switched".into())
        } else {
            self.switched = true;
            self.state.stage = 2;
            Response::Ack
        };
        self.record("switch", &"switch", &response);
        response
    }

    pub fn protocol_query(&mut self, payload: &str) -> Response {
        let response = if let Some(r) = self.absorbing() {
            r
        } else {
            match self.protocol.query(payload) {
                Ok(observation) => Response::Observed { observation },
                Err(e) => self.abort(e.to_string()),
            }
        };
        self.record("protocol", &payload, &response);
        response
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::notions::parse;
    use crate::protocols::leaky_ideal;

    fn c(s: u32, r: u32, m: &str) -> Communication {
        Communication::real(s, r, m)
    }

    fn q(rows0: Vec<Communication>, rows1: Vec<Communication>) -> ChallengeBatchQuery {
        ChallengeBatchQuery::simple(Batch::new(rows0).unwrap(), Batch::new(rows1).unwrap()).unwrap()
    }

    fn game(notion: &str, bit: u8) -> Challenger {
        Challenger::with_bit(parse(notion).unwrap(), Box::new(leaky_ideal(&[])), 7, bit, GameConfig::default())
    }

    #[test]
    fn abort_is_absorbing() {
        let mut g = game("S!O", 0);
        assert!(g.batch_query(&q(vec![c(0, 0, "a")], vec![c(1, 1, "a")]), 1).is_abort());
        assert!(g.batch_query(&q(vec![c(0, 0, "a")], vec![c(1, 0, "a")]), 1).is_abort());
        assert!(g.protocol_query("dump-config").is_abort());
    }

    #[test]
    fn budget_checked_before_properties() {
        let mut g = Challenger::with_bit(
            parse("S!O").unwrap(),
            Box::new(leaky_ideal(&[])),
            1,
            0,
            GameConfig { challenges: 1, budget: 1 },
        );
        let r = g.batch_query(&q(vec![c(0, 0, "a"), c(0, 0, "b")], vec![c(1, 1, "a"), c(1, 0, "b")]), 1);
        let Response::Abort { reason } = r else { panic!() };
        assert!(reason.starts_with("BUDGET"), "{reason}");
    }

    #[test]
    fn challenge_range() {
        let mut g = game("S!O", 0);
        assert!(g.batch_query(&q(vec![c(0, 0, "a")], vec![c(1, 0, "a")]), 9).is_abort());
    }

    #[test]
    fn corruption_modes() {
        let p = Party { side: Side::Sender, id: 0 };
        let mut g = game("S!O+CORR_NO", 0);
        assert!(g.corrupt_query(p).is_abort());

        let mut g = game("S!O+CORR_STATIC", 0);
        assert!(!g.corrupt_query(p).is_abort());
        assert!(!g.batch_query(&q(vec![c(2, 0, "a")], vec![c(1, 0, "a")]), 1).is_abort());
        assert!(!g.corrupt_query(p).is_abort());
        assert!(g.corrupt_query(Party { side: Side::Sender, id: 1 }).is_abort());

        let mut g = game("S!O", 0);
        assert!(!g.batch_query(&q(vec![c(2, 0, "a")], vec![c(1, 0, "a")]), 1).is_abort());
        assert!(!g.corrupt_query(p).is_abort());
    }

    #[test]
    fn corrupted_users_equal_behavior() {
        let p = Party { side: Side::Sender, id: 0 };
        let mut g = game("S!O+CORR_C", 0);
        g.corrupt_query(p);
        assert!(g.batch_query(&q(vec![c(0, 0, "a")], vec![c(1, 0, "a")]), 1).is_abort());
        let mut g = game("S!O+CORR_C", 0);
        g.corrupt_query(p);
        assert!(!g.batch_query(&q(vec![c(0, 0, "a"), c(1, 0, "b")], vec![c(0, 0, "a"), c(2, 0, "b")]), 1).is_abort());
    }

    #[test]
    fn stage_switching() {
        let mut g = game("S!O", 0);
        assert!(g.switch_stage().is_abort());
        let mut g = game("(2S)!L", 0);
        assert_eq!(g.switch_stage(), Response::Ack);
        assert!(g.switch_stage().is_abort());
    }

    #[test]
    fn sessions_are_rewritten() {
        let tok = Some(session_token(1, 1));
        let r0 = c(0, 0, "a").with_session(tok.clone());
        let r1 = c(1, 0, "a").with_session(tok);
        let mut g = Challenger::with_bit(
            parse("S!O+SESS").unwrap(),
            Box::new(crate::protocols::leaky_ideal(&[])),
            3,
            1,
            GameConfig::default(),
        );
        assert!(!g.batch_query(&q(vec![r0.clone()], vec![r1.clone()]), 1).is_abort());
        let mut g2 = game("S!O+SESS", 1);
        assert!(g2.batch_query(&q(vec![c(0, 0, "a")], vec![c(1, 0, "a")]), 1).is_abort());
    }

    #[test]
    fn log_replays_identically() {
        let run = || {
            let mut g = Challenger::new_game(parse("S!O").unwrap(), Box::new(leaky_ideal(&[])), 42);
            g.batch_query(&q(vec![c(0, 0, "a")], vec![c(1, 0, "a")]), 1);
            g.protocol_query("dump-config");
            g.log_jsonl()
        };
        assert_eq!(run(), run());
        assert_eq!(run().lines().count(), 2);
    }
}
