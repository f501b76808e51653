//! Protocol models the challenger forwards batches to.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::challenger::Party;
use crate::harness::{exhaustive_safety, Bounds, Safety};
use crate::model::{Batch, Communication, Message, UserId};
use crate::notions::NotionSpec;
use crate::props::{self, BatchLinking, Multiset, Pair, Side};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("unsupported protocol query {0:?}")]
    Unsupported(String),
    #[error("unknown leakage function {0:?}")]
    UnknownLeak(String),
}

/// Information a leaky protocol may reveal after each batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeakageFunction {
    Active(Side),
    Frequencies(Side),
    UserCount(Side),
    Histogram(Side),
    Partition(Side),
    MessageLengths,
    MessageContents,
    SenderReceiverPairs,
    SenderLengthPairs,
    ReceiverLengthPairs,
    CommCount,
    FirstSenderReceiver,
    FirstSenderLength,
    FirstReceiverLength,
    FirstSender,
    FirstReceiver,
}

impl LeakageFunction {
    pub fn all() -> Vec<LeakageFunction> {
        use LeakageFunction::*;
        let mut out = Vec::new();
        for s in [Side::Sender, Side::Receiver] {
            out.extend([Active(s), Frequencies(s), UserCount(s), Histogram(s), Partition(s)]);
        }
        out.extend([
            MessageLengths,
            MessageContents,
            SenderReceiverPairs,
            SenderLengthPairs,
            ReceiverLengthPairs,
            CommCount,
            FirstSenderReceiver,
            FirstSenderLength,
            FirstReceiverLength,
            FirstSender,
            FirstReceiver,
        ]);
        out
    }

    pub fn name(self) -> String {
        use LeakageFunction::*;
        let p = |s: Side| if s == Side::Sender { "" } else { "'" };
        match self {
            Active(s) => format!("U{}", p(s)),
            Frequencies(s) => format!("Q{}", p(s)),
            UserCount(s) => format!("|U{}|", p(s)),
            Histogram(s) => format!("H{}", p(s)),
            Partition(s) => format!("P{}", p(s)),
            MessageLengths => "|m|".into(),
            MessageContents => "m".into(),
            SenderReceiverPairs => "(S,R)".into(),
            SenderLengthPairs => "(S,|m|)".into(),
            ReceiverLengthPairs => "(R,|m|)".into(),
            CommCount => "#comm".into(),
            FirstSenderReceiver => "1.(S,R)".into(),
            FirstSenderLength => "1.(S,|m|)".into(),
            FirstReceiverLength => "1.(R,|m|)".into(),
            FirstSender => "1.S".into(),
            FirstReceiver => "1.R".into(),
        }
    }

    /// The same leak with senders and receivers exchanged.
    pub fn dual(self) -> LeakageFunction {
        use LeakageFunction::*;
        match self {
            Active(s) => Active(s.other()),
            Frequencies(s) => Frequencies(s.other()),
            UserCount(s) => UserCount(s.other()),
            Histogram(s) => Histogram(s.other()),
            Partition(s) => Partition(s.other()),
            SenderLengthPairs => ReceiverLengthPairs,
            ReceiverLengthPairs => SenderLengthPairs,
            FirstSenderLength => FirstReceiverLength,
            FirstReceiverLength => FirstSenderLength,
            FirstSender => FirstReceiver,
            FirstReceiver => FirstSender,
            other => other,
        }
    }

    /// Whether the value after a batch depends on batches before it.
    pub fn uses_history(self) -> bool {
        matches!(self, LeakageFunction::Histogram(_) | LeakageFunction::Partition(_))
    }
}

impl fmt::Display for LeakageFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for LeakageFunction {
    type Err = ProtocolError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LeakageFunction::all()
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| ProtocolError::UnknownLeak(s.to_string()))
    }
}

impl Serialize for LeakageFunction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for LeakageFunction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeakValue {
    Count(u64),
    Ids(Vec<UserId>),
    IdCounts(Vec<(UserId, u64)>),
    Histogram(Vec<Vec<(u64, u64)>>),
    Partition(Vec<Vec<Multiset>>),
    Numbers(Vec<u64>),
    Messages(Vec<Message>),
    Pairs(Vec<(u64, u64)>),
    First(Option<Vec<u64>>),
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LeakEntry {
    pub leak: LeakageFunction,
    pub value: LeakValue,
}

/// What the adversary sees in response to one query.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    Leaks { values: Vec<LeakEntry> },
    Bit { bit: Option<u8> },
    UserState { party: Party },
    Config { leaks: Vec<LeakageFunction> },
    Ack,
    Abort { reason: String },
}

pub trait Protocol: Send {
    fn process_batch(&mut self, batch: &Batch) -> Observation;
    fn corrupt(&mut self, party: Party) -> Observation;
    fn query(&mut self, payload: &str) -> Result<Observation, ProtocolError>;
    fn box_clone(&self) -> Box<dyn Protocol>;
}

impl Clone for Box<dyn Protocol> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Serializable description of a protocol.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProtocolSpec {
    Leaky {
        #[serde(default)]
        leaks: Vec<LeakageFunction>,
    },
    TwistedPair {
        #[serde(default = "default_pair")]
        pair: String,
    },
}

fn default_pair() -> String {
    "SM".into()
}

impl ProtocolSpec {
    pub fn leaky(leaks: &[LeakageFunction]) -> Self {
        ProtocolSpec::Leaky { leaks: leaks.to_vec() }
    }

    pub fn build(&self, seed: u64) -> Result<Box<dyn Protocol>, ProtocolError> {
        Ok(match self {
            ProtocolSpec::Leaky { leaks } => Box::new(leaky_ideal(leaks)),
            ProtocolSpec::TwistedPair { pair } => {
                let pair = match pair.as_str() {
                    "SR" => Pair::SR,
                    "SM" => Pair::SM,
                    "RM" => Pair::RM,
                    other => return Err(ProtocolError::Unsupported(format!("pair {other}"))),
                };
                Box::new(twisted_pair_protocol(pair, seed))
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Leaky ideal protocol

/// Ideal protocol that outputs exactly the listed leakage after each batch.
#[derive(Clone, Debug, Default, Hash)]
pub struct LeakyIdeal {
    leaks: Vec<LeakageFunction>,
    history: Vec<BatchLinking>,
    first: Option<(UserId, UserId, u64)>,
}

pub fn leaky_ideal(leaks: &[LeakageFunction]) -> LeakyIdeal {
    let mut leaks = leaks.to_vec();
    leaks.sort();
    leaks.dedup();
    LeakyIdeal { leaks, ..LeakyIdeal::default() }
}

impl LeakyIdeal {
    pub fn leaks(&self) -> &[LeakageFunction] {
        &self.leaks
    }

    fn value(&self, leak: LeakageFunction, batch: &Batch) -> LeakValue {
        use LeakageFunction::*;
        let current = self.history.last().expect("history includes the current batch");
        let reals = || batch.rows().iter().filter_map(Communication::as_real);
        let sorted_pairs = |f: &dyn Fn(&crate::model::Real) -> (u64, u64)| {
            let mut v: Vec<(u64, u64)> = reals().map(f).collect();
            v.sort();
            LeakValue::Pairs(v)
        };
        match leak {
            Active(s) => LeakValue::Ids(props::active_users(current.side(s))),
            Frequencies(s) => LeakValue::IdCounts(props::frequencies(current.side(s))),
            UserCount(s) => LeakValue::Count(current.side(s).len() as u64),
            Histogram(s) => props::histogram(&self.history, s).map_or(LeakValue::Unavailable, LeakValue::Histogram),
            Partition(s) => props::partition(&self.history, s).map_or(LeakValue::Unavailable, LeakValue::Partition),
            MessageLengths => {
                let mut v: Vec<u64> = reals().map(|r| r.message.len() as u64).collect();
                v.sort();
                LeakValue::Numbers(v)
            }
            MessageContents => {
                let mut v: Vec<Message> = reals().map(|r| r.message.clone()).collect();
                v.sort();
                LeakValue::Messages(v)
            }
            SenderReceiverPairs => sorted_pairs(&|r| (r.sender as u64, r.receiver as u64)),
            SenderLengthPairs => sorted_pairs(&|r| (r.sender as u64, r.message.len() as u64)),
            ReceiverLengthPairs => sorted_pairs(&|r| (r.receiver as u64, r.message.len() as u64)),
            CommCount => LeakValue::Count(reals().count() as u64),
            FirstSenderReceiver => LeakValue::First(self.first.map(|(s, r, _)| vec![s as u64, r as u64])),
            FirstSenderLength => LeakValue::First(self.first.map(|(s, _, l)| vec![s as u64, l])),
            FirstReceiverLength => LeakValue::First(self.first.map(|(_, r, l)| vec![r as u64, l])),
            FirstSender => LeakValue::First(self.first.map(|(s, _, _)| vec![s as u64])),
            FirstReceiver => LeakValue::First(self.first.map(|(_, r, _)| vec![r as u64])),
        }
    }
}

impl Protocol for LeakyIdeal {
    fn process_batch(&mut self, batch: &Batch) -> Observation {
        self.history.push(BatchLinking::of(batch));
        if self.first.is_none() {
            self.first = batch
                .rows()
                .iter()
                .find_map(Communication::as_real)
                .map(|r| (r.sender, r.receiver, r.message.len() as u64));
        }
        let values = self.leaks.iter().map(|&leak| LeakEntry { leak, value: self.value(leak, batch) }).collect();
        Observation::Leaks { values }
    }

    fn corrupt(&mut self, party: Party) -> Observation {
        Observation::UserState { party }
    }

    fn query(&mut self, payload: &str) -> Result<Observation, ProtocolError> {
        match payload.trim() {
            "dump-config" => Ok(Observation::Config { leaks: self.leaks.clone() }),
            other => Err(ProtocolError::Unsupported(other.to_string())),
        }
    }

    fn box_clone(&self) -> Box<dyn Protocol> {
        Box::new(self.clone())
    }
}

/// Whether every compliant query in the bounded space yields identical
/// leakage in both scenarios, for every instance selection.
pub fn observation_invariance(leaks: &[LeakageFunction], notion: &NotionSpec, bounds: &Bounds) -> bool {
    matches!(exhaustive_safety(notion, leaks, bounds), Ok(Safety::Safe { .. }))
}

// ---------------------------------------------------------------------------
// Twisted pair protocol

#[derive(Clone, Debug, PartialEq, Eq)]
enum Value {
    User(UserId),
    Msg(Message),
}

/// Outputs one bit for two-row batches built from two fixed values in each
/// of two dimensions; deterministic on eight row patterns, random otherwise.
#[derive(Clone, Debug)]
pub struct TwistedPair {
    pair: Pair,
    first: [Value; 2],
    second: [Value; 2],
    rng: ChaCha20Rng,
}

/// Default values: users 0 and 1, messages `a` and `b`.
pub fn twisted_pair_protocol(pair: Pair, seed: u64) -> TwistedPair {
    let users = [Value::User(0), Value::User(1)];
    let msgs = [Value::Msg(Message::from("a")), Value::Msg(Message::from("b"))];
    let (first, second) = match pair {
        Pair::SR => (users.clone(), users),
        Pair::SM | Pair::RM => (users, msgs),
    };
    TwistedPair { pair, first, second, rng: ChaCha20Rng::seed_from_u64(seed) }
}

/// The eight deterministic patterns as pairs of `(first, second)` value
/// indices per row, with their output bit.
pub const TWISTED_TABLE: [([(usize, usize); 2], u8); 8] = [
    ([(0, 0), (1, 1)], 0),
    ([(1, 1), (0, 0)], 0),
    ([(1, 0), (0, 1)], 1),
    ([(0, 1), (1, 0)], 1),
    ([(0, 0), (0, 0)], 1),
    ([(1, 1), (1, 1)], 1),
    ([(1, 0), (1, 0)], 0),
    ([(0, 1), (0, 1)], 0),
];

impl TwistedPair {
    fn project(&self, c: &Communication) -> Option<(usize, usize)> {
        let r = c.as_real()?;
        let (d1, d2, _) = self.pair.dims();
        let get = |d| match d {
            crate::props::Dim::S => Value::User(r.sender),
            crate::props::Dim::R => Value::User(r.receiver),
            crate::props::Dim::M => Value::Msg(r.message.clone()),
        };
        let (x, y) = (get(d1), get(d2));
        Some((self.first.iter().position(|v| *v == x)?, self.second.iter().position(|v| *v == y)?))
    }

    /// Deterministic output for a two-row batch, if it matches a table pattern.
    pub fn table_bit(&self, batch: &Batch) -> Option<u8> {
        let rows = batch.rows();
        if rows.len() != 2 {
            return None;
        }
        let key = [self.project(&rows[0])?, self.project(&rows[1])?];
        TWISTED_TABLE.iter().find(|(k, _)| *k == key).map(|(_, bit)| *bit)
    }
}

impl Protocol for TwistedPair {
    fn process_batch(&mut self, batch: &Batch) -> Observation {
        if batch.len() != 2 {
            return Observation::Bit { bit: None };
        }
        let bit = match self.table_bit(batch) {
            Some(b) => b,
            None => self.rng.gen_range(0..2),
        };
        Observation::Bit { bit: Some(bit) }
    }

    fn corrupt(&mut self, party: Party) -> Observation {
        Observation::UserState { party }
    }

    fn query(&mut self, payload: &str) -> Result<Observation, ProtocolError> {
        Err(ProtocolError::Unsupported(payload.to_string()))
    }

    fn box_clone(&self) -> Box<dyn Protocol> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: u32, r: u32, m: &str) -> Communication {
        Communication::real(s, r, m)
    }

    #[test]
    fn leak_names_roundtrip() {
        for l in LeakageFunction::all() {
            assert_eq!(l.name().parse::<LeakageFunction>().unwrap(), l);
        }
    }

    #[test]
    fn descriptor_json() {
        let spec: ProtocolSpec = serde_json::from_str(r#"{"kind":"leaky","leaks":["|U'|","m"]}"#).unwrap();
        assert_eq!(
            spec,
            ProtocolSpec::leaky(&[LeakageFunction::UserCount(Side::Receiver), LeakageFunction::MessageContents])
        );
        let tp: ProtocolSpec = serde_json::from_str(r#"{"kind":"twisted_pair"}"#).unwrap();
        assert_eq!(tp, ProtocolSpec::TwistedPair { pair: "SM".into() });
    }

    #[test]
    fn empty_leak_set_outputs_nothing() {
        let mut p = leaky_ideal(&[]);
        let obs = p.process_batch(&Batch::new(vec![c(0, 0, "a")]).unwrap());
        assert_eq!(obs, Observation::Leaks { values: vec![] });
        assert_eq!(p.query("dump-config").unwrap(), Observation::Config { leaks: vec![] });
        assert!(p.query("other").is_err());
    }

    #[test]
    fn receiver_count() {
        let mut p = leaky_ideal(&[LeakageFunction::UserCount(Side::Receiver)]);
        let obs = p.process_batch(&Batch::new(vec![c(0, 0, "a"), c(1, 1, "a"), c(0, 1, "b")]).unwrap());
        let Observation::Leaks { values } = obs else { panic!() };
        assert_eq!(values[0].value, LeakValue::Count(2));
    }

    #[test]
    fn twisted_table_outputs() {
        let mut p = twisted_pair_protocol(Pair::SM, 1);
        let pat = |rows: [(u32, &str); 2]| {
            Batch::new(rows.iter().map(|(u, m)| c(*u, 0, m)).collect()).unwrap()
        };
        let cases = [
            ([(0, "a"), (1, "b")], 0),
            ([(1, "b"), (0, "a")], 0),
            ([(1, "a"), (0, "b")], 1),
            ([(0, "b"), (1, "a")], 1),
            ([(0, "a"), (0, "a")], 1),
            ([(1, "b"), (1, "b")], 1),
            ([(1, "a"), (1, "a")], 0),
            ([(0, "b"), (0, "b")], 0),
        ];
        for (rows, bit) in cases {
            assert_eq!(p.process_batch(&pat(rows)), Observation::Bit { bit: Some(bit) });
        }
        let single = Batch::new(vec![c(0, 0, "a")]).unwrap();
        assert_eq!(p.process_batch(&single), Observation::Bit { bit: None });
    }
}
