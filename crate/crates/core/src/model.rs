//! Communications, batches and challenge batch queries.

use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Sender and receiver ids live in separate namespaces; the role is given by position.
pub type UserId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("a batch must contain at least one communication")]
    EmptyBatch,
    #[error("batches of one query must have equal length, got {0:?}")]
    UnequalBatchLengths([usize; 4]),
    #[error("malformed communication: {0}")]
    Malformed(String),
}

/// Opaque message bytes, base64 on the wire.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Message(Arc<[u8]>);

impl Message {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Message(bytes.into().into())
    }
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<&str> for Message {
    fn from(s: &str) -> Self {
        Message::new(s.as_bytes())
    }
}

impl Serialize for Message {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes()).map(Message::new).map_err(D::Error::custom)
    }
}

/// Auxiliary information attached to a communication.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Aux {
    #[serde(rename = "sess", default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(rename = "psi", default, skip_serializing_if = "Option::is_none")]
    pub challenge: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free: Option<Message>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Real {
    pub sender: UserId,
    pub receiver: UserId,
    pub message: Message,
    pub aux: Aux,
}

/// Either a real communication or the empty communication `◇`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Communication {
    Empty,
    Real(Real),
}

impl Communication {
    pub fn real(sender: UserId, receiver: UserId, message: impl Into<Message>) -> Self {
        Communication::Real(Real { sender, receiver, message: message.into(), aux: Aux::default() })
    }

    pub fn as_real(&self) -> Option<&Real> {
        match self {
            Communication::Real(r) => Some(r),
            Communication::Empty => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Communication::Empty)
    }

    pub fn sender(&self) -> Option<UserId> {
        self.as_real().map(|r| r.sender)
    }

    pub fn receiver(&self) -> Option<UserId> {
        self.as_real().map(|r| r.receiver)
    }

    pub fn message(&self) -> Option<&Message> {
        self.as_real().map(|r| &r.message)
    }

    pub fn challenge(&self) -> Option<u32> {
        self.as_real().and_then(|r| r.aux.challenge)
    }

    pub fn session(&self) -> Option<&str> {
        self.as_real().and_then(|r| r.aux.session.as_deref())
    }

    /// Copy without the challenge number.
    pub fn stripped(&self) -> Communication {
        match self {
            Communication::Empty => Communication::Empty,
            Communication::Real(r) => {
                let mut r = r.clone();
                r.aux.challenge = None;
                Communication::Real(r)
            }
        }
    }

    pub fn with_challenge(&self, psi: Option<u32>) -> Communication {
        match self {
            Communication::Empty => Communication::Empty,
            Communication::Real(r) => {
                let mut r = r.clone();
                r.aux.challenge = psi;
                Communication::Real(r)
            }
        }
    }

    pub fn with_session(&self, session: Option<String>) -> Communication {
        match self {
            Communication::Empty => Communication::Empty,
            Communication::Real(r) => {
                let mut r = r.clone();
                r.aux.session = session;
                Communication::Real(r)
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RealWire {
    s: UserId,
    r: UserId,
    m: Message,
    #[serde(default)]
    aux: Aux,
}

impl Serialize for Communication {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Communication::Empty => s.serialize_str("empty"),
            Communication::Real(r) => RealWire {
                s: r.sender,
                r: r.receiver,
                m: r.message.clone(),
                aux: r.aux.clone(),
            }
            .serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Communication {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Tag(String),
            Real(RealWire),
        }
        match Wire::deserialize(d)? {
            Wire::Tag(t) if t == "empty" => Ok(Communication::Empty),
            Wire::Tag(t) => Err(D::Error::custom(format!("unknown communication tag {t:?}"))),
            Wire::Real(w) => Ok(Communication::Real(Real {
                sender: w.s,
                receiver: w.r,
                message: w.m,
                aux: w.aux,
            })),
        }
    }
}

/// A non-empty sequence of communications.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct Batch(Vec<Communication>);

impl Batch {
    pub fn new(rows: Vec<Communication>) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(Batch(rows))
    }

    pub fn rows(&self) -> &[Communication] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn map(&self, f: impl FnMut(&Communication) -> Communication) -> Batch {
        Batch(self.0.iter().map(f).collect())
    }

    pub fn into_rows(self) -> Vec<Communication> {
        self.0
    }
}

impl<'de> Deserialize<'de> for Batch {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Communication>::deserialize(d)?;
        Batch::new(rows).map_err(D::Error::custom)
    }
}

/// Four batches indexed `[instance][scenario]`, all of equal length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChallengeBatchQuery {
    batches: [[Batch; 2]; 2],
}

impl ChallengeBatchQuery {
    pub fn new(batches: [[Batch; 2]; 2]) -> Result<Self, ModelError> {
        let lens = [
            batches[0][0].len(),
            batches[0][1].len(),
            batches[1][0].len(),
            batches[1][1].len(),
        ];
        if lens.iter().any(|&l| l != lens[0]) {
            return Err(ModelError::UnequalBatchLengths(lens));
        }
        Ok(ChallengeBatchQuery { batches })
    }

    /// Query whose second instance repeats the first.
    pub fn simple(scenario0: Batch, scenario1: Batch) -> Result<Self, ModelError> {
        Self::new([[scenario0.clone(), scenario1.clone()], [scenario0, scenario1]])
    }

    /// `inst0 = (scenario 0, scenario 1)` and likewise for `inst1`.
    pub fn instances(inst0: (Batch, Batch), inst1: (Batch, Batch)) -> Result<Self, ModelError> {
        Self::new([[inst0.0, inst0.1], [inst1.0, inst1.1]])
    }

    /// Builds a query from per-row four-tuples `[instance][scenario]`.
    pub fn from_rows(rows: &[[[Communication; 2]; 2]]) -> Result<Self, ModelError> {
        let pick = |a: usize, b: usize| Batch::new(rows.iter().map(|t| t[a][b].clone()).collect());
        Self::new([[pick(0, 0)?, pick(0, 1)?], [pick(1, 0)?, pick(1, 1)?]])
    }

    pub fn batch(&self, instance: usize, scenario: usize) -> &Batch {
        &self.batches[instance][scenario]
    }

    pub fn batches(&self) -> &[[Batch; 2]; 2] {
        &self.batches
    }

    pub fn len(&self) -> usize {
        self.batches[0][0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The four communications of row `j`, `[instance][scenario]`.
    pub fn row(&self, j: usize) -> [[&Communication; 2]; 2] {
        [
            [&self.batches[0][0].rows()[j], &self.batches[0][1].rows()[j]],
            [&self.batches[1][0].rows()[j], &self.batches[1][1].rows()[j]],
        ]
    }

    pub fn map(&self, mut f: impl FnMut(usize, usize, &Batch) -> Batch) -> Result<Self, ModelError> {
        Self::new([
            [f(0, 0, &self.batches[0][0]), f(0, 1, &self.batches[0][1])],
            [f(1, 0, &self.batches[1][0]), f(1, 1, &self.batches[1][1])],
        ])
    }

    /// Challenge number of row `j`: the first tag found among its four variants.
    pub fn row_challenge(&self, j: usize) -> Option<u32> {
        let r = self.row(j);
        [r[0][0], r[0][1], r[1][0], r[1][1]].iter().find_map(|c| c.challenge())
    }

    /// Copy with every challenge number removed.
    pub fn stripped(&self) -> Self {
        self.map(|_, _, b| b.map(Communication::stripped)).expect("lengths unchanged")
    }

    /// Copy whose second instance repeats the first.
    pub fn collapsed(&self) -> Self {
        let b0 = self.batches[0][0].clone();
        let b1 = self.batches[0][1].clone();
        Self::simple(b0, b1).expect("lengths unchanged")
    }

    /// Rows where the four communications are not all identical, ignoring challenge numbers.
    pub fn challenge_rows(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| {
                let r = self.row(j);
                let first = r[0][0].stripped();
                [r[0][1], r[1][0], r[1][1]].iter().any(|c| c.stripped() != first)
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum QueryWire {
    Instances { instances: [[Batch; 2]; 2] },
    Scenarios { scenarios: [Batch; 2] },
}

impl Serialize for ChallengeBatchQuery {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        QueryWire::Instances { instances: self.batches.clone() }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChallengeBatchQuery {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match QueryWire::deserialize(d)? {
            QueryWire::Instances { instances } => ChallengeBatchQuery::new(instances),
            QueryWire::Scenarios { scenarios: [b0, b1] } => ChallengeBatchQuery::simple(b0, b1),
        }
        .map_err(D::Error::custom)
    }
}
