//! Property atoms and their evaluation on challenge batch queries.
//!
//! Row-local atoms compare scenario 0 and scenario 1 row by row over all four
//! instance pairings. Activity atoms compare linking histories. Challenge
//! atoms compare challenge rows against the first challenge row of their
//! challenge.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, ChallengeBatchQuery, Communication, Message, Real, UserId};

/// Largest number of batches over which partitions and histograms are built.
pub const MAX_HISTORY: usize = 6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PropError {
    #[error("pairwise atom {0} needs an even number of challenge rows")]
    OddChallengeRowCount(String),
    #[error("atom {0} needs a challenge row from the first stage")]
    NoChallengeRowYet(String),
    #[error("history of {0} batches exceeds the limit of {MAX_HISTORY}")]
    TooManyBatches(usize),
    #[error("atom {0} is not evaluated here")]
    WrongKind(String),
    #[error("unknown atom {0:?}")]
    UnknownAtom(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject { atom: String, reason: String },
}

impl Verdict {
    pub fn reject(atom: impl fmt::Display, reason: impl Into<String>) -> Self {
        Verdict::Reject { atom: atom.to_string(), reason: reason.into() }
    }

    pub fn is_accept(&self) -> bool {
        matches!(self, Verdict::Accept)
    }

    pub fn and(self, next: impl FnOnce() -> Verdict) -> Verdict {
        match self {
            Verdict::Accept => next(),
            rejected => rejected,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    Sender,
    Receiver,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Sender => Side::Receiver,
            Side::Receiver => Side::Sender,
        }
    }

    pub fn dim(self) -> Dim {
        match self {
            Side::Sender => Dim::S,
            Side::Receiver => Dim::R,
        }
    }

    fn mark(self) -> &'static str {
        match self {
            Side::Sender => "",
            Side::Receiver => "'",
        }
    }
}

/// One coordinate of a communication.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    S,
    R,
    M,
}

impl Dim {
    fn letter(self) -> char {
        match self {
            Dim::S => 'S',
            Dim::R => 'R',
            Dim::M => 'M',
        }
    }

    fn dual(self) -> Dim {
        match self {
            Dim::S => Dim::R,
            Dim::R => Dim::S,
            Dim::M => Dim::M,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Comp<'a> {
    User(UserId),
    Msg(&'a Message),
}

fn comp(r: &Real, d: Dim) -> Comp<'_> {
    match d {
        Dim::S => Comp::User(r.sender),
        Dim::R => Comp::User(r.receiver),
        Dim::M => Comp::Msg(&r.message),
    }
}

/// Dimensions that may differ between the scenarios under an equality atom.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Varying {
    S,
    R,
    M,
    SM,
    RM,
    SR,
}

impl Varying {
    pub fn dims(self) -> &'static [Dim] {
        match self {
            Varying::S => &[Dim::S],
            Varying::R => &[Dim::R],
            Varying::M => &[Dim::M],
            Varying::SM => &[Dim::S, Dim::M],
            Varying::RM => &[Dim::R, Dim::M],
            Varying::SR => &[Dim::S, Dim::R],
        }
    }

    pub fn varies(self, d: Dim) -> bool {
        self.dims().contains(&d)
    }

    pub fn all() -> [Varying; 6] {
        [Varying::S, Varying::R, Varying::M, Varying::SM, Varying::RM, Varying::SR]
    }

    fn from_dims(dims: &[Dim]) -> Option<Varying> {
        let has = |d| dims.contains(&d);
        Some(match (has(Dim::S), has(Dim::R), has(Dim::M)) {
            (true, false, false) => Varying::S,
            (false, true, false) => Varying::R,
            (false, false, true) => Varying::M,
            (true, false, true) => Varying::SM,
            (false, true, true) => Varying::RM,
            (true, true, false) => Varying::SR,
            _ => return None,
        })
    }

    fn dual(self) -> Varying {
        let d: Vec<Dim> = self.dims().iter().map(|d| d.dual()).collect();
        Varying::from_dims(&d).expect("dual of a valid set")
    }

    fn suffix(self) -> String {
        self.dims().iter().map(|d| d.letter()).collect()
    }
}

/// Two dimensions linked by a challenge pattern; the first stays with the instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pair {
    SR,
    SM,
    RM,
}

impl Pair {
    pub fn dims(self) -> (Dim, Dim, Dim) {
        match self {
            Pair::SR => (Dim::S, Dim::R, Dim::M),
            Pair::SM => (Dim::S, Dim::M, Dim::R),
            Pair::RM => (Dim::R, Dim::M, Dim::S),
        }
    }

    fn dual(self) -> Pair {
        match self {
            Pair::SR => Pair::SR,
            Pair::SM => Pair::RM,
            Pair::RM => Pair::SM,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Pair::SR => "SR",
            Pair::SM => "SM",
            Pair::RM => "RM",
        }
    }
}

/// Restriction on corrupt queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptionMode {
    /// Corruption allowed only before the first batch query.
    Static,
    /// No corruption at all.
    Forbidden,
}

/// Restriction on how corrupted users may appear in batch queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptBehavior {
    NoComm,
    NoSend,
    NoReceive,
    /// Corrupted users send and receive the same messages in both scenarios.
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PropertyAtom {
    /// `|M|`
    MessageLength,
    /// `E_S`, `E_R`, `E_M`, `E_SM`, `E_RM`, `E_SR`
    Equal(Varying),
    /// `⊄`
    Something,
    /// `ℵ`
    Nothing,
    /// `U`
    Active(Side),
    /// `Q`
    Frequency(Side),
    /// `|U|`
    Count(Side),
    /// `P`
    Partition(Side),
    /// `H`
    Histogram(Side),
    /// `R_SR`, `R_SM`, `R_RM`
    Fixed(Pair),
    /// `M_SR`, `M_SM`, `M_RM`
    Mixed(Pair),
    /// `T_S`, `T_R`
    Twice(Side),
    /// `E_◇`
    EmptyOrEqual,
    /// `↛`
    NoSend(Side),
    /// `G`
    Permutation,
    Session,
    Corruption(CorruptionMode),
    Behavior(CorruptBehavior),
    /// Per-challenge bound on challenge rows.
    ChallengeRows(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtomKind {
    RowLocal,
    Activity,
    Challenge,
    Option,
}

impl PropertyAtom {
    pub fn kind(self) -> AtomKind {
        use PropertyAtom::*;
        match self {
            MessageLength | Equal(_) | Something | Nothing | EmptyOrEqual => AtomKind::RowLocal,
            Active(_) | Frequency(_) | Count(_) | Partition(_) | Histogram(_) | Permutation => {
                AtomKind::Activity
            }
            Fixed(_) | Mixed(_) | Twice(_) | NoSend(_) => AtomKind::Challenge,
            Session | Corruption(_) | Behavior(_) | ChallengeRows(_) => AtomKind::Option,
        }
    }

    /// Whether the challenger must draw a random instance for this atom.
    pub fn uses_instances(self) -> bool {
        matches!(self, PropertyAtom::Fixed(_) | PropertyAtom::Mixed(_) | PropertyAtom::Twice(_))
    }

    /// Whether evaluation depends on batches before the current one.
    pub fn uses_history(self) -> bool {
        matches!(self, PropertyAtom::Partition(_) | PropertyAtom::Histogram(_))
    }

    pub fn dual(self) -> PropertyAtom {
        use PropertyAtom::*;
        match self {
            Equal(v) => Equal(v.dual()),
            Active(s) => Active(s.other()),
            Frequency(s) => Frequency(s.other()),
            Count(s) => Count(s.other()),
            Partition(s) => Partition(s.other()),
            Histogram(s) => Histogram(s.other()),
            Fixed(p) => Fixed(p.dual()),
            Mixed(p) => Mixed(p.dual()),
            Twice(s) => Twice(s.other()),
            NoSend(s) => NoSend(s.other()),
            Behavior(CorruptBehavior::NoSend) => Behavior(CorruptBehavior::NoReceive),
            Behavior(CorruptBehavior::NoReceive) => Behavior(CorruptBehavior::NoSend),
            other => other,
        }
    }

    pub fn name(self) -> String {
        use PropertyAtom::*;
        match self {
            MessageLength => "|M|".into(),
            Equal(v) => format!("E_{}", v.suffix()),
            Something => "SOMETHING".into(),
            Nothing => "NOTHING".into(),
            Active(s) => format!("U{}", s.mark()),
            Frequency(s) => format!("Q{}", s.mark()),
            Count(s) => format!("|U{}|", s.mark()),
            Partition(s) => format!("P{}", s.mark()),
            Histogram(s) => format!("H{}", s.mark()),
            Fixed(p) => format!("R_{}", p.suffix()),
            Mixed(p) => format!("M_{}", p.suffix()),
            Twice(Side::Sender) => "T_S".into(),
            Twice(Side::Receiver) => "T_R".into(),
            EmptyOrEqual => "E_DIA".into(),
            NoSend(s) => format!("NOSEND{}", s.mark()),
            Permutation => "G".into(),
            Session => "SESS".into(),
            Corruption(CorruptionMode::Static) => "CORR_STATIC".into(),
            Corruption(CorruptionMode::Forbidden) => "CORR_NO".into(),
            Behavior(CorruptBehavior::NoComm) => "CORR_NOCOMM".into(),
            Behavior(CorruptBehavior::NoSend) => "CORR_NOSEND".into(),
            Behavior(CorruptBehavior::NoReceive) => "CORR_NORECV".into(),
            Behavior(CorruptBehavior::Equal) => "CORR_C".into(),
            ChallengeRows(k) => format!("CR_{k}"),
        }
    }

    /// Every atom without a numeric parameter.
    pub fn catalogue() -> Vec<PropertyAtom> {
        use PropertyAtom::*;
        let mut out = vec![MessageLength, Something, Nothing, EmptyOrEqual, Permutation, Session];
        out.extend(Varying::all().map(Equal));
        for s in [Side::Sender, Side::Receiver] {
            out.extend([Active(s), Frequency(s), Count(s), Partition(s), Histogram(s), Twice(s), NoSend(s)]);
        }
        for p in [Pair::SR, Pair::SM, Pair::RM] {
            out.extend([Fixed(p), Mixed(p)]);
        }
        out.extend([Corruption(CorruptionMode::Static), Corruption(CorruptionMode::Forbidden)]);
        out.extend(
            [CorruptBehavior::NoComm, CorruptBehavior::NoSend, CorruptBehavior::NoReceive, CorruptBehavior::Equal]
                .map(Behavior),
        );
        out
    }
}

impl fmt::Display for PropertyAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for PropertyAtom {
    type Err = PropError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(k) = s.strip_prefix("CR_") {
            return k
                .parse()
                .map(PropertyAtom::ChallengeRows)
                .map_err(|_| PropError::UnknownAtom(s.into()));
        }
        PropertyAtom::catalogue()
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| PropError::UnknownAtom(s.into()))
    }
}

impl Serialize for PropertyAtom {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name())
    }
}

impl<'de> Deserialize<'de> for PropertyAtom {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Row-local atoms

/// Equality of two real communications on everything except `varying` and
/// the challenge number.
fn equal_except(x: &Real, y: &Real, varying: &[Dim]) -> bool {
    let dims_ok = [Dim::S, Dim::R, Dim::M]
        .iter()
        .all(|&d| varying.contains(&d) || comp(x, d) == comp(y, d));
    dims_ok && x.aux.session == y.aux.session && x.aux.free == y.aux.free
}

fn same_payload(x: &Communication, y: &Communication) -> bool {
    match (x, y) {
        (Communication::Empty, Communication::Empty) => true,
        (Communication::Real(a), Communication::Real(b)) => equal_except(a, b, &[]),
        _ => false,
    }
}

/// Checks one row-local atom on one scenario pair of communications.
pub fn row_holds(atom: PropertyAtom, r0: &Communication, r1: &Communication) -> Result<bool, PropError> {
    use PropertyAtom::*;
    Ok(match atom {
        Nothing => true,
        Something => !r0.is_empty() && !r1.is_empty(),
        MessageLength => match (r0, r1) {
            (Communication::Empty, Communication::Empty) => true,
            (Communication::Real(a), Communication::Real(b)) => a.message.len() == b.message.len(),
            _ => false,
        },
        Equal(v) => match (r0, r1) {
            (Communication::Real(a), Communication::Real(b)) => equal_except(a, b, v.dims()),
            _ => false,
        },
        EmptyOrEqual => r0.is_empty() || r1.is_empty() || same_payload(r0, r1),
        other => return Err(PropError::WrongKind(other.name())),
    })
}

/// Evaluates a row-local atom on every row and every instance pairing.
pub fn eval_simple(atom: PropertyAtom, q: &ChallengeBatchQuery) -> Result<Verdict, PropError> {
    eval_simple_rows(atom, q, 0..q.len())
}

pub(crate) fn eval_simple_rows(
    atom: PropertyAtom,
    q: &ChallengeBatchQuery,
    rows: impl IntoIterator<Item = usize>,
) -> Result<Verdict, PropError> {
    for j in rows {
        let r = q.row(j);
        for a0 in 0..2 {
            for a1 in 0..2 {
                if !row_holds(atom, r[a0][0], r[a1][1])? {
                    let reason = match atom {
                        PropertyAtom::Something => format!("row {j} holds the empty communication"),
                        _ => format!("row {j} differs between instance {a0} of scenario 0 and instance {a1} of scenario 1"),
                    };
                    return Ok(Verdict::reject(atom, reason));
                }
            }
        }
    }
    Ok(Verdict::Accept)
}

// ---------------------------------------------------------------------------
// Linking sets and activity atoms

/// Sorted list of messages standing for a multiset.
pub type Multiset = Vec<Message>;

/// Users of one side with the multiset of messages each sent or received.
pub type LinkingSet = BTreeMap<UserId, Multiset>;

/// Linking sets of both sides for one batch.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct BatchLinking {
    pub senders: Arc<LinkingSet>,
    pub receivers: Arc<LinkingSet>,
}

impl BatchLinking {
    pub fn of(batch: &Batch) -> Self {
        let mut senders = LinkingSet::new();
        let mut receivers = LinkingSet::new();
        for r in batch.rows().iter().filter_map(Communication::as_real) {
            senders.entry(r.sender).or_default().push(r.message.clone());
            receivers.entry(r.receiver).or_default().push(r.message.clone());
        }
        for set in [&mut senders, &mut receivers] {
            set.values_mut().for_each(|m| m.sort());
        }
        BatchLinking { senders: Arc::new(senders), receivers: Arc::new(receivers) }
    }

    pub fn side(&self, side: Side) -> &LinkingSet {
        match side {
            Side::Sender => &self.senders,
            Side::Receiver => &self.receivers,
        }
    }
}

pub fn active_users(set: &LinkingSet) -> Vec<UserId> {
    set.keys().copied().collect()
}

pub fn frequencies(set: &LinkingSet) -> Vec<(UserId, u64)> {
    set.iter().map(|(u, m)| (*u, m.len() as u64)).collect()
}

/// For each non-empty subset of batches (ordered by bitmask), the sorted
/// multiset of per-user message multisets merged over that subset.
pub fn partition(history: &[BatchLinking], side: Side) -> Result<Vec<Vec<Multiset>>, PropError> {
    let k = history.len();
    if k > MAX_HISTORY {
        return Err(PropError::TooManyBatches(k));
    }
    let mut out = Vec::with_capacity((1 << k) - 1);
    for mask in 1usize..(1 << k) {
        let mut per_user: BTreeMap<UserId, Multiset> = BTreeMap::new();
        for (i, linking) in history.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            for (u, msgs) in linking.side(side) {
                per_user.entry(*u).or_default().extend(msgs.iter().cloned());
            }
        }
        let mut classes: Vec<Multiset> = per_user
            .into_values()
            .map(|mut m| {
                m.sort();
                m
            })
            .collect();
        classes.sort();
        out.push(classes);
    }
    Ok(out)
}

/// For each non-empty subset of batches, pairs `(n, i)`: `i` users have `n` messages.
pub fn histogram(history: &[BatchLinking], side: Side) -> Result<Vec<Vec<(u64, u64)>>, PropError> {
    Ok(partition(history, side)?
        .into_iter()
        .map(|classes| {
            let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
            for c in classes {
                *counts.entry(c.len() as u64).or_default() += 1;
            }
            counts.into_iter().collect()
        })
        .collect())
}

/// Linking histories indexed `[instance][scenario]`.
pub type Histories = [[Vec<BatchLinking>; 2]; 2];

/// The value an activity atom compares between scenarios.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub enum Feature {
    Users(Vec<UserId>),
    Freqs(Vec<(UserId, u64)>),
    Count(usize),
    Partition(Vec<Vec<Multiset>>),
    Histogram(Vec<Vec<(u64, u64)>>),
}

pub fn feature(atom: PropertyAtom, history: &[BatchLinking]) -> Result<Feature, PropError> {
    use PropertyAtom::*;
    let current = history.last().cloned().unwrap_or_default();
    Ok(match atom {
        Active(s) => Feature::Users(active_users(current.side(s))),
        Frequency(s) => Feature::Freqs(frequencies(current.side(s))),
        Count(s) => Feature::Count(current.side(s).len()),
        Partition(s) => Feature::Partition(partition(history, s)?),
        Histogram(s) => Feature::Histogram(histogram(history, s)?),
        Permutation => Feature::Partition(partition(std::slice::from_ref(&current), Side::Sender)?),
        other => return Err(PropError::WrongKind(other.name())),
    })
}

/// Evaluates an activity atom on linking histories that already include the current batch.
pub fn eval_activity(atom: PropertyAtom, histories: &Histories) -> Result<Verdict, PropError> {
    let right0 = feature(atom, &histories[0][1])?;
    let right1 = if histories[1][1] == histories[0][1] { None } else { Some(feature(atom, &histories[1][1])?) };
    for a0 in 0..2 {
        if a0 == 1 && histories[1][0] == histories[0][0] {
            break;
        }
        let left = feature(atom, &histories[a0][0])?;
        for a1 in 0..2 {
            let right = if a1 == 0 { &right0 } else { right1.as_ref().unwrap_or(&right0) };
            if left != *right {
                return Ok(Verdict::reject(
                    atom,
                    format!("differs between instance {a0} of scenario 0 and instance {a1} of scenario 1"),
                ));
            }
        }
    }
    Ok(Verdict::Accept)
}

// ---------------------------------------------------------------------------
// Challenge atoms

/// The four communications of one row, `[instance][scenario]`.
pub type Four = [[Communication; 2]; 2];

pub fn four_of(q: &ChallengeBatchQuery, j: usize) -> Four {
    let r = q.row(j);
    [[r[0][0].clone(), r[0][1].clone()], [r[1][0].clone(), r[1][1].clone()]]
}

/// What a challenge atom sees of one challenge.
#[derive(Clone, Copy, Debug)]
pub struct ChallengeView<'a> {
    /// Challenge rows of this challenge in the current batch, ascending.
    pub rows: &'a [usize],
    /// First challenge row of this challenge in the current stage.
    pub first: &'a Four,
    pub stage: u8,
    /// First challenge row of the first stage, when there was one.
    pub stage_one: Option<&'a Four>,
    /// A prefix of a batch: an unmatched last row of a pairwise atom is allowed.
    pub partial: bool,
}

fn need_real<'a>(c: &'a Communication) -> Option<&'a Real> {
    c.as_real()
}

/// Checks that `actual` equals `reference` except that `d1`/`d2` take the given values.
fn matches_pattern(actual: &Communication, reference: &Real, d1: Dim, v1: Comp<'_>, d2: Dim, v2: Comp<'_>) -> bool {
    let Some(x) = actual.as_real() else { return false };
    let (_, _, d3) = dims_for(d1, d2);
    comp(x, d1) == v1
        && comp(x, d2) == v2
        && comp(x, d3) == comp(reference, d3)
        && x.aux.session == reference.aux.session
        && x.aux.free == reference.aux.free
}

fn dims_for(d1: Dim, d2: Dim) -> (Dim, Dim, Dim) {
    let d3 = [Dim::S, Dim::R, Dim::M].into_iter().find(|d| *d != d1 && *d != d2).expect("three dims");
    (d1, d2, d3)
}

/// Values of dims `d1` and `d2` in scenario 0 of both instances of a stored row.
fn first_values(first: &Four, d1: Dim, d2: Dim) -> Option<([Comp<'_>; 2], [Comp<'_>; 2])> {
    let r0 = need_real(&first[0][0])?;
    let r1 = need_real(&first[1][0])?;
    Some(([comp(r0, d1), comp(r1, d1)], [comp(r0, d2), comp(r1, d2)]))
}

/// Evaluates a challenge atom on the rows of one challenge.
pub fn eval_complex(atom: PropertyAtom, q: &ChallengeBatchQuery, view: ChallengeView<'_>) -> Result<Verdict, PropError> {
    use PropertyAtom::*;
    let fail = |j: usize, why: &str| Ok(Verdict::reject(atom, format!("challenge row {j}: {why}")));
    match atom {
        Fixed(pair) => {
            let (d1, d2, _) = pair.dims();
            let Some((v1, v2)) = first_values(view.first, d1, d2) else {
                return fail(view.rows.first().copied().unwrap_or(0), "empty communication");
            };
            for &j in view.rows {
                let r = q.row(j);
                let Some(reference) = r[1][0].as_real() else { return fail(j, "empty communication") };
                for a in 0..2 {
                    if !matches_pattern(r[a][0], reference, d1, v1[a], d2, v2[a])
                        || !matches_pattern(r[a][1], reference, d1, v1[a], d2, v2[1 - a])
                    {
                        return fail(j, "does not follow the first challenge row");
                    }
                }
            }
            Ok(Verdict::Accept)
        }
        Mixed(pair) => {
            let (d1, d2, _) = pair.dims();
            if view.rows.len() % 2 == 1 && !view.partial {
                return Err(PropError::OddChallengeRowCount(atom.name()));
            }
            let Some((v1, v2)) = first_values(view.first, d1, d2) else {
                return fail(view.rows.first().copied().unwrap_or(0), "empty communication");
            };
            for chunk in view.rows.chunks(2) {
                let [j, k] = chunk else { continue };
                if *k != j + 1 {
                    return fail(*j, "paired challenge rows must be adjacent");
                }
                let (r, s) = (q.row(*j), q.row(*k));
                let Some(reference) = r[1][0].as_real() else { return fail(*j, "empty communication") };
                for a in 0..2 {
                    let b = 1 - a;
                    let ok = matches_pattern(r[a][0], reference, d1, v1[a], d2, v2[a])
                        && matches_pattern(s[a][0], reference, d1, v1[b], d2, v2[b])
                        && matches_pattern(r[a][1], reference, d1, v1[a], d2, v2[b])
                        && matches_pattern(s[a][1], reference, d1, v1[b], d2, v2[a]);
                    if !ok {
                        return fail(*j, "pair does not follow the first challenge row");
                    }
                }
            }
            Ok(Verdict::Accept)
        }
        Twice(side) => {
            let d1 = side.dim();
            let d2 = side.other().dim();
            let stage_one = if view.stage == 1 { Some(view.first) } else { view.stage_one };
            let Some(stage_one) = stage_one else {
                return Err(PropError::NoChallengeRowYet(atom.name()));
            };
            let Some((v1, _)) = first_values(stage_one, d1, d2) else {
                return fail(view.rows.first().copied().unwrap_or(0), "empty communication");
            };
            let Some((_, w2)) = first_values(view.first, d1, d2) else {
                return fail(view.rows.first().copied().unwrap_or(0), "empty communication");
            };
            for &j in view.rows {
                let r = q.row(j);
                let Some(reference) = r[1][0].as_real() else { return fail(j, "empty communication") };
                for a in 0..2 {
                    let other = if view.stage == 1 { v1[a] } else { v1[1 - a] };
                    if !matches_pattern(r[a][0], reference, d1, v1[a], d2, w2[0])
                        || !matches_pattern(r[a][1], reference, d1, other, d2, w2[0])
                    {
                        return fail(j, "does not follow the stage pattern");
                    }
                }
            }
            Ok(Verdict::Accept)
        }
        NoSend(side) => {
            let d = side.dim();
            for a in 0..2 {
                let Some(first) = view.first[a][0].as_real() else {
                    return fail(view.rows.first().copied().unwrap_or(0), "empty communication");
                };
                let user = comp(first, d);
                for (j, c) in q.batch(a, 1).rows().iter().enumerate() {
                    if c.as_real().map(|x| comp(x, d)) == Some(user) {
                        return fail(j, "challenge user active in scenario 1");
                    }
                }
            }
            Ok(Verdict::Accept)
        }
        other => Err(PropError::WrongKind(other.name())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: u32, r: u32, m: &str) -> Communication {
        Communication::real(s, r, m)
    }

    fn batch(rows: Vec<Communication>) -> Batch {
        Batch::new(rows).unwrap()
    }

    #[test]
    fn names_roundtrip() {
        for atom in PropertyAtom::catalogue() {
            assert_eq!(atom.name().parse::<PropertyAtom>().unwrap(), atom);
            assert_eq!(atom.dual().dual(), atom);
        }
        assert_eq!("CR_3".parse::<PropertyAtom>().unwrap(), PropertyAtom::ChallengeRows(3));
        assert_eq!(PropertyAtom::Count(Side::Receiver).name(), "|U'|");
    }

    #[test]
    fn equal_sender_only_differs_in_sender() {
        let q = ChallengeBatchQuery::simple(batch(vec![c(0, 0, "a")]), batch(vec![c(1, 0, "a")])).unwrap();
        assert!(eval_simple(PropertyAtom::Equal(Varying::S), &q).unwrap().is_accept());
        assert!(!eval_simple(PropertyAtom::Equal(Varying::R), &q).unwrap().is_accept());
        let q = ChallengeBatchQuery::simple(batch(vec![c(0, 0, "a")]), batch(vec![c(1, 0, "b")])).unwrap();
        assert!(!eval_simple(PropertyAtom::Equal(Varying::S), &q).unwrap().is_accept());
        assert!(eval_simple(PropertyAtom::Equal(Varying::SM), &q).unwrap().is_accept());
    }

    #[test]
    fn empty_rows() {
        let q = ChallengeBatchQuery::simple(batch(vec![c(0, 0, "a")]), batch(vec![Communication::Empty])).unwrap();
        assert!(!eval_simple(PropertyAtom::Something, &q).unwrap().is_accept());
        assert!(eval_simple(PropertyAtom::Nothing, &q).unwrap().is_accept());
        assert!(eval_simple(PropertyAtom::EmptyOrEqual, &q).unwrap().is_accept());
        assert!(!eval_simple(PropertyAtom::MessageLength, &q).unwrap().is_accept());
    }

    #[test]
    fn partition_distinguishes_multi_batch() {
        // scenario 0: u0 sends m1 then m2; scenario 1: u0 sends m1, u1 sends m2
        let s0 = vec![BatchLinking::of(&batch(vec![c(0, 0, "1")])), BatchLinking::of(&batch(vec![c(0, 0, "2")]))];
        let s1 = vec![BatchLinking::of(&batch(vec![c(0, 0, "1")])), BatchLinking::of(&batch(vec![c(1, 0, "2")]))];
        let hist: Histories = [[s0.clone(), s1.clone()], [s0, s1]];
        assert!(!eval_activity(PropertyAtom::Partition(Side::Sender), &hist).unwrap().is_accept());
        assert!(!eval_activity(PropertyAtom::Histogram(Side::Sender), &hist).unwrap().is_accept());
        assert!(eval_activity(PropertyAtom::Count(Side::Sender), &hist).unwrap().is_accept());
        let single: Histories = [
            [vec![hist[0][0][1].clone()], vec![hist[0][1][1].clone()]],
            [vec![hist[0][0][1].clone()], vec![hist[0][1][1].clone()]],
        ];
        assert!(eval_activity(PropertyAtom::Histogram(Side::Sender), &single).unwrap().is_accept());
    }

    #[test]
    fn history_limit() {
        let h = vec![BatchLinking::default(); MAX_HISTORY + 1];
        assert_eq!(partition(&h, Side::Sender), Err(PropError::TooManyBatches(MAX_HISTORY + 1)));
    }

    #[test]
    fn fixed_pair_pattern() {
        // inst0: (u0,v0) vs (u0,v1); inst1: (u1,v1) vs (u1,v0)
        let q = ChallengeBatchQuery::instances(
            (batch(vec![c(0, 0, "a")]), batch(vec![c(0, 1, "a")])),
            (batch(vec![c(1, 1, "a")]), batch(vec![c(1, 0, "a")])),
        )
        .unwrap();
        let first = four_of(&q, 0);
        let view = ChallengeView { rows: &[0], first: &first, stage: 1, stage_one: None, partial: false };
        assert!(eval_complex(PropertyAtom::Fixed(Pair::SR), &q, view).unwrap().is_accept());
        assert!(!eval_complex(PropertyAtom::Fixed(Pair::SM), &q, view).unwrap().is_accept());
    }

    #[test]
    fn mixed_pair_needs_even_rows() {
        let q = ChallengeBatchQuery::simple(batch(vec![c(0, 0, "a")]), batch(vec![c(1, 0, "a")])).unwrap();
        let first = four_of(&q, 0);
        let view = ChallengeView { rows: &[0], first: &first, stage: 1, stage_one: None, partial: false };
        assert_eq!(
            eval_complex(PropertyAtom::Mixed(Pair::SM), &q, view),
            Err(PropError::OddChallengeRowCount("M_SM".into()))
        );
    }
}
