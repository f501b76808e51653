//! Implication graph over the core notions and the witnesses separating them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversaries::{observable_distinguisher, AttackError, AttackScript, Translation};
use crate::challenger::GameConfig;
use crate::harness::{exhaustive_safety, twisted_pair_attack, twisted_pair_safe, Bounds, HarnessError, Safety};
use crate::notions::{self, Cluster, Family, NotionSpec, ParseError};
use crate::props::{Dim, Pair, PropertyAtom, Side, Varying};
use crate::protocols::{LeakageFunction, ProtocolSpec};

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0} is not part of the hierarchy")]
    NotInGraph(String),
}

#[derive(Debug, Error)]
pub enum WitnessError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("no distinguishing query for {0} within bounds")]
    NoAttack(String),
}

// ---------------------------------------------------------------------------
// Rule base

/// Everything an atom set guarantees under the entailment rules.
pub fn closure(atoms: &BTreeSet<PropertyAtom>) -> BTreeSet<PropertyAtom> {
    use PropertyAtom::*;
    let mut c = atoms.clone();
    loop {
        let mut next = c.clone();
        for &a in &c {
            match a {
                Equal(v) => {
                    next.extend([Something, Nothing]);
                    for w in Varying::all() {
                        if v.dims().iter().all(|d| w.varies(*d)) {
                            next.insert(Equal(w));
                        }
                    }
                    for side in [Side::Sender, Side::Receiver] {
                        if !v.varies(side.dim()) {
                            next.extend([Active(side), Frequency(side), Count(side), Histogram(side)]);
                            if !v.varies(Dim::M) {
                                next.insert(Partition(side));
                            }
                        }
                    }
                    if !v.varies(Dim::M) {
                        next.insert(MessageLength);
                    }
                }
                Frequency(s) => next.extend([Active(s), Histogram(s)]),
                Active(s) | Histogram(s) => {
                    next.insert(Count(s));
                }
                Partition(s) => {
                    next.insert(Histogram(s));
                    if s == Side::Sender {
                        next.insert(Permutation);
                    }
                }
                Something => {
                    next.insert(Nothing);
                }
                _ => {}
            }
        }
        if next == c {
            return c;
        }
        c = next;
    }
}

/// Whether `x1` implies `x2` by entailment alone: every atom of `x1` follows from `x2`.
pub fn entails(x1: &NotionSpec, x2: &NotionSpec) -> bool {
    x1.atoms.is_subset(&closure(&x2.atoms))
}

// ---------------------------------------------------------------------------
// Edges

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EdgeKind {
    /// The target's atoms literally contain the source's.
    Definitional,
    Entailment,
    /// Proved by translating attacks; the advantage bound doubles.
    Transform { advantage_factor: u32, translation: Translation },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyEdge {
    pub from: String,
    pub to: String,
    pub kind: EdgeKind,
    pub proof_ref: String,
}

/// Edges that need an attack translation rather than entailment.
pub fn cyan_edges() -> Vec<HierarchyEdge> {
    use Translation::*;
    let fix = |cross| InstanceFix { cross };
    [
        ("R!O", "(SR)!O", fix(false)),
        ("S!O", "(SR)!O", fix(true)),
        ("S!O", "(SM)!O", fix(true)),
        ("R!O", "(RM)!O", fix(true)),
        ("M!O", "(SM)!O", fix(false)),
        ("M!O", "(RM)!O", fix(false)),
        ("M!O", "(SM)!L", fix(false)),
        ("M!O", "(RM)!L", fix(false)),
        ("SM!L", "(SM)!L", RowDuplicate),
        ("RM!L", "(RM)!L", RowDuplicate),
        ("SM!L-P", "(SR)!L", RowDuplicate),
        // the receiver side keeps scenario 1 unswapped: only receivers differ then
        ("RM!L-P'", "(SR)!L", fix(false)),
    ]
    .into_iter()
    .map(|(from, to, translation)| HierarchyEdge {
        from: from.into(),
        to: to.into(),
        proof_ref: match translation {
            RowDuplicate => "fix the instance and swap paired rows in scenario 1".into(),
            _ => "fix the instance of every challenge".into(),
        },
        kind: EdgeKind::Transform { advantage_factor: 2, translation },
    })
    .collect()
}

/// Notions from other frameworks and the core notion each one equals.
pub fn equivalences() -> Vec<(String, String)> {
    [
        ("LS!O", "C!O"),
        ("LR!O", "C!O"),
        ("S!O'", "S!O"),
        ("R!O'", "R!O"),
        ("RHT_SA", "S!O-P"),
        ("RHT_S!L", "SM!L-P"),
    ]
    .into_iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

// ---------------------------------------------------------------------------
// Witnesses

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeparationWitness {
    pub label: String,
    pub x1: String,
    pub x2: String,
    /// Notion the unmodified protocol is assumed to achieve.
    pub base: String,
    pub protocol: ProtocolSpec,
    pub leaks: Vec<LeakageFunction>,
    /// Tighter search limits for the safety check, where the full desk bounds are too slow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<SearchCap>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCap {
    pub max_batches: usize,
    pub max_batch_len: usize,
}

impl SearchCap {
    pub fn apply(&self, bounds: &Bounds) -> Bounds {
        Bounds {
            max_batches: bounds.max_batches.min(self.max_batches),
            max_batch_len: bounds.max_batch_len.min(self.max_batch_len),
            ..bounds.clone()
        }
    }
}

fn pair_of(protocol: &ProtocolSpec) -> Option<Pair> {
    match protocol {
        ProtocolSpec::TwistedPair { pair } => match pair.as_str() {
            "SR" => Some(Pair::SR),
            "SM" => Some(Pair::SM),
            "RM" => Some(Pair::RM),
            _ => None,
        },
        ProtocolSpec::Leaky { .. } => None,
    }
}

impl SeparationWitness {
    /// Whether the leaky protocol is invariant for `x1` within `bounds`.
    pub fn x1_safe(&self, bounds: &Bounds) -> Result<bool, WitnessError> {
        let x1 = notions::parse(&self.x1)?;
        Ok(match pair_of(&self.protocol) {
            // The table bit on a repeated row only cancels out when the copies
            // draw independent instance bits, i.e. sit in separate challenges.
            Some(pair) if x1.options.challenge_rows.is_none() => {
                twisted_pair_safe(&notions::parse(&format!("{}+CR_1", self.x1))?, pair)
            }
            Some(pair) => twisted_pair_safe(&x1, pair),
            None => {
                let bounds = self.cap.map_or_else(|| bounds.clone(), |c| c.apply(bounds));
                exhaustive_safety(&x1, &self.leaks, &bounds)?.is_safe()
            }
        })
    }

    /// A deterministic attack on `x2`, taken from the oracle or the twisted-pair table.
    pub fn attack(&self, bounds: &Bounds) -> Result<AttackScript, WitnessError> {
        let x2 = notions::parse(&self.x2)?;
        if let Some(pair) = pair_of(&self.protocol) {
            return twisted_pair_attack(&x2, pair).ok_or_else(|| WitnessError::NoAttack(self.x2.clone()));
        }
        match exhaustive_safety(&x2, &self.leaks, bounds)? {
            Safety::Broken { steps, certain: true } => {
                Ok(observable_distinguisher(&x2, &self.protocol, steps, GameConfig::default())?)
            }
            _ => Err(WitnessError::NoAttack(self.x2.clone())),
        }
    }

    /// The same separation with senders and receivers exchanged.
    pub fn dual(&self) -> SeparationWitness {
        let d = |n: &str| notions::parse(n).map(|s| notions::dual(&s).name).unwrap_or_else(|_| n.to_string());
        let mut leaks: Vec<LeakageFunction> = self.leaks.iter().map(|l| l.dual()).collect();
        leaks.sort();
        let protocol = match pair_of(&self.protocol) {
            Some(Pair::SM) => ProtocolSpec::TwistedPair { pair: "RM".into() },
            Some(Pair::RM) => ProtocolSpec::TwistedPair { pair: "SM".into() },
            Some(Pair::SR) => self.protocol.clone(),
            None => ProtocolSpec::leaky(&leaks),
        };
        SeparationWitness {
            label: format!("{}'", self.label),
            x1: d(&self.x1),
            x2: d(&self.x2),
            base: d(&self.base),
            protocol,
            leaks,
            cap: self.cap,
        }
    }

    /// Whether the witness comes from the hand-written attack tables.
    pub fn is_curated(&self) -> bool {
        !self.label.starts_with("PA") && !self.label.starts_with("PB")
    }
}

fn leaky(label: &str, x1: &str, x2: &str, base: &str, leaks: &[LeakageFunction]) -> SeparationWitness {
    SeparationWitness {
        label: label.into(),
        x1: x1.into(),
        x2: x2.into(),
        base: base.into(),
        protocol: ProtocolSpec::leaky(leaks),
        leaks: leaks.to_vec(),
        cap: None,
    }
}

fn twisted(label: &str, x1: &str, x2: &str, pair: &str) -> SeparationWitness {
    SeparationWitness {
        label: label.into(),
        x1: x1.into(),
        x2: x2.into(),
        base: x1.into(),
        protocol: ProtocolSpec::TwistedPair { pair: pair.into() },
        leaks: Vec::new(),
        cap: None,
    }
}

fn curated() -> Vec<SeparationWitness> {
    use LeakageFunction::*;
    use Side::{Receiver as R, Sender as S};
    let mut out = vec![
        leaky("P1", "!O", "C!O", "!O", &[CommCount]),
        leaky("P2", "M!O[M!L]", "(SR)!O", "M!O[M!L]", &[Frequencies(S), Frequencies(R)]),
        leaky("P3", "M!O", "(SR)!L", "M!O", &[SenderReceiverPairs]),
        leaky("P4", "S!O{R!O-|U'|}", "(2R)!L", "S!O{R!O-|U'|}", &[UserCount(R)]),
        leaky("P6", "S!O{R!O-P'}", "M!O-|M|", "S!O{R!O-P'}", &[MessageContents]),
        leaky("P24", "S!O{R!O-P'}", "(RM)!O", "S!O{R!O-P'}", &[UserCount(R), MessageContents]),
        leaky("P9", "S!O{R!O-P'}", "(RM)!L", "S!O{R!O-P'}", &[Partition(R)]),
        leaky("P5", "S!O[M!O]", "M!O[M!L]", "S!O[M!O]", &[FirstReceiver]),
        leaky("P8", "S!O[M!O]", "RM!L-P'", "S!O[M!O]", &[FirstReceiver]),
        leaky("P17", "S!O[M!O-|M|]", "(RM)!O", "S!O[M!O-|M|]", &[UserCount(R), MessageLengths]),
        leaky("P18", "S!O[M!O-|M|]", "(RM)!L", "S!O[M!O-|M|]", &[ReceiverLengthPairs]),
        leaky("P7", "S!O-|U|", "(SR)!O", "S!O-|U|", &[UserCount(R), UserCount(S)]),
        leaky("P19", "S!O-|U|", "(SM)!O", "S!O-|U|", &[UserCount(S), MessageLengths]),
        leaky("P20", "S!O-P", "(SM)!L", "S!O-P", &[Partition(S)]),
    ];
    // Leaks of the first communication: a single batch carries them, and
    // the (SM)!L row space is too wide for three-row batches.
    let first = |len| Some(SearchCap { max_batches: 1, max_batch_len: len });
    let mut k = 10;
    for (x1, len) in [("(2S)!L", 3), ("(SM)!O", 3), ("(SM)!L", 2)] {
        for x2 in ["(SR)!O", "(SR)!L"] {
            let mut w = leaky(&format!("P{k}"), x1, x2, "C!O", &[FirstSenderReceiver]);
            w.cap = first(len);
            out.push(w);
            k += 1;
        }
    }
    for (label, x2) in [("P21", "(SM)!O"), ("P22", "(SM)!L")] {
        let mut w = leaky(label, "(2S)!L", x2, "C!O", &[FirstSenderLength]);
        w.cap = first(3);
        out.push(w);
    }
    out.push(twisted("P16", "(SR)!O", "(SR)!L", "SR"));
    out.push(twisted("P23", "(SM)!O", "(SM)!L", "SM"));
    for w in &mut out {
        w.leaks.sort();
    }
    out
}

/// Activity atoms of one side in the order a generated witness prefers them as leaks.
fn leak_for(atom: PropertyAtom) -> Option<LeakageFunction> {
    use PropertyAtom::*;
    Some(match atom {
        Partition(s) => LeakageFunction::Partition(s),
        Histogram(s) => LeakageFunction::Histogram(s),
        Frequency(s) => LeakageFunction::Frequencies(s),
        Active(s) => LeakageFunction::Active(s),
        Count(s) => LeakageFunction::UserCount(s),
        _ => return None,
    })
}

fn activity_leak(x1: &NotionSpec, x2: &NotionSpec, side: Side) -> Option<LeakageFunction> {
    use PropertyAtom::*;
    let (c1, c2) = (closure(&x1.atoms), closure(&x2.atoms));
    [Partition(side), Histogram(side), Frequency(side), Active(side), Count(side)]
        .into_iter()
        .find(|a| c1.contains(a) && !c2.contains(a))
        .and_then(leak_for)
}

/// Witnesses between one-sided notions: the weaker notion fixes an activity
/// property the stronger one leaves free, so leaking it separates them.
fn generated() -> Vec<SeparationWitness> {
    let mut out = Vec::new();
    let parse = |n: &str| notions::parse(n).expect("registered");
    let senders: Vec<String> = notions::side_set(Side::Sender).into_iter().map(|(n, _)| n).collect();
    for a in &senders {
        for b in &senders {
            let (x1, x2) = (parse(a), parse(b));
            if a != b && !entails(&x1, &x2) {
                if let Some(l) = activity_leak(&x1, &x2, Side::Sender) {
                    out.push(leaky("PB", a, b, a, &[l]));
                }
            }
        }
    }
    for (a, _) in notions::side_set(Side::Receiver) {
        let outer = format!("S!O{{{a}}}");
        let Ok(x1) = notions::parse(&outer) else { continue };
        if x1.name != outer {
            continue;
        }
        for (b, _) in notions::side_set(Side::Receiver) {
            let (inner, x2) = (parse(&a), parse(&b));
            if !entails(&inner, &x2) {
                if let Some(l) = activity_leak(&inner, &x2, Side::Receiver) {
                    out.push(leaky("PA", &outer, &b, &outer, &[l]));
                }
            }
        }
    }
    out
}

/// Curated and generated witnesses followed by their mirror images.
pub fn separation_witnesses() -> Vec<SeparationWitness> {
    let mut out = curated();
    out.extend(generated());
    let duals: Vec<SeparationWitness> = out.iter().map(SeparationWitness::dual).collect();
    for d in duals {
        if !out.iter().any(|w| w.x1 == d.x1 && w.x2 == d.x2) {
            out.push(d);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Graph

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "answer", rename_all = "snake_case")]
pub enum Implication {
    /// Notion names from `x1` to `x2` along graph edges.
    Yes { path: Vec<String> },
    No { witness: Box<SeparationWitness> },
    Unknown,
}

#[derive(Debug)]
pub struct HierarchyGraph {
    pub nodes: Vec<NotionSpec>,
    pub edges: Vec<HierarchyEdge>,
    pub separations: Vec<SeparationWitness>,
    pub equivalences: Vec<(String, String)>,
    index: BTreeMap<String, usize>,
    reach: Vec<Vec<bool>>,
    preferred: BTreeMap<(String, String), String>,
}

const TABLE: &str = include_str!("../data/completeness.tsv");

/// Rows of the reference table: row notion, column notion, cell.
pub fn reference_table() -> Vec<(String, String, String)> {
    TABLE
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let mut it = l.split('\t');
            Some((it.next()?.to_string(), it.next()?.to_string(), it.next()?.to_string()))
        })
        .collect()
}

/// `(P8)` and `PA*` name the witnesses `P8` and `PA`.
fn cell_label(cell: &str) -> Option<String> {
    let t = cell.trim_matches(|c| c == '(' || c == ')').replace('*', "");
    t.starts_with('P').then_some(t)
}

impl HierarchyGraph {
    pub fn build() -> HierarchyGraph {
        let nodes: Vec<NotionSpec> =
            notions::registry().all().iter().filter(|n| n.cluster != Cluster::External).cloned().collect();
        let index: BTreeMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.clone(), i)).collect();
        let n = nodes.len();
        let ent: Vec<Vec<bool>> =
            (0..n).map(|i| (0..n).map(|j| i == j || entails(&nodes[i], &nodes[j])).collect()).collect();

        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j || !ent[i][j] || ent[j][i] {
                    continue;
                }
                let covered = (0..n).any(|k| k != i && k != j && ent[i][k] && ent[k][j] && !ent[k][i] && !ent[j][k]);
                if covered {
                    continue;
                }
                let (a, b) = (&nodes[i], &nodes[j]);
                let kind = if a.atoms.is_subset(&b.atoms) { EdgeKind::Definitional } else { EdgeKind::Entailment };
                let proof_ref = match kind {
                    EdgeKind::Definitional => "atom subset".to_string(),
                    _ => {
                        let missing: Vec<String> = a.atoms.difference(&b.atoms).map(|x| x.to_string()).collect();
                        format!("entailed: {}", missing.join(", "))
                    }
                };
                edges.push(HierarchyEdge { from: a.name.clone(), to: b.name.clone(), kind, proof_ref });
            }
        }
        for e in cyan_edges() {
            if !ent[index[&e.from]][index[&e.to]] {
                edges.push(e);
            }
        }

        let mut reach = ent;
        for e in &edges {
            reach[index[&e.from]][index[&e.to]] = true;
        }
        for k in 0..n {
            for i in 0..n {
                if reach[i][k] {
                    for j in 0..n {
                        if reach[k][j] {
                            reach[i][j] = true;
                        }
                    }
                }
            }
        }

        let preferred = reference_table()
            .into_iter()
            .filter_map(|(r, c, cell)| Some(((r, c), cell_label(&cell)?)))
            .collect();

        HierarchyGraph {
            nodes,
            edges,
            separations: separation_witnesses(),
            equivalences: equivalences(),
            index,
            reach,
            preferred,
        }
    }

    /// Canonical core name of a notion, following aliases and equivalences.
    pub fn resolve(&self, name: &str) -> Result<String, HierarchyError> {
        let spec = notions::parse(name)?;
        let base = self.equivalences.iter().find(|(a, _)| *a == spec.base).map_or(spec.base.clone(), |(_, b)| b.clone());
        if self.index.contains_key(&base) {
            Ok(base)
        } else {
            Err(HierarchyError::NotInGraph(base))
        }
    }

    fn idx(&self, name: &str) -> Result<usize, HierarchyError> {
        let r = self.resolve(name)?;
        Ok(self.index[&r])
    }

    /// Whether `x1` implies `x2` through the graph.
    pub fn reaches(&self, x1: &str, x2: &str) -> Result<bool, HierarchyError> {
        Ok(self.reach[self.idx(x1)?][self.idx(x2)?])
    }

    fn path(&self, from: usize, to: usize) -> Vec<String> {
        let mut prev: Vec<Option<usize>> = vec![None; self.nodes.len()];
        let mut queue = VecDeque::from([from]);
        let mut seen = vec![false; self.nodes.len()];
        seen[from] = true;
        while let Some(u) = queue.pop_front() {
            if u == to {
                break;
            }
            for e in self.edges.iter().filter(|e| self.index[&e.from] == u) {
                let v = self.index[&e.to];
                if !seen[v] {
                    seen[v] = true;
                    prev[v] = Some(u);
                    queue.push_back(v);
                }
            }
        }
        let mut out = vec![self.nodes[to].name.clone()];
        let mut cur = to;
        while let Some(p) = prev[cur] {
            out.push(self.nodes[p].name.clone());
            cur = p;
        }
        out.reverse();
        out
    }

    /// Witnesses that rule out `x1 ⟹ x2`: a witness `(y1, y2)` applies when
    /// `y1 ⟹ x1` and `x2 ⟹ y2`.
    pub fn applicable_witnesses(&self, x1: &str, x2: &str) -> Result<Vec<&SeparationWitness>, HierarchyError> {
        let (i, j) = (self.idx(x1)?, self.idx(x2)?);
        Ok(self
            .separations
            .iter()
            .filter(|w| {
                let (a, b) = (self.index[&w.x1], self.index[&w.x2]);
                self.reach[a][i] && self.reach[j][b]
            })
            .collect())
    }

    pub fn implies(&self, x1: &str, x2: &str) -> Result<Implication, HierarchyError> {
        let (i, j) = (self.idx(x1)?, self.idx(x2)?);
        if self.reach[i][j] {
            return Ok(Implication::Yes { path: self.path(i, j) });
        }
        let candidates = self.applicable_witnesses(x1, x2)?;
        let key = (self.nodes[i].name.clone(), self.nodes[j].name.clone());
        let label = self.preferred.get(&key);
        let chosen = candidates
            .iter()
            .find(|w| Some(&w.label) == label)
            .or_else(|| candidates.iter().find(|w| w.x1 == key.0 && w.x2 == key.1))
            .or_else(|| candidates.first());
        Ok(match chosen {
            Some(w) => Implication::No { witness: Box::new((*w).clone()) },
            None => Implication::Unknown,
        })
    }

    /// Witnesses whose pair the graph nevertheless connects.
    pub fn inconsistencies(&self) -> Vec<&SeparationWitness> {
        self.separations.iter().filter(|w| self.reach[self.index[&w.x1]][self.index[&w.x2]]).collect()
    }

    /// Compares every classified cell of the reference table with the graph.
    pub fn check_table(&self) -> TableReport {
        let mut rows = Vec::new();
        for (r, c, cell) in reference_table() {
            let expected_yes = match cell.as_str() {
                "=>" | "=" => Some(true),
                "?" => None,
                _ => Some(false),
            };
            let derived = match self.implies(&r, &c) {
                Ok(Implication::Yes { .. }) if r == c => "=".to_string(),
                Ok(Implication::Yes { .. }) => "=>".to_string(),
                Ok(Implication::No { witness }) => witness.label,
                Ok(Implication::Unknown) => "unknown".to_string(),
                Err(e) => format!("error: {e}"),
            };
            let derived_yes = derived == "=" || derived == "=>";
            let status = match expected_yes {
                None => CellStatus::Skipped,
                Some(_) if derived == "unknown" || derived.starts_with("error") => CellStatus::Mismatch,
                Some(e) if e == derived_yes => CellStatus::Match,
                Some(_) => CellStatus::Mismatch,
            };
            rows.push(TableCell { pair: [r, c], expected: cell, derived, status });
        }
        TableReport { rows }
    }

    /// Graphviz rendering; `family` keeps only nodes of that family.
    pub fn export_dot(&self, family: Option<Family>) -> String {
        let keep = |name: &str| {
            let n = &self.nodes[self.index[name]];
            family.map_or(true, |f| n.family == f)
        };
        let mut out = String::from("digraph hierarchy {\n  rankdir=BT;\n  node [shape=box, fontname=\"Helvetica\"];\n");
        let mut clusters: BTreeMap<Cluster, Vec<&NotionSpec>> = BTreeMap::new();
        for n in self.nodes.iter().filter(|n| keep(&n.name)) {
            clusters.entry(n.cluster).or_default().push(n);
        }
        for (k, (cluster, members)) in clusters.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_{k} {{\n    label=\"{cluster}\";");
            for n in members {
                let _ = writeln!(out, "    \"{}\";", escape(&n.name));
            }
            out.push_str("  }\n");
        }
        for e in self.edges.iter().filter(|e| keep(&e.from) && keep(&e.to)) {
            let style = match e.kind {
                EdgeKind::Definitional => "style=solid",
                EdgeKind::Entailment => "style=dashed",
                EdgeKind::Transform { .. } => "style=bold, color=cyan3",
            };
            let _ = writeln!(out, "  \"{}\" -> \"{}\" [{style}];", escape(&e.from), escape(&e.to));
        }
        out.push_str("}\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Match,
    Mismatch,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableCell {
    pub pair: [String; 2],
    pub expected: String,
    pub derived: String,
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableReport {
    pub rows: Vec<TableCell>,
}

impl TableReport {
    pub fn mismatches(&self) -> Vec<&TableCell> {
        self.rows.iter().filter(|r| r.status == CellStatus::Mismatch).collect()
    }

    /// Classified cells whose witness label also agrees with the table.
    pub fn label_agreement(&self) -> (usize, usize) {
        let classified: Vec<&TableCell> =
            self.rows.iter().filter(|r| r.status == CellStatus::Match && cell_label(&r.expected).is_some()).collect();
        let same = classified.iter().filter(|r| cell_label(&r.expected).as_deref() == Some(r.derived.as_str())).count();
        (same, classified.len())
    }
}

pub fn graph() -> &'static HierarchyGraph {
    static G: OnceLock<HierarchyGraph> = OnceLock::new();
    G.get_or_init(HierarchyGraph::build)
}

pub fn implies(x1: &str, x2: &str) -> Result<Implication, HierarchyError> {
    graph().implies(x1, x2)
}

pub fn derive_entailment_edges() -> Vec<HierarchyEdge> {
    graph().edges.iter().filter(|e| !matches!(e.kind, EdgeKind::Transform { .. })).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yes(a: &str, b: &str) -> bool {
        matches!(implies(a, b).unwrap(), Implication::Yes { .. })
    }

    #[test]
    fn rule_base_examples() {
        assert!(yes("M!O[M!L]", "SM!L"));
        assert!(yes("S!O{RM!L-P'}", "S!O"));
        assert!(!yes("SM!L", "SF!L"));
        assert!(yes("C!O", "!O"));
        assert!(yes("S!O", "S!O"));
    }

    #[test]
    fn no_answers_carry_witnesses() {
        let Implication::No { witness } = implies("!O", "C!O").unwrap() else { panic!() };
        assert_eq!(witness.label, "P1");
        assert_eq!(witness.leaks, vec![LeakageFunction::CommCount]);
        let Implication::No { witness } = implies("S!O", "R!O").unwrap() else { panic!() };
        assert_eq!(witness.label, "P8");
        assert_eq!(witness.leaks, vec![LeakageFunction::FirstReceiver]);
    }

    #[test]
    fn witnesses_never_contradict_edges() {
        let g = graph();
        let bad: Vec<_> = g.inconsistencies().iter().map(|w| (&w.label, &w.x1, &w.x2)).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }

    #[test]
    fn every_registered_core_pair_is_classified() {
        let g = graph();
        for a in &g.nodes {
            for b in &g.nodes {
                assert_ne!(g.implies(&a.name, &b.name).unwrap(), Implication::Unknown, "{} {}", a.name, b.name);
            }
        }
    }

    #[test]
    fn equivalent_names_resolve() {
        assert!(yes("LS!O", "!O"));
        assert!(yes("RHT_SA", "S!O-P"));
        assert!(yes("S!O-P", "RHT_SA"));
    }

    #[test]
    fn dot_filter() {
        let dot = graph().export_dot(Some(Family::Sender));
        assert!(dot.contains("\"SM!L\""));
        assert!(!dot.contains("\"RM!L\""));
        assert!(!dot.contains("\"C!O\""));
        let full = graph().export_dot(None);
        assert!(full.contains("cyan3"));
    }
}
