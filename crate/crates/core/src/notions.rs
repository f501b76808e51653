//! Named privacy notions as conjunctions of property atoms.
//!
//! Names use an ASCII form: `!O` and `!L` stand for an overlined O and L,
//! a trailing `'` marks the receiver side, `-` introduces an allowed leak,
//! `[..]` and `{..}` nest a second notion, and `+ATOM` appends an option.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ChallengeBatchQuery;
use crate::props::{CorruptBehavior, CorruptionMode, Pair, PropertyAtom, Side, Varying, Verdict};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unexpected {found} at position {pos} in {input:?}")]
    Syntax { input: String, pos: usize, found: String },
    #[error("unknown notion {0:?}")]
    UnknownNotion(String),
    #[error("unknown or repeated option {0:?}")]
    BadOption(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Impartial,
    Sender,
    Receiver,
    Loopix,
    Gelernter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Cluster {
    BothSideUnobservability,
    BothSideMessageUnlinkability,
    SenderReceiverLinkability,
    MessageObservability,
    ReceiverMessageLinkability,
    SenderMessageLinkability,
    ReceiverObservability,
    SenderObservability,
    External,
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Cluster::BothSideUnobservability => "both-side unobservability",
            Cluster::BothSideMessageUnlinkability => "both-side message unlinkability",
            Cluster::SenderReceiverLinkability => "sender-receiver linkability",
            Cluster::MessageObservability => "message observability",
            Cluster::ReceiverMessageLinkability => "receiver-message linkability",
            Cluster::SenderMessageLinkability => "sender-message linkability",
            Cluster::ReceiverObservability => "receiver observability",
            Cluster::SenderObservability => "sender observability",
            Cluster::External => "external",
        };
        f.write_str(s)
    }
}

/// Options layered on top of a base notion.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NotionOptions {
    pub session: bool,
    /// `None` means adaptive corruption.
    pub corruption: Option<CorruptionMode>,
    pub behavior: Option<CorruptBehavior>,
    pub challenge_rows: Option<u32>,
}

impl NotionOptions {
    pub fn atoms(&self) -> Vec<PropertyAtom> {
        let mut out = Vec::new();
        if self.session {
            out.push(PropertyAtom::Session);
        }
        out.extend(self.corruption.map(PropertyAtom::Corruption));
        out.extend(self.behavior.map(PropertyAtom::Behavior));
        out.extend(self.challenge_rows.map(PropertyAtom::ChallengeRows));
        out
    }

    pub fn is_empty(&self) -> bool {
        self.atoms().is_empty()
    }

    fn suffix(&self) -> String {
        self.atoms().iter().map(|a| format!("+{a}")).collect()
    }

    fn add(&mut self, atom: PropertyAtom, raw: &str) -> Result<(), ParseError> {
        let bad = || ParseError::BadOption(raw.to_string());
        match atom {
            PropertyAtom::Session if !self.session => self.session = true,
            PropertyAtom::Corruption(m) if self.corruption.is_none() => self.corruption = Some(m),
            PropertyAtom::Behavior(b) if self.behavior.is_none() => self.behavior = Some(b),
            PropertyAtom::ChallengeRows(k) if self.challenge_rows.is_none() && k > 0 => {
                self.challenge_rows = Some(k)
            }
            _ => return Err(bad()),
        }
        Ok(())
    }

    fn dual(&self) -> NotionOptions {
        NotionOptions {
            behavior: self.behavior.map(|b| match PropertyAtom::Behavior(b).dual() {
                PropertyAtom::Behavior(d) => d,
                _ => b,
            }),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotionSpec {
    /// Canonical name including options.
    pub name: String,
    /// Canonical name of the base notion.
    pub base: String,
    pub atoms: BTreeSet<PropertyAtom>,
    pub options: NotionOptions,
    pub family: Family,
    pub cluster: Cluster,
}

impl NotionSpec {
    /// Whether the challenger draws a random instance for this notion.
    pub fn uses_instances(&self) -> bool {
        self.atoms.iter().any(|a| a.uses_instances())
    }

    pub fn has_stages(&self) -> bool {
        self.atoms.iter().any(|a| matches!(a, PropertyAtom::Twice(_)))
    }

    pub fn has(&self, atom: PropertyAtom) -> bool {
        self.atoms.contains(&atom) || self.options.atoms().contains(&atom)
    }

    /// Base atoms followed by option atoms.
    pub fn all_atoms(&self) -> Vec<PropertyAtom> {
        self.atoms.iter().copied().chain(self.options.atoms()).collect()
    }

    pub fn with_options(&self, options: NotionOptions) -> NotionSpec {
        NotionSpec { name: format!("{}{}", self.base, options.suffix()), options, ..self.clone() }
    }
}

impl fmt::Display for NotionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

// ---------------------------------------------------------------------------
// Name syntax

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NameAst {
    Leaf { core: String, leak: Option<String>, primed: bool },
    Bracket(Box<NameAst>, Box<NameAst>),
    Brace(Box<NameAst>, Box<NameAst>),
}

impl fmt::Display for NameAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NameAst::Leaf { core, leak, primed } => {
                f.write_str(core)?;
                if let Some(l) = leak {
                    write!(f, "-{l}")?;
                }
                if *primed {
                    f.write_str("'")?;
                }
                Ok(())
            }
            NameAst::Bracket(a, b) => write!(f, "{a}[{b}]"),
            NameAst::Brace(a, b) => write!(f, "{a}{{{b}}}"),
        }
    }
}

struct Cursor<'a> {
    input: &'a str,
    chars: Vec<char>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(input: &'a str) -> Self {
        Cursor { input, chars: input.chars().collect(), pos: 0 }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn error(&self) -> ParseError {
        ParseError::Syntax {
            input: self.input.to_string(),
            pos: self.pos,
            found: self.peek().map_or("end of input".to_string(), |c| format!("{c:?}")),
        }
    }

    fn eat(&mut self, c: char) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error())
        }
    }

    fn word(&mut self) -> String {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_uppercase() || c.is_ascii_digit() || c == '_') {
            self.pos += 1;
        }
        self.chars[start..self.pos].iter().collect()
    }

    fn bar(&mut self, out: &mut String) -> Result<(), ParseError> {
        self.expect('!')?;
        match self.peek() {
            Some(c @ ('O' | 'L')) => {
                self.pos += 1;
                out.push('!');
                out.push(c);
                Ok(())
            }
            _ => Err(self.error()),
        }
    }

    fn core(&mut self) -> Result<String, ParseError> {
        let mut out = String::new();
        if self.eat('(') {
            let w = self.word();
            if w.is_empty() {
                return Err(self.error());
            }
            self.expect(')')?;
            out.push('(');
            out.push_str(&w);
            out.push(')');
            self.bar(&mut out)?;
            return Ok(out);
        }
        let w = self.word();
        out.push_str(&w);
        if self.peek() == Some('!') {
            self.bar(&mut out)?;
        } else if w.is_empty() {
            return Err(self.error());
        }
        Ok(out)
    }

    fn leak(&mut self) -> Result<String, ParseError> {
        let mut out = String::new();
        let bars = self.eat('|');
        let letter = self.peek().filter(|c| c.is_ascii_uppercase()).ok_or_else(|| self.error())?;
        self.pos += 1;
        if bars {
            out.push('|');
        }
        out.push(letter);
        if self.eat('\'') {
            out.push('\'');
        }
        if bars {
            self.expect('|')?;
            out.push('|');
        }
        Ok(out)
    }

    fn name(&mut self) -> Result<NameAst, ParseError> {
        let core = self.core()?;
        let leak = if self.eat('-') { Some(self.leak()?) } else { None };
        let primed = self.eat('\'');
        let leaf = NameAst::Leaf { core, leak, primed };
        if self.eat('[') {
            let inner = self.name()?;
            self.expect(']')?;
            Ok(NameAst::Bracket(Box::new(leaf), Box::new(inner)))
        } else if self.eat('{') {
            let inner = self.name()?;
            self.expect('}')?;
            Ok(NameAst::Brace(Box::new(leaf), Box::new(inner)))
        } else {
            Ok(leaf)
        }
    }
}

/// Parses the syntax of a name with options, without consulting the registry.
pub fn parse_syntax(input: &str) -> Result<(NameAst, Vec<String>), ParseError> {
    let mut cur = Cursor::new(input);
    let ast = cur.name()?;
    let mut options = Vec::new();
    while cur.eat('+') {
        let w = cur.word();
        if w.is_empty() {
            return Err(cur.error());
        }
        options.push(w);
    }
    if cur.peek().is_some() {
        return Err(cur.error());
    }
    Ok((ast, options))
}

// ---------------------------------------------------------------------------
// Registry

#[derive(Debug)]
pub struct Registry {
    notions: Vec<NotionSpec>,
    index: BTreeMap<String, usize>,
    aliases: BTreeMap<String, String>,
}

fn set(atoms: &[PropertyAtom]) -> BTreeSet<PropertyAtom> {
    atoms.iter().copied().collect()
}

fn side_letter(side: Side) -> &'static str {
    match side {
        Side::Sender => "S",
        Side::Receiver => "R",
    }
}

fn mark(side: Side) -> &'static str {
    match side {
        Side::Sender => "",
        Side::Receiver => "'",
    }
}

fn with_message(side: Side) -> (Varying, Pair) {
    match side {
        Side::Sender => (Varying::SM, Pair::SM),
        Side::Receiver => (Varying::RM, Pair::RM),
    }
}

fn equal(side: Side) -> PropertyAtom {
    PropertyAtom::Equal(match side {
        Side::Sender => Varying::S,
        Side::Receiver => Varying::R,
    })
}

/// The nine one-sided notions of a side, with their atoms.
pub fn side_set(side: Side) -> Vec<(String, BTreeSet<PropertyAtom>)> {
    use PropertyAtom::*;
    let l = side_letter(side);
    let p = mark(side);
    let base = [Something, equal(side)];
    let mk = |name: String, extra: &[PropertyAtom]| {
        let mut s = set(&base);
        s.extend(extra.iter().copied());
        (name, s)
    };
    vec![
        mk(format!("{l}!O"), &[]),
        mk(format!("{l}!O-|U{p}|"), &[Count(side)]),
        mk(format!("{l}!O-H{p}"), &[Histogram(side)]),
        mk(format!("{l}!O-P{p}"), &[Partition(side)]),
        mk(format!("{l}F!L"), &[Active(side)]),
        mk(format!("{l}F!L-H{p}"), &[Active(side), Histogram(side)]),
        mk(format!("{l}F!L-P{p}"), &[Active(side), Partition(side)]),
        mk(format!("{l}M!L"), &[Frequency(side)]),
        mk(format!("{l}M!L-P{p}"), &[Frequency(side), Partition(side)]),
    ]
}

impl Registry {
    fn build() -> Registry {
        use PropertyAtom::*;
        let mut reg = Registry { notions: Vec::new(), index: BTreeMap::new(), aliases: BTreeMap::new() };
        let mut add = |name: String, atoms: BTreeSet<PropertyAtom>, family: Family, cluster: Cluster| {
            reg.index.insert(name.clone(), reg.notions.len());
            reg.notions.push(NotionSpec {
                name: name.clone(),
                base: name,
                atoms,
                options: NotionOptions::default(),
                family,
                cluster,
            });
        };

        use Cluster::*;
        let imp = Family::Impartial;
        add("C!O".into(), set(&[Nothing]), imp, BothSideUnobservability);
        add("!O".into(), set(&[Something]), imp, BothSideUnobservability);
        add(
            "M!O[M!L]".into(),
            set(&[Something, Frequency(Side::Sender), Frequency(Side::Receiver)]),
            imp,
            BothSideMessageUnlinkability,
        );
        add("M!O".into(), set(&[Something, Equal(Varying::M)]), imp, SenderReceiverLinkability);
        add("M!O-|M|".into(), set(&[Something, Equal(Varying::M), MessageLength]), imp, SenderReceiverLinkability);
        add("(SR)!O".into(), set(&[Something, Equal(Varying::SR), Fixed(Pair::SR)]), imp, MessageObservability);
        add("(SR)!L".into(), set(&[Something, Equal(Varying::SR), Mixed(Pair::SR)]), imp, MessageObservability);

        for side in [Side::Sender, Side::Receiver] {
            let l = side_letter(side);
            let family = if side == Side::Sender { Family::Sender } else { Family::Receiver };
            let (linkability, observability) = match side {
                Side::Sender => (ReceiverMessageLinkability, ReceiverObservability),
                Side::Receiver => (SenderMessageLinkability, SenderObservability),
            };
            for (name, atoms) in side_set(side) {
                add(name, atoms, family, linkability);
            }
            add(format!("(2{l})!L"), set(&[Something, equal(side), Twice(side)]), family, linkability);
            let (vm, pm) = with_message(side);
            add(format!("{l}!O[M!O]"), set(&[Something, Equal(vm)]), family, observability);
            add(format!("{l}!O[M!O-|M|]"), set(&[Something, Equal(vm), MessageLength]), family, observability);
            add(format!("({l}M)!O"), set(&[Something, Equal(vm), Fixed(pm)]), family, observability);
            add(format!("({l}M)!L"), set(&[Something, Equal(vm), Mixed(pm)]), family, observability);
            let other = side.other();
            for (inner, atoms) in side_set(other) {
                let name = format!("{l}!O{{{inner}}}");
                let mut atoms = atoms;
                atoms.remove(&equal(other));
                if atoms == set(&[Something]) {
                    continue;
                }
                add(name, atoms, family, BothSideMessageUnlinkability);
            }
        }

        add("LS!O".into(), set(&[EmptyOrEqual]), Family::Loopix, External);
        add("LR!O".into(), set(&[EmptyOrEqual]), Family::Loopix, External);
        add("S!O'".into(), set(&[NoSend(Side::Sender), Equal(Varying::S)]), Family::Loopix, External);
        add("R!O'".into(), set(&[NoSend(Side::Receiver), Equal(Varying::R)]), Family::Loopix, External);
        add("RHT_SA".into(), set(&[Something, Permutation]), Family::Gelernter, External);
        add("RHT_S!L".into(), set(&[Something, Frequency(Side::Sender), Permutation]), Family::Gelernter, External);

        reg.aliases.insert("S!O{R!O}".into(), "!O".into());
        reg.aliases.insert("R!O{S!O}".into(), "!O".into());
        reg
    }

    pub fn all(&self) -> &[NotionSpec] {
        &self.notions
    }

    pub fn aliases(&self) -> &BTreeMap<String, String> {
        &self.aliases
    }

    pub fn get(&self, base: &str) -> Option<&NotionSpec> {
        let key = self.aliases.get(base).map(String::as_str).unwrap_or(base);
        self.index.get(key).map(|&i| &self.notions[i])
    }

    /// Notions of the sender and impartial families, in registry order.
    pub fn of_family(&self, family: Family) -> impl Iterator<Item = &NotionSpec> {
        self.notions.iter().filter(move |n| n.family == family)
    }
}

pub fn registry() -> &'static Registry {
    static REG: OnceLock<Registry> = OnceLock::new();
    REG.get_or_init(Registry::build)
}

/// Parses a notion name, resolving aliases to their canonical notion.
pub fn parse(input: &str) -> Result<NotionSpec, ParseError> {
    let (ast, raw_options) = parse_syntax(input)?;
    let base = ast.to_string();
    let spec = registry().get(&base).ok_or_else(|| ParseError::UnknownNotion(base.clone()))?;
    let mut options = NotionOptions::default();
    for raw in &raw_options {
        let atom: PropertyAtom = raw.parse().map_err(|_| ParseError::BadOption(raw.clone()))?;
        options.add(atom, raw)?;
    }
    Ok(spec.with_options(options))
}

/// Canonical name of a notion.
pub fn print(notion: &NotionSpec) -> String {
    notion.name.clone()
}

/// Mirror image of a notion with sender and receiver roles exchanged.
pub fn dual(notion: &NotionSpec) -> NotionSpec {
    let atoms: BTreeSet<PropertyAtom> = notion.atoms.iter().map(|a| a.dual()).collect();
    let same_family = |n: &&NotionSpec| match notion.family {
        Family::Sender => n.family == Family::Receiver,
        Family::Receiver => n.family == Family::Sender,
        other => n.family == other,
    };
    let base = registry()
        .all()
        .iter()
        .filter(same_family)
        .find(|n| n.atoms == atoms && (n.atoms != notion.atoms || n.base == notion.base))
        .cloned()
        .unwrap_or_else(|| notion.clone());
    base.with_options(notion.options.dual())
}

/// Validates one query against a fresh game for `notion`.
pub fn validate_query(notion: &NotionSpec, q: &ChallengeBatchQuery) -> Verdict {
    crate::challenger::Evaluator::new(notion.clone(), crate::challenger::GameConfig::default()).check_fresh(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_every_registered_name() {
        for n in registry().all() {
            let parsed = parse(&n.name).unwrap();
            assert_eq!(print(&parsed), n.name);
            assert_eq!(parsed.atoms, n.atoms);
        }
    }

    #[test]
    fn registry_size() {
        // 7 impartial, 2 x (9 + 1 + 4 + 8) one-sided, 6 external
        assert_eq!(registry().all().len(), 7 + 2 * 22 + 6);
    }

    #[test]
    fn examples() {
        use PropertyAtom::*;
        assert_eq!(parse("SM!L").unwrap().atoms, set(&[Something, Equal(Varying::S), Frequency(Side::Sender)]));
        assert_eq!(
            parse("S!O{RF!L-H'}").unwrap().atoms,
            set(&[Something, Active(Side::Receiver), Histogram(Side::Receiver)])
        );
        assert_eq!(parse("S!O{R!O}").unwrap().name, "!O");
        assert_eq!(
            parse("(SM)!L").unwrap().atoms,
            set(&[Something, Equal(Varying::SM), Mixed(Pair::SM)])
        );
    }

    #[test]
    fn options() {
        let n = parse("S!O+SESS+CORR_STATIC+CR_1").unwrap();
        assert_eq!(n.name, "S!O+SESS+CORR_STATIC+CR_1");
        assert_eq!(n.options.challenge_rows, Some(1));
        assert!(matches!(parse("S!O+CR_1+CR_2"), Err(ParseError::BadOption(_))));
        assert!(matches!(parse("S!O+BOGUS"), Err(ParseError::BadOption(_))));
    }

    #[test]
    fn malformed() {
        assert!(matches!(parse("S!X"), Err(ParseError::Syntax { pos: 2, .. })));
        assert!(matches!(parse("S!O{R!O"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("S!O-|U"), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse(""), Err(ParseError::Syntax { .. })));
        assert!(matches!(parse("Q!O"), Err(ParseError::UnknownNotion(_))));
    }

    #[test]
    fn duals() {
        let pairs = [
            ("S!O", "R!O"),
            ("SM!L-P", "RM!L-P'"),
            ("(SM)!O", "(RM)!O"),
            ("S!O{RF!L-H'}", "R!O{SF!L-H}"),
            ("(2S)!L", "(2R)!L"),
            ("S!O[M!O-|M|]", "R!O[M!O-|M|]"),
            ("M!O", "M!O"),
            ("(SR)!L", "(SR)!L"),
        ];
        for (a, b) in pairs {
            assert_eq!(dual(&parse(a).unwrap()).name, b, "dual of {a}");
            assert_eq!(dual(&dual(&parse(a).unwrap())).name, a);
        }
    }
}
