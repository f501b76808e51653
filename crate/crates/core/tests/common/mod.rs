#![allow(dead_code)]

use std::collections::BTreeSet;

use notionlab::hierarchy::closure;
use notionlab::model::{Batch, ChallengeBatchQuery, Communication, Message};
use notionlab::props::{eval_activity, eval_simple, AtomKind, BatchLinking, PropertyAtom};
use rand::seq::SliceRandom;
use rand::Rng;

const MESSAGES: [&str; 3] = ["a", "b", "aa"];

fn random_comm(rng: &mut impl Rng) -> Communication {
    if rng.gen_bool(0.1) {
        return Communication::Empty;
    }
    Communication::real(rng.gen_range(0..3), rng.gen_range(0..3), Message::from(*MESSAGES.choose(rng).unwrap()))
}

/// Scenario 1 derived from scenario 0 by a few random edits, so that the
/// stricter atoms are met often enough to be worth checking.
fn perturb(rng: &mut impl Rng, rows: &[Communication], rename: &[u32; 3]) -> Vec<Communication> {
    let mut out = rows.to_vec();
    for _ in 0..rng.gen_range(0..=2) {
        match rng.gen_range(0..7) {
            0 => {}
            1 | 2 | 3 => {
                // shuffle one column among the real rows
                let col = rng.gen_range(0..3);
                let idx: Vec<usize> = (0..out.len()).filter(|&j| out[j].as_real().is_some()).collect();
                let mut perm = idx.clone();
                perm.shuffle(rng);
                let old = out.clone();
                for (&j, &k) in idx.iter().zip(&perm) {
                    let (Communication::Real(dst), Communication::Real(src)) = (&mut out[j], &old[k]) else { continue };
                    match col {
                        0 => dst.sender = src.sender,
                        1 => dst.receiver = src.receiver,
                        _ => dst.message = src.message.clone(),
                    }
                }
            }
            4 => {
                for c in &mut out {
                    if let Communication::Real(r) = c {
                        r.sender = rename[r.sender as usize];
                    }
                }
            }
            5 => {
                let j = rng.gen_range(0..out.len());
                out[j] = random_comm(rng);
            }
            _ => {
                let j = rng.gen_range(0..out.len());
                if let Communication::Real(r) = &mut out[j] {
                    match rng.gen_range(0..3) {
                        0 => r.sender = rng.gen_range(0..3),
                        1 => r.receiver = rng.gen_range(0..3),
                        _ => r.message = Message::from(*MESSAGES.choose(rng).unwrap()),
                    }
                }
            }
        }
    }
    out
}

/// A random pair of scenarios over one or two batches.
pub fn random_pair(rng: &mut impl Rng) -> Vec<ChallengeBatchQuery> {
    let mut rename = [0u32, 1, 2];
    rename.shuffle(rng);
    let batches = rng.gen_range(1..=2);
    (0..batches)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            let s0: Vec<Communication> = (0..len).map(|_| random_comm(rng)).collect();
            let s1 = if rng.gen_bool(0.15) { (0..len).map(|_| random_comm(rng)).collect() } else { perturb(rng, &s0, &rename) };
            ChallengeBatchQuery::simple(Batch::new(s0).unwrap(), Batch::new(s1).unwrap()).unwrap()
        })
        .collect()
}

/// Atoms that judge scenario pairs without instances or stages.
pub fn pair_atoms() -> Vec<PropertyAtom> {
    PropertyAtom::catalogue()
        .into_iter()
        .filter(|a| matches!(a.kind(), AtomKind::RowLocal | AtomKind::Activity))
        .collect()
}

/// Whether `atom` accepts every prefix of the query sequence.
pub fn accepts(atom: PropertyAtom, queries: &[ChallengeBatchQuery]) -> bool {
    let mut hist: [Vec<BatchLinking>; 2] = [Vec::new(), Vec::new()];
    for q in queries {
        for (b, h) in hist.iter_mut().enumerate() {
            h.push(BatchLinking::of(q.batch(0, b)));
        }
        let ok = match atom.kind() {
            AtomKind::RowLocal => eval_simple(atom, q).unwrap().is_accept(),
            _ => eval_activity(atom, &[hist.clone(), hist.clone()]).unwrap().is_accept(),
        };
        if !ok {
            return false;
        }
    }
    true
}

/// Pairs (a, b) with b derivable from a where a accepts but b rejects.
pub fn lattice_violations(queries: &[ChallengeBatchQuery]) -> Vec<(PropertyAtom, PropertyAtom)> {
    let atoms = pair_atoms();
    let verdicts: Vec<bool> = atoms.iter().map(|&a| accepts(a, queries)).collect();
    let mut out = Vec::new();
    for (i, &a) in atoms.iter().enumerate() {
        if !verdicts[i] {
            continue;
        }
        let implied = closure(&BTreeSet::from([a]));
        for (j, &b) in atoms.iter().enumerate() {
            if implied.contains(&b) && !verdicts[j] {
                out.push((a, b));
            }
        }
    }
    out
}

/// Named implications that must be inside the rule closure.
pub fn required_rules() -> Vec<(PropertyAtom, PropertyAtom)> {
    use notionlab::props::{Side::*, Varying};
    use PropertyAtom::*;
    let mut out = Vec::new();
    for s in [Sender, Receiver] {
        out.extend([
            (Frequency(s), Active(s)),
            (Active(s), Count(s)),
            (Partition(s), Histogram(s)),
            (Histogram(s), Count(s)),
            (Frequency(s), Histogram(s)),
        ]);
    }
    out.extend([
        (Equal(Varying::S), Active(Receiver)),
        (Equal(Varying::S), Frequency(Receiver)),
        (Equal(Varying::S), Partition(Receiver)),
        (Equal(Varying::S), MessageLength),
        (Equal(Varying::S), Equal(Varying::SM)),
    ]);
    out
}
