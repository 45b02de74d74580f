//! Synthetic typing corpus whose labels are compositions of attribute words.
//!
//! Four general labels `g{k}`. Each has three fine labels `f{k}{a}`, three
//! facet labels `p{k}{b}` (fine tier) and three ultra-fine labels `u{k}{a}{a}`
//! that combine a fine label with the facet of the same index. Every fine and
//! facet label has an attribute word (`fw{k}{a}`, `pw{k}{b}`); an ultra-fine
//! label has the attribute words of both its parts. The ultra-fine label
//! `u{k}11` of every general never occurs in training.
//!
//! Word vectors: each attribute word is a distinct basis vector, and a label
//! vector is the sum of its attribute vectors plus a private direction scaled
//! so that single-attribute edges have cosine [`SINGLE_EDGE`] and ultra-fine
//! edges have cosine [`ULTRA_EDGE`]. One fully active attribute keeps an
//! ultra-fine score below the default induction threshold; two balanced ones
//! exceed it.
//!
//! The mention is a name followed by the fine word; the context holds fillers,
//! stop words and, when the instance has a facet, the facet word.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bag::PrecomputedProposer;
use crate::corpus::{EmbeddingTable, Instance, Tier};
use crate::pipeline::RunConfig;

pub const GENERALS: usize = 4;
pub const FINES: usize = 3;
pub const FACETS: usize = 3;
/// `(fine, facet)` pairs that form ultra-fine labels.
pub const ULTRA_PAIRS: [(usize, usize); 3] = [(0, 0), (1, 1), (2, 2)];
/// The ultra-fine pair withheld from training.
pub const HELD_OUT_PAIR: (usize, usize) = (1, 1);
pub const SINGLE_EDGE: f64 = 0.5;
pub const ULTRA_EDGE: f64 = 0.18;

const FILLERS: [&str; 12] = [
    "report", "said", "near", "today", "local", "after", "meeting", "city", "known", "several",
    "team", "week",
];
const STOPS: [&str; 6] = ["the", "a", "of", "and", "was", "in"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub train: usize,
    pub test: usize,
    /// Test instances carrying a held-out label.
    pub held_out_test: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train: 500,
            test: 100,
            held_out_test: 12,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
    pub tier_map: BTreeMap<String, Tier>,
    pub table: EmbeddingTable,
    pub proposer: PrecomputedProposer,
    pub held_out: BTreeSet<String>,
}

/// Small model and training settings sized for this corpus on one core.
pub fn desk_config() -> RunConfig {
    RunConfig {
        d_s: 64,
        d_e: 16,
        d_g: embedding_table().dimension(),
        attention_dim: Some(16),
        lr: 0.01,
        lr_encoder: 0.01,
        dropout: 0.1,
        lambda: 3.0,
        epochs: 60,
        ..RunConfig::default()
    }
}

pub fn general(k: usize) -> String {
    format!("g{k}")
}

pub fn fine(k: usize, a: usize) -> String {
    format!("f{k}{a}")
}

pub fn facet(k: usize, b: usize) -> String {
    format!("p{k}{b}")
}

pub fn ultra(k: usize, a: usize, b: usize) -> String {
    format!("u{k}{a}{b}")
}

fn fine_word(k: usize, a: usize) -> String {
    format!("fw{k}{a}")
}

fn facet_word(k: usize, b: usize) -> String {
    format!("pw{k}{b}")
}

pub fn tier_map() -> BTreeMap<String, Tier> {
    let mut map = BTreeMap::new();
    for k in 0..GENERALS {
        map.insert(general(k), Tier::General);
        for a in 0..FINES {
            map.insert(fine(k, a), Tier::Fine);
        }
        for b in 0..FACETS {
            map.insert(facet(k, b), Tier::Fine);
        }
        for &(a, b) in &ULTRA_PAIRS {
            map.insert(ultra(k, a, b), Tier::UltraFine);
        }
    }
    map
}

/// Attribute words of every label.
fn label_attributes() -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    for k in 0..GENERALS {
        out.push((general(k), Vec::new()));
        for a in 0..FINES {
            out.push((fine(k, a), vec![fine_word(k, a)]));
        }
        for b in 0..FACETS {
            out.push((facet(k, b), vec![facet_word(k, b)]));
        }
        for &(a, b) in &ULTRA_PAIRS {
            out.push((ultra(k, a, b), vec![fine_word(k, a), facet_word(k, b)]));
        }
    }
    out
}

pub fn embedding_table() -> EmbeddingTable {
    let labels = label_attributes();
    let mut words: Vec<String> = Vec::new();
    for (_, attrs) in &labels {
        for w in attrs {
            if !words.contains(w) {
                words.push(w.clone());
            }
        }
    }
    let dim = words.len() + labels.len();
    let mut table = EmbeddingTable::new(dim);
    for (i, w) in words.iter().enumerate() {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        table.insert(w.clone(), v).expect("dimension matches");
    }
    for (j, (label, attrs)) in labels.iter().enumerate() {
        if attrs.is_empty() {
            let mut v = vec![0.0; dim];
            v[words.len() + j] = 1.0;
            table.insert(label.clone(), v).expect("dimension matches");
            continue;
        }
        let n = attrs.len() as f64;
        let target = if attrs.len() == 1 {
            SINGLE_EDGE
        } else {
            ULTRA_EDGE
        };
        // cos = 1 / sqrt(n + beta^2)
        let beta = (1.0 / (target * target) - n).sqrt();
        let mut v = vec![0.0; dim];
        for w in attrs {
            v[words.iter().position(|x| x == w).expect("known word")] = 1.0;
        }
        v[words.len() + j] = beta;
        table.insert(label.clone(), v).expect("dimension matches");
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    /// Gold `{g, f}`.
    FineOnly,
    /// Gold `{g, f, p}`; the pair has no ultra-fine label.
    Facet,
    /// Gold `{g, f, p, u}`.
    Ultra,
}

fn name(rng: &mut impl Rng) -> String {
    const SYL: [&str; 10] = [
        "ka", "lo", "mer", "zi", "tan", "vor", "el", "ru", "dis", "po",
    ];
    let n = rng.gen_range(2..=3);
    let mut s: String = (0..n)
        .map(|_| *SYL.choose(rng).expect("non-empty"))
        .collect();
    s[..1].make_ascii_uppercase();
    s
}

fn instance(
    rng: &mut ChaCha8Rng,
    id: String,
    k: usize,
    a: usize,
    facet_b: Option<usize>,
    kind: Kind,
    proposer: &mut PrecomputedProposer,
) -> Instance {
    let mut context: Vec<String> = (0..rng.gen_range(4..=7))
        .map(|_| {
            if rng.gen_bool(0.3) {
                STOPS.choose(rng).expect("non-empty").to_string()
            } else {
                FILLERS.choose(rng).expect("non-empty").to_string()
            }
        })
        .collect();
    let cues: Vec<String> = facet_b.map(|b| facet_word(k, b)).into_iter().collect();
    for cue in &cues {
        let at = rng.gen_range(0..=context.len());
        context.insert(at, cue.clone());
    }
    let split = rng.gen_range(0..=context.len());
    let mut right = context.split_off(split);
    right.push(".".into());
    let left = context;

    let mut gold = vec![general(k), fine(k, a)];
    if let Some(b) = facet_b {
        gold.push(facet(k, b));
        if kind == Kind::Ultra {
            gold.push(ultra(k, a, b));
        }
    }
    let mut candidates: Vec<(String, f64)> = cues
        .iter()
        .map(|c| (c.clone(), rng.gen_range(0.2..0.5)))
        .collect();
    for _ in 0..3 {
        candidates.push((
            FILLERS.choose(rng).expect("non-empty").to_string(),
            rng.gen_range(0.0..0.1),
        ));
    }
    candidates.push(("the".into(), rng.gen_range(0.1..0.4)));
    candidates.shuffle(rng);
    proposer.insert(id.clone(), candidates);

    let mention = vec![name(rng), fine_word(k, a)];
    Instance {
        id,
        left_tokens: left,
        mention_tokens: mention,
        right_tokens: right,
        gold_labels: gold.into_iter().collect(),
    }
}

/// Draws an instance type for training; the held-out pair never appears.
fn draw(rng: &mut ChaCha8Rng) -> (usize, usize, Option<usize>, Kind) {
    let k = rng.gen_range(0..GENERALS);
    loop {
        let a = rng.gen_range(0..FINES);
        let roll: f64 = rng.gen();
        if roll < 0.3 {
            return (k, a, None, Kind::FineOnly);
        }
        let b = rng.gen_range(0..FACETS);
        if (a, b) == HELD_OUT_PAIR {
            continue;
        }
        let kind = if ULTRA_PAIRS.contains(&(a, b)) {
            Kind::Ultra
        } else {
            Kind::Facet
        };
        return (k, a, Some(b), kind);
    }
}

pub fn generate(config: SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut proposer = PrecomputedProposer::new();
    let mut make = |rng: &mut ChaCha8Rng, prefix: &str, n: usize, held: usize| {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let id = format!("{prefix}{i}");
            let (k, a, b, kind) = if i < held {
                let (a, b) = HELD_OUT_PAIR;
                (i % GENERALS, a, Some(b), Kind::Ultra)
            } else {
                draw(rng)
            };
            out.push(instance(rng, id, k, a, b, kind, &mut proposer));
        }
        out.shuffle(rng);
        out
    };
    let train = make(&mut rng, "train-", config.train, 0);
    let test = make(
        &mut rng,
        "test-",
        config.test,
        config.held_out_test.min(config.test),
    );
    let held_out = (0..GENERALS)
        .map(|k| ultra(k, HELD_OUT_PAIR.0, HELD_OUT_PAIR.1))
        .collect();
    SyntheticCorpus {
        train,
        test,
        tier_map: tier_map(),
        table: embedding_table(),
        proposer,
        held_out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine;

    #[test]
    fn taxonomy_shape() {
        let map = tier_map();
        assert_eq!(map.len(), 40);
        let count = |t: Tier| map.values().filter(|&&x| x == t).count();
        assert_eq!(
            (
                count(Tier::General),
                count(Tier::Fine),
                count(Tier::UltraFine)
            ),
            (4, 24, 12)
        );
    }

    #[test]
    fn edge_geometry() {
        let t = embedding_table();
        let cos = |a: &str, b: &str| cosine(t.get(a).unwrap(), t.get(b).unwrap());
        assert!((cos("fw01", "f01") - SINGLE_EDGE).abs() < 1e-12);
        assert!((cos("pw02", "p02") - SINGLE_EDGE).abs() < 1e-12);
        assert!((cos("fw01", "u011") - ULTRA_EDGE).abs() < 1e-12);
        assert!((cos("pw01", "u011") - ULTRA_EDGE).abs() < 1e-12);
        assert_eq!(cos("fw01", "g0"), 0.0);
        assert_eq!(cos("fw01", "f02"), 0.0);
        // one active attribute stays under the default threshold
        const { assert!(ULTRA_EDGE < crate::bag::DEFAULT_THETA_S) };
        assert!(ULTRA_EDGE * 2f64.sqrt() > crate::bag::DEFAULT_THETA_S);
    }

    #[test]
    fn held_out_labels_are_absent_from_training_only() {
        let c = generate(SyntheticConfig::default());
        assert_eq!(c.train.len(), 500);
        assert_eq!(c.test.len(), 100);
        for i in &c.train {
            assert!(i.gold_labels.is_disjoint(&c.held_out), "{i:?}");
        }
        let with_held = c
            .test
            .iter()
            .filter(|i| !i.gold_labels.is_disjoint(&c.held_out))
            .count();
        assert_eq!(with_held, 12);
        // every held-out label's attributes occur in trained labels
        let trained: BTreeSet<&String> = c.train.iter().flat_map(|i| &i.gold_labels).collect();
        for k in 0..GENERALS {
            assert!(trained.contains(&fine(k, 1)) && trained.contains(&facet(k, 1)));
            assert!(trained.contains(&ultra(k, 0, 0)) && trained.contains(&ultra(k, 2, 2)));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(SyntheticConfig::default());
        let b = generate(SyntheticConfig::default());
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
    }
}
