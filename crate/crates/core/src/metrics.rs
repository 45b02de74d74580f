//! Example-level macro and pooled micro scores, exact-match accuracy, tier
//! and shot breakdowns, and label co-occurrence counts.
//!
//! Macro precision averages only over instances with a non-empty prediction;
//! macro recall averages only over instances with a non-empty gold set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelVocabulary, Tier};
use crate::error::{Error, Result};

/// One evaluated instance: `(predicted, gold)`.
pub type Pair<T> = (BTreeSet<T>, BTreeSet<T>);

/// Per-instance precision and recall; `None` where the denominator is empty.
pub fn instance_prf<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> (Option<f64>, Option<f64>) {
    let hit = pred.intersection(gold).count() as f64;
    let p = (!pred.is_empty()).then(|| hit / pred.len() as f64);
    let r = (!gold.is_empty()).then(|| hit / gold.len() as f64);
    (p, r)
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// False when no instance had a defined precision; `precision` is then 0.
    pub precision_defined: bool,
    pub recall_defined: bool,
}

impl Prf {
    fn new(p: Option<f64>, r: Option<f64>) -> Self {
        let (precision, recall) = (p.unwrap_or(0.0), r.unwrap_or(0.0));
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
            precision_defined: p.is_some(),
            recall_defined: r.is_some(),
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn macro_prf<T: Ord>(pairs: &[Pair<T>]) -> Prf {
    let mut ps = Vec::new();
    let mut rs = Vec::new();
    for (pred, gold) in pairs {
        let (p, r) = instance_prf(pred, gold);
        ps.extend(p);
        rs.extend(r);
    }
    Prf::new(mean(&ps), mean(&rs))
}

pub fn micro_prf<T: Ord>(pairs: &[Pair<T>]) -> Prf {
    let (mut hit, mut npred, mut ngold) = (0usize, 0usize, 0usize);
    for (pred, gold) in pairs {
        hit += pred.intersection(gold).count();
        npred += pred.len();
        ngold += gold.len();
    }
    let p = (npred > 0).then(|| hit as f64 / npred as f64);
    let r = (ngold > 0).then(|| hit as f64 / ngold as f64);
    Prf::new(p, r)
}

/// Fraction of instances whose prediction equals the gold set; 0 for no
/// instances.
pub fn accuracy<T: Ord>(pairs: &[Pair<T>]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TierEmptyPolicy {
    /// Drop instances whose restricted prediction and gold are both empty.
    #[default]
    Skip,
    /// Keep every instance; undefined precision or recall counts as 0.
    Zero,
}

pub fn restrict(set: &BTreeSet<usize>, vocab: &LabelVocabulary, tier: Tier) -> BTreeSet<usize> {
    set.iter()
        .copied()
        .filter(|&id| id < vocab.len() && vocab.tier(id) == tier)
        .collect()
}

pub fn tier_report(
    pairs: &[Pair<usize>],
    vocab: &LabelVocabulary,
    policy: TierEmptyPolicy,
) -> BTreeMap<Tier, Prf> {
    Tier::ALL
        .iter()
        .map(|&tier| {
            let restricted: Vec<Pair<usize>> = pairs
                .iter()
                .map(|(p, g)| (restrict(p, vocab, tier), restrict(g, vocab, tier)))
                .collect();
            let prf = match policy {
                TierEmptyPolicy::Skip => macro_prf(&restricted),
                TierEmptyPolicy::Zero => {
                    let (ps, rs): (Vec<f64>, Vec<f64>) = restricted
                        .iter()
                        .map(|(p, g)| {
                            let (pi, ri) = instance_prf(p, g);
                            (pi.unwrap_or(0.0), ri.unwrap_or(0.0))
                        })
                        .unzip();
                    Prf::new(mean(&ps), mean(&rs))
                }
            };
            (tier, prf)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotBucket {
    pub shot: u32,
    pub correct: usize,
    pub predicted: usize,
    /// `None` when nothing was predicted in the bucket.
    pub precision: Option<f64>,
}

impl ShotBucket {
    /// `correct predicted precision`, with `/` for an empty bucket.
    pub fn render(&self) -> String {
        let prec = match self.precision {
            Some(p) => format!("{:.1}%", 100.0 * p),
            None => "/".to_string(),
        };
        format!("{} {} {}", self.correct, self.predicted, prec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotTable {
    /// Distinct labels predicted anywhere.
    pub categories: usize,
    /// Predicted label tokens in total.
    pub predictions: usize,
    pub buckets: Vec<ShotBucket>,
}

pub const SHOT_BUCKETS: [u32; 3] = [0, 1, 2];

pub fn shot_table(pairs: &[Pair<usize>], vocab: &LabelVocabulary) -> ShotTable {
    let mut buckets: Vec<ShotBucket> = SHOT_BUCKETS
        .iter()
        .map(|&shot| ShotBucket {
            shot,
            correct: 0,
            predicted: 0,
            precision: None,
        })
        .collect();
    let mut categories = BTreeSet::new();
    let mut predictions = 0;
    for (pred, gold) in pairs {
        for &id in pred {
            categories.insert(id);
            predictions += 1;
            if id >= vocab.len() {
                continue;
            }
            if let Some(b) = buckets.iter_mut().find(|b| b.shot == vocab.shot(id)) {
                b.predicted += 1;
                if gold.contains(&id) {
                    b.correct += 1;
                }
            }
        }
    }
    for b in &mut buckets {
        b.precision = (b.predicted > 0).then(|| b.correct as f64 / b.predicted as f64);
    }
    ShotTable {
        categories: categories.len(),
        predictions,
        buckets,
    }
}

impl ShotTable {
    pub fn render(&self) -> String {
        let mut out = String::from("Category Prediction");
        for b in &self.buckets {
            let _ = write!(out, " | Shot={}: Correct Predicted Prec.", b.shot);
        }
        let _ = write!(out, "\n{} {}", self.categories, self.predictions);
        for b in &self.buckets {
            let _ = write!(out, " | {}", b.render());
        }
        out.push('\n');
        out
    }
}

/// Symmetric `|L| × |L|` counts; the diagonal is label frequency.
pub fn cooccurrence_matrix<'a>(
    sets: impl IntoIterator<Item = &'a BTreeSet<usize>>,
    num_labels: usize,
) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_labels]; num_labels];
    for set in sets {
        let ids: Vec<usize> = set.iter().copied().filter(|&i| i < num_labels).collect();
        for &a in &ids {
            for &b in &ids {
                m[a][b] += 1;
            }
        }
    }
    m
}

pub fn cooccurrence_csv(matrix: &[Vec<u64>], vocab: &LabelVocabulary) -> String {
    let quote = |s: &str| {
        if s.contains([',', '"', '\n']) {
            format!("\"{}\"", s.replace('"', "\"\""))
        } else {
            s.to_string()
        }
    };
    let mut out = String::from("label");
    for l in vocab.labels() {
        out.push(',');
        out.push_str(&quote(l));
    }
    out.push('\n');
    for (row, l) in matrix.iter().zip(vocab.labels()) {
        out.push_str(&quote(l));
        for c in row {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    #[serde(rename = "macro")]
    pub macro_: Prf,
    pub micro: Prf,
    pub accuracy: f64,
    pub tiers: BTreeMap<Tier, Prf>,
    pub shots: ShotTable,
}

impl EvalReport {
    pub fn new(pairs: &[Pair<usize>], vocab: &LabelVocabulary, policy: TierEmptyPolicy) -> Self {
        Self {
            instances: pairs.len(),
            macro_: macro_prf(pairs),
            micro: micro_prf(pairs),
            accuracy: accuracy(pairs),
            tiers: tier_report(pairs, vocab, policy),
            shots: shot_table(pairs, vocab),
        }
    }

    pub fn render(&self) -> String {
        let row = |name: &str, p: &Prf| {
            format!(
                "{name:<12} {:>6.1} {:>6.1} {:>6.1}\n",
                100.0 * p.precision,
                100.0 * p.recall,
                100.0 * p.f1
            )
        };
        let mut out = format!(
            "instances {}  accuracy {:.1}\n\n",
            self.instances,
            100.0 * self.accuracy
        );
        out.push_str(&format!("{:<12} {:>6} {:>6} {:>6}\n", "", "P", "R", "F1"));
        out.push_str(&row("macro", &self.macro_));
        out.push_str(&row("micro", &self.micro));
        for (tier, p) in &self.tiers {
            out.push_str(&row(tier.as_str(), p));
        }
        out.push('\n');
        out.push_str(&self.shots.render());
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
