//! Independent oracles and builders shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fet_core::autodiff::{Gradients, ParamId, ParamStore};
use fet_core::corpus::{build_vocabulary, Instance, LabelVocabulary, Tier};
use fet_core::deductive::{DecoderDims, DecoderParameters};
use fet_core::tensor::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Minimum assignment cost by enumerating every permutation.
pub fn brute_force_min(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let n = cost.rows();
        if row == n {
            *best = best.min(acc);
            return;
        }
        for col in 0..n {
            if !used[col] {
                used[col] = true;
                go(cost, row + 1, used, acc + cost.get(row, col), best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.rows()], 0.0, &mut best);
    best
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

pub fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

pub fn tiny_decoder(store: &mut ParamStore, seed: u64, dims: DecoderDims) -> DecoderParameters {
    DecoderParameters::new(store, &mut rng(seed), dims)
}

/// Compares analytic gradients with five-point central differences for every
/// entry of `ids`. Agreement means a relative error of at most `tol`; entries where
/// both values are below 1e-8 sit at the finite-difference noise floor and
/// count as agreeing.
pub fn gradient_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    tol: f64,
    f: impl Fn(&ParamStore) -> (f64, Gradients),
) -> Result<usize, String> {
    let (_, grads) = f(store);
    let h = 1e-4;
    let mut checked = 0;
    for &id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            let mut at = |x: f64| {
                store.get_mut(id).data_mut()[k] = x;
                f(store).0
            };
            let numeric = (8.0 * (at(orig + h) - at(orig - h))
                - (at(orig + 2.0 * h) - at(orig - 2.0 * h)))
                / (12.0 * h);
            store.get_mut(id).data_mut()[k] = orig;
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let scale = analytic.abs().max(numeric.abs());
            if scale > 1e-8 && (analytic - numeric).abs() > tol * scale {
                return Err(format!(
                    "{}[{k}]: analytic {analytic:e} numeric {numeric:e}",
                    store.name(id)
                ));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Vocabulary over `tiers` whose shot counts equal `shots`.
pub fn vocabulary_with_shots(tiers: &[Tier], shots: &[u32]) -> LabelVocabulary {
    let names: Vec<String> = (0..tiers.len()).map(|i| format!("l{i:02}")).collect();
    let tier_map: BTreeMap<String, Tier> =
        names.iter().cloned().zip(tiers.iter().copied()).collect();
    let max = shots.iter().copied().max().unwrap_or(0);
    let train: Vec<Instance> = (0..max)
        .map(|k| {
            let gold: Vec<&str> = names
                .iter()
                .zip(shots)
                .filter(|(_, &s)| s > k)
                .map(|(n, _)| n.as_str())
                .collect();
            Instance::new(format!("t{k}"), &[], &["x"], &[], &gold).expect("valid instance")
        })
        .collect();
    build_vocabulary(&train, &tier_map).expect("vocabulary")
}

pub fn random_set(rng: &mut impl Rng, n: usize, p: f64) -> BTreeSet<usize> {
    (0..n).filter(|_| rng.gen_bool(p)).collect()
}

/// Reference macro scores: mean per-instance precision over non-empty
/// predictions, mean recall over non-empty gold sets, harmonic F1.
pub fn reference_macro(pairs: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> (f64, f64, f64) {
    let mut p_sum = 0.0;
    let mut p_n = 0usize;
    let mut r_sum = 0.0;
    let mut r_n = 0usize;
    for (pred, gold) in pairs {
        let hit = pred.iter().filter(|x| gold.contains(x)).count() as f64;
        if !pred.is_empty() {
            p_sum += hit / pred.len() as f64;
            p_n += 1;
        }
        if !gold.is_empty() {
            r_sum += hit / gold.len() as f64;
            r_n += 1;
        }
    }
    let p = if p_n == 0 { 0.0 } else { p_sum / p_n as f64 };
    let r = if r_n == 0 { 0.0 } else { r_sum / r_n as f64 };
    (p, r, harmonic(p, r))
}

pub fn reference_micro(pairs: &[(BTreeSet<usize>, BTreeSet<usize>)]) -> (f64, f64, f64) {
    let mut hit = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    for (pred, gold) in pairs {
        for x in pred {
            np += 1;
            if gold.contains(x) {
                hit += 1;
            }
        }
        ng += gold.len();
    }
    let p = if np == 0 { 0.0 } else { hit as f64 / np as f64 };
    let r = if ng == 0 { 0.0 } else { hit as f64 / ng as f64 };
    (p, r, harmonic(p, r))
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-tier reference with every instance kept and undefined ratios as 0.
pub fn reference_tier_zero(
    pairs: &[(BTreeSet<usize>, BTreeSet<usize>)],
    tiers: &[Tier],
    tier: Tier,
) -> (f64, f64, f64) {
    let keep = |s: &BTreeSet<usize>| -> BTreeSet<usize> {
        s.iter().copied().filter(|&i| tiers[i] == tier).collect()
    };
    let n = pairs.len() as f64;
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    for (pred, gold) in pairs {
        let (pred, gold) = (keep(pred), keep(gold));
        let hit = pred.intersection(&gold).count() as f64;
        if !pred.is_empty() {
            p_sum += hit / pred.len() as f64;
        }
        if !gold.is_empty() {
            r_sum += hit / gold.len() as f64;
        }
    }
    let (p, r) = if pairs.is_empty() {
        (0.0, 0.0)
    } else {
        (p_sum / n, r_sum / n)
    };
    (p, r, harmonic(p, r))
}

pub fn restrict_pairs(
    pairs: &[(BTreeSet<usize>, BTreeSet<usize>)],
    tiers: &[Tier],
    tier: Tier,
) -> Vec<(BTreeSet<usize>, BTreeSet<usize>)> {
    pairs
        .iter()
        .map(|(p, g)| {
            (
                p.iter().copied().filter(|&i| tiers[i] == tier).collect(),
                g.iter().copied().filter(|&i| tiers[i] == tier).collect(),
            )
        })
        .collect()
}

/// `(correct, predicted)` for label tokens whose shot count is `shot`.
pub fn reference_shot(
    pairs: &[(BTreeSet<usize>, BTreeSet<usize>)],
    shots: &[u32],
    shot: u32,
) -> (usize, usize) {
    let mut correct = 0;
    let mut predicted = 0;
    for (pred, gold) in pairs {
        for &x in pred {
            if shots[x] == shot {
                predicted += 1;
                if gold.contains(&x) {
                    correct += 1;
                }
            }
        }
    }
    (correct, predicted)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
