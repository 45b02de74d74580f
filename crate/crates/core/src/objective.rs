//! Order-invariant training losses: the matched set loss and the attribute
//! graph loss.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Stand-in for `-ln 0` so the assignment solver always sees finite costs.
pub const COST_CAP: f64 = 1e9;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Square matrix of pairwise matching costs; rows are gold labels, columns
/// are decoding steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(Matrix);

impl CostMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::NonSquare {
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                if !m.get(r, c).is_finite() {
                    return Err(Error::NonFiniteCost { row: r, col: c });
                }
            }
        }
        Ok(Self(m))
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// `cost[i][j] = -ln p_j(gold_i)`, capped at [`COST_CAP`] with a warning.
pub fn pairwise_cost(gold_ids: &[usize], step_distributions: &[Vec<f64>]) -> Result<CostMatrix> {
    cost_matrix(gold_ids, step_distributions, true)
}

/// As [`pairwise_cost`] but silent. A free-running pass masks golds it has
/// already emitted, so capped entries are routine there.
pub(crate) fn free_run_cost(
    gold_ids: &[usize],
    step_distributions: &[Vec<f64>],
) -> Result<CostMatrix> {
    cost_matrix(gold_ids, step_distributions, false)
}

fn cost_matrix(
    gold_ids: &[usize],
    step_distributions: &[Vec<f64>],
    warn: bool,
) -> Result<CostMatrix> {
    let m = gold_ids.len();
    if m == 0 {
        return Err(Error::InvalidInput(
            "matching needs at least one gold label".into(),
        ));
    }
    if step_distributions.len() != m {
        return Err(Error::NonSquare {
            rows: m,
            cols: step_distributions.len(),
        });
    }
    let mut cost = Matrix::zeros(m, m);
    for (i, &gold) in gold_ids.iter().enumerate() {
        for (j, dist) in step_distributions.iter().enumerate() {
            let p = *dist.get(gold).ok_or(Error::LabelOutOfRange {
                id: gold,
                size: dist.len(),
            })?;
            let c = if p > 0.0 {
                (-p.ln()).min(COST_CAP)
            } else {
                if warn {
                    log::warn!("event=masked_gold gold={gold} step={j} cost={COST_CAP}");
                }
                COST_CAP
            };
            cost.set(i, j, c);
        }
    }
    CostMatrix::new(cost)
}

/// Minimum-cost assignment. `assignment[row] = column`. Among optimal
/// permutations the lexicographically smallest is returned.
pub fn hungarian(cost: &Matrix) -> Result<(Vec<usize>, f64)> {
    let cost = CostMatrix::new(cost.clone())?;
    let n = cost.size();
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let (_, optimum) = solve(cost.matrix(), &vec![None; n]);
    let scale = cost
        .matrix()
        .data()
        .iter()
        .fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-9 * scale * n as f64;

    // Fix rows in order, taking the smallest column that keeps the optimum.
    let mut fixed: Vec<Option<usize>> = vec![None; n];
    let mut used = vec![false; n];
    for row in 0..n {
        #[allow(clippy::needless_range_loop)]
        for col in 0..n {
            if used[col] {
                continue;
            }
            fixed[row] = Some(col);
            let (_, total) = solve(cost.matrix(), &fixed);
            if total <= optimum + tol {
                used[col] = true;
                break;
            }
            fixed[row] = None;
        }
        assert!(fixed[row].is_some(), "optimal completion always exists");
    }
    let assignment: Vec<usize> = fixed.into_iter().map(Option::unwrap).collect();
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.get(r, c))
        .sum();
    Ok((assignment, total))
}

/// Shortest augmenting path solver with row and column potentials. Rows in
/// `fixed` are forced to their column.
fn solve(cost: &Matrix, fixed: &[Option<usize>]) -> (Vec<usize>, f64) {
    let n = cost.rows();
    let forced_cols: Vec<bool> = {
        let mut v = vec![false; n];
        for c in fixed.iter().flatten() {
            v[*c] = true;
        }
        v
    };
    let free_rows: Vec<usize> = (0..n).filter(|&r| fixed[r].is_none()).collect();
    let free_cols: Vec<usize> = (0..n).filter(|&c| !forced_cols[c]).collect();
    let k = free_rows.len();
    let mut total: f64 = fixed
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| cost.get(r, c)))
        .sum();
    let mut assignment: Vec<usize> = fixed.iter().map(|c| c.unwrap_or(usize::MAX)).collect();
    if k == 0 {
        return (assignment, total);
    }
    let a = |i: usize, j: usize| cost.get(free_rows[i - 1], free_cols[j - 1]);
    // 1-based arrays; index 0 is the virtual start
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    for j in 1..=k {
        let row = free_rows[p[j] - 1];
        let col = free_cols[j - 1];
        assignment[row] = col;
        total += cost.get(row, col);
    }
    (assignment, total)
}

/// Set loss for one instance.
///
/// Gold ids are matched in ascending id order whatever order the caller
/// passes, so permuting the gold list cannot change the result. The returned
/// assignment is in the caller's order: `assignment[i]` is the step matched
/// to `gold_ids[i]`.
pub fn set_loss(
    gold_ids: &[usize],
    step_distributions: &[Vec<f64>],
    eos_distribution: &[f64],
) -> Result<(f64, Vec<usize>)> {
    let eos = eos_distribution
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::InvalidInput("EOS distribution is empty".into()))?;
    let mut order: Vec<usize> = (0..gold_ids.len()).collect();
    order.sort_by_key(|&i| gold_ids[i]);
    let sorted: Vec<usize> = order.iter().map(|&i| gold_ids[i]).collect();
    let cost = pairwise_cost(&sorted, step_distributions)?;
    let (sorted_assignment, total) = hungarian(cost.matrix())?;
    let m = gold_ids.len() as f64;
    let p_eos = eos_distribution[eos];
    let eos_cost = if p_eos > 0.0 { -p_eos.ln() } else { COST_CAP };
    let mut assignment = vec![0; gold_ids.len()];
    for (k, &i) in order.iter().enumerate() {
        assignment[i] = sorted_assignment[k];
    }
    Ok((total / m + eos_cost, assignment))
}

/// `-sum_j score_j * y_j` with `y_j = 1` for gold labels and `-1` otherwise.
pub fn bag_loss(label_scores: &[f64], gold_ids: &BTreeSet<usize>) -> f64 {
    -label_scores
        .iter()
        .enumerate()
        .map(|(j, &s)| if gold_ids.contains(&j) { s } else { -s })
        .sum::<f64>()
}

pub fn total_loss(set_loss: f64, bag_loss: f64, lambda: f64) -> f64 {
    set_loss + lambda * bag_loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub set_loss: f64,
    pub bag_loss: f64,
    pub total: f64,
    pub assignment: Vec<usize>,
}

/// Gold ids reordered by an assignment: entry `j` is the gold matched to
/// step `j`.
pub fn reorder_gold(gold_ids: &[usize], assignment: &[usize]) -> Vec<usize> {
    let mut out = vec![0; gold_ids.len()];
    for (i, &step) in assignment.iter().enumerate() {
        out[step] = gold_ids[i];
    }
    out
}

/// Set loss on the graph for distributions that already follow the matched
/// order: `targets[j]` is the target of step `j` and the step after the last
/// target must predict EOS. `probs` has `targets.len() + 1` entries.
pub fn set_loss_on(g: &mut Graph, probs: &[Var], targets: &[usize], eos_id: usize) -> Var {
    assert_eq!(probs.len(), targets.len() + 1);
    let m = targets.len();
    let eos_p = g.select(probs[m], eos_id);
    let eos_ln = g.ln(eos_p);
    let mut loss = g.scale(eos_ln, -1.0);
    if m > 0 {
        let picked: Vec<Var> = targets
            .iter()
            .zip(probs)
            .map(|(&t, &p)| g.select(p, t))
            .collect();
        let row = g.concat_cols(&picked);
        let lns = g.ln(row);
        let sum = g.sum(lns);
        let mean = g.scale(sum, -1.0 / m as f64);
        loss = g.add(loss, mean);
    }
    loss
}

/// Attribute graph loss on the graph for a `1 × |L|` score row.
pub fn bag_loss_on(g: &mut Graph, label_scores: Var, gold_ids: &BTreeSet<usize>) -> Var {
    let n = g.value(label_scores).cols();
    let y: Vec<f64> = (0..n)
        .map(|j| if gold_ids.contains(&j) { -1.0 } else { 1.0 })
        .collect();
    let y = g.input(Matrix::from_vec(n, 1, y));
    g.matmul(label_scores, y)
}
