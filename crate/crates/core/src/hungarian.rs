//! Minimum-cost injective assignment of `N` ground-truth rows to `K ≥ N`
//! candidate columns.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[n]` is the candidate matched to ground-truth row `n`.
    pub assignment: Vec<usize>,
    /// Sum of the matched costs, accumulated in row order.
    pub cost: f64,
}

/// Row-major `n × k` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "cost_matrix",
                format!("{} entries for {rows}x{cols}", data.len()),
            ));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        CostMatrix { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Total of an assignment, summed in row order.
    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().fold(0.0, |acc, (r, &c)| acc + self.at(r, c))
    }
}

/// Optimal assignment; among optimal assignments the lexicographically
/// smallest assignment vector is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (n, k) = (cost.rows, cost.cols);
    if n > k {
        return Err(Error::contract("hungarian", format!("{n} ground-truth rows exceed {k} candidates")));
    }
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("hungarian", "non-finite cost"));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..k).collect();
    let (best, _) = solve(cost, &all_rows, &all_cols);
    let scale = cost.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale * n.max(1) as f64;

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut assignment = Vec::with_capacity(n);
    let mut free_cols = all_cols;
    let mut fixed = 0.0;
    for r in 0..n {
        let rest: Vec<usize> = (r + 1..n).collect();
        let mut chosen = None;
        for (pos, &c) in free_cols.iter().enumerate() {
            let mut cols = free_cols.clone();
            cols.remove(pos);
            let (sub, _) = solve(cost, &rest, &cols);
            if fixed + cost.at(r, c) + sub <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        // Rounding can in principle reject every column; fall back to the
        // column the unconstrained solution uses for this row.
        let pos = match chosen {
            Some(p) => p,
            None => {
                let rows: Vec<usize> = (r..n).collect();
                let (_, a) = solve(cost, &rows, &free_cols);
                free_cols.iter().position(|&c| c == a[0]).expect("solver returns a free column")
            }
        };
        let c = free_cols.remove(pos);
        fixed += cost.at(r, c);
        assignment.push(c);
    }
    Ok(MatchResult {
        cost: cost.total(&assignment),
        assignment,
    })
}

/// Shortest-augmenting-path Hungarian algorithm on the sub-matrix
/// `rows × cols` (`rows.len() ≤ cols.len()`). Returns the optimal value and
/// the column chosen for each row.
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let (n, m) = (rows.len(), cols.len());
    if n == 0 {
        return (0.0, Vec::new());
    }
    let a = |i: usize, j: usize| cost.at(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = cols[j - 1];
        }
    }
    let total = out.iter().enumerate().fold(0.0, |acc, (i, &c)| acc + cost.at(rows[i], c));
    (total, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Every injection in lexicographic order; keeps the first minimum.
    fn brute_force(cost: &CostMatrix) -> MatchResult {
        fn rec(cost: &CostMatrix, cur: &mut Vec<usize>, used: &mut [bool], best: &mut Option<MatchResult>) {
            if cur.len() == cost.rows {
                let total = cost.total(cur);
                if best.as_ref().is_none_or(|b| total < b.cost) {
                    *best = Some(MatchResult {
                        assignment: cur.clone(),
                        cost: total,
                    });
                }
                return;
            }
            for c in 0..cost.cols {
                if !used[c] {
                    used[c] = true;
                    cur.push(c);
                    rec(cost, cur, used, best);
                    cur.pop();
                    used[c] = false;
                }
            }
        }
        let mut best = None;
        rec(cost, &mut Vec::new(), &mut vec![false; cost.cols], &mut best);
        best.unwrap()
    }

    fn m(rows: usize, cols: usize, data: &[f64]) -> CostMatrix {
        CostMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_cases() {
        let r = hungarian(&m(2, 2, &[1., 2., 2., 1.])).unwrap();
        assert_eq!((r.assignment, r.cost), (vec![0, 1], 2.0));
        let r = hungarian(&m(2, 2, &[2., 1., 1., 2.])).unwrap();
        assert_eq!((r.assignment, r.cost), (vec![1, 0], 2.0));
    }

    #[test]
    fn ties_prefer_lexicographically_smallest() {
        let r = hungarian(&m(2, 3, &[0.0; 6])).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
        let r = hungarian(&m(2, 3, &[5., 1., 1., 1., 1., 5.])).unwrap();
        assert_eq!(r.assignment, vec![1, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(&m(3, 2, &[0.0; 6])).is_err());
        assert!(hungarian(&m(1, 2, &[f64::NAN, 0.0])).is_err());
        assert!(CostMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn empty_ground_truth() {
        let r = hungarian(&m(0, 4, &[])).unwrap();
        assert!(r.assignment.is_empty());
        assert_eq!(r.cost, 0.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..300 {
            let k = rng.random_range(1..=7);
            let n = rng.random_range(0..=k);
            let integer = trial % 3 == 0;
            let cost = CostMatrix::from_fn(n, k, |_, _| {
                if integer {
                    rng.random_range(-3..4) as f64
                } else {
                    rng.random_range(-10.0..10.0)
                }
            });
            let got = hungarian(&cost).unwrap();
            let want = brute_force(&cost);
            assert_eq!(got.cost, want.cost, "trial {trial}");
            if integer {
                assert_eq!(got.assignment, want.assignment, "trial {trial}");
            }
        }
    }

    #[test]
    fn column_permutation_keeps_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cost = CostMatrix::from_fn(3, 5, |_, _| rng.random_range(0.0..1.0));
        let perm = [2, 4, 0, 1, 3];
        let permuted = CostMatrix::from_fn(3, 5, |r, c| cost.at(r, perm[c]));
        let a = hungarian(&cost).unwrap();
        let b = hungarian(&permuted).unwrap();
        assert_eq!(a.cost, b.cost);
        for (r, &c) in b.assignment.iter().enumerate() {
            assert_eq!(perm[c], a.assignment[r]);
        }
    }
}
