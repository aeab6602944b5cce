//! Minimum-cost bipartite matching between queries and ground-truth objects.
//!
//! The `O × G` cost matrix is transposed and padded to `O × O` with zero-cost
//! dummy targets, solved with the shortest-augmenting-path Hungarian method,
//! and then refined so that among all optimal assignments the one returned
//! has the lexicographically smallest query sequence `(q(0), q(1), …)` in
//! target order. Optimal assignments are exactly the perfect matchings on
//! edges that are tight under the final dual potentials, so the refinement
//! only ever swaps along alternating paths of tight edges.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, gt)` pairs ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub num_queries: usize,
}

impl MatchResult {
    pub fn gt_of_query(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }

    pub fn total_cost(&self, cost: &Array2<f64>) -> f64 {
        self.pairs.iter().map(|&(q, g)| cost[[q, g]]).sum()
    }
}

pub fn hungarian(cost: &Array2<f64>) -> Result<MatchResult> {
    let (queries, targets) = cost.dim();
    if queries == 0 {
        return Err(Error::Contract("matching needs at least one query".into()));
    }
    if targets > queries {
        return Err(Error::TooManyTargets { targets, queries });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Contract("matching cost contains non-finite entries".into()));
    }
    let n = queries;
    // a[row][col]: rows are targets (dummies past `targets`), cols are queries.
    let a = |r: usize, c: usize| if r < targets { cost[[c, r]] } else { 0.0 };

    let (u, v, row_of_col) = solve(n, &a);
    let mut col_of_row = vec![0; n];
    for (c, &r) in row_of_col.iter().enumerate() {
        col_of_row[r] = c;
    }

    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale;
    let tight = |r: usize, c: usize| (a(r, c) - u[r] - v[c]).abs() <= tol;

    let mut row_of_col = row_of_col;
    let mut fixed_row = vec![false; n];
    let mut fixed_col = vec![false; n];
    for r in 0..targets {
        for c in 0..n {
            if fixed_col[c] || !tight(r, c) {
                continue;
            }
            if col_of_row[r] == c || force(r, c, &tight, &mut col_of_row, &mut row_of_col, &fixed_row, &fixed_col) {
                fixed_row[r] = true;
                fixed_col[c] = true;
                break;
            }
        }
        debug_assert!(fixed_row[r], "current assignment is always feasible");
    }

    let pairs = (0..targets).map(|r| (col_of_row[r], r)).collect();
    Ok(MatchResult {
        pairs,
        num_queries: queries,
    })
}

/// Square Hungarian method; returns row potentials, column potentials and
/// the row matched to each column.
fn solve(n: usize, a: &impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based with a sentinel column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of_col)
}

/// Tries to re-route the perfect matching so that row `r` takes column `c`,
/// using only tight edges among unfixed rows and columns. On success the
/// matching is updated in place.
fn force(
    r: usize,
    c: usize,
    tight: &impl Fn(usize, usize) -> bool,
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
    fixed_row: &[bool],
    fixed_col: &[bool],
) -> bool {
    let n = col_of_row.len();
    let freed_col = col_of_row[r];
    let orphan = row_of_col[c];
    // BFS over rows: from `orphan`, reach `freed_col` by alternating paths.
    let mut parent_col: Vec<Option<usize>> = vec![None; n];
    let mut seen_row = vec![false; n];
    seen_row[orphan] = true;
    seen_row[r] = true;
    let mut queue = VecDeque::from([orphan]);
    while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if col == c || fixed_col[col] || parent_col[col].is_some() || !tight(row, col) {
                continue;
            }
            parent_col[col] = Some(row);
            if col == freed_col {
                // augment back along the path
                let mut col = col;
                loop {
                    let row = parent_col[col].expect("on path");
                    let prev = col_of_row[row];
                    col_of_row[row] = col;
                    row_of_col[col] = row;
                    if row == orphan {
                        break;
                    }
                    col = prev;
                }
                col_of_row[r] = c;
                row_of_col[c] = r;
                return true;
            }
            let next = row_of_col[col];
            if !seen_row[next] && !fixed_row[next] {
                seen_row[next] = true;
                queue.push_back(next);
            }
        }
    }
    false
}
