//! Minimum-cost bipartite assignment.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

/// Potentials-based O(n^3) solver for a square matrix given as row slices.
/// Returns the column assigned to each row and the row and column potentials,
/// which satisfy `u[i] + v[j] <= cost[i][j]` with equality on the assignment.
fn solve_square(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
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
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Alternating path over tight, unfixed edges from `start` (a row) to the
/// column `target`; returns the rows along it with their new columns.
fn alternating_path(
    start: usize,
    target: usize,
    tight: &[Vec<bool>],
    col_of: &[usize],
    row_of: &[usize],
    fixed_col: &[bool],
    skip_col: usize,
) -> Option<Vec<(usize, usize)>> {
    let k = tight.len();
    let mut came_from: Vec<Option<usize>> = vec![None; k];
    let mut seen = vec![false; k];
    let mut queue = std::collections::VecDeque::from([start]);
    let mut reached = None;
    'search: while let Some(r) = queue.pop_front() {
        for c in 0..k {
            if seen[c] || fixed_col[c] || c == skip_col || !tight[r][c] {
                continue;
            }
            seen[c] = true;
            came_from[c] = Some(r);
            if c == target {
                reached = Some(c);
                break 'search;
            }
            queue.push_back(row_of[c]);
        }
    }
    let mut c = reached?;
    let mut moves = Vec::new();
    loop {
        let r = came_from[c].expect("visited column has a predecessor");
        moves.push((r, c));
        if r == start {
            return Some(moves);
        }
        c = col_of[r];
    }
}

/// Optimal assignment of a rectangular cost matrix.
///
/// The matrix is padded to a square with a constant, so unmatched rows or
/// columns are those paired with padding. Among optimal assignments the
/// lexicographically smallest `(row, col)` sequence is returned, with
/// "unmatched" ordered after every real column.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Assignment> {
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    let (n, m) = cost.shape();
    let k = n.max(m);
    let square: Vec<Vec<f64>> = (0..k)
        .map(|r| (0..k).map(|c| if r < n && c < m { cost[(r, c)] } else { 0.0 }).collect())
        .collect();
    let (mut col_of, u, v) = solve_square(&square);
    let scale = cost.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-10 * scale * k.max(1) as f64;
    let tight: Vec<Vec<bool>> = (0..k)
        .map(|r| (0..k).map(|c| square[r][c] - u[r] - v[c] <= tol || col_of[r] == c).collect())
        .collect();

    let mut row_of = vec![0; k];
    for (r, &c) in col_of.iter().enumerate() {
        row_of[c] = r;
    }
    let mut fixed_col = vec![false; k];
    for r in 0..n {
        let current = col_of[r];
        let mut chosen = current;
        for c in (0..m).filter(|&c| !fixed_col[c] && tight[r][c]) {
            if c == current {
                break;
            }
            // Give `c` to `r` and re-route its owner to the column `r` frees.
            let owner = row_of[c];
            if let Some(moves) = alternating_path(owner, current, &tight, &col_of, &row_of, &fixed_col, c) {
                for (mr, mc) in moves {
                    col_of[mr] = mc;
                    row_of[mc] = mr;
                }
                chosen = c;
                break;
            }
        }
        if chosen != current {
            col_of[r] = chosen;
            row_of[chosen] = r;
        }
        fixed_col[chosen] = true;
    }
    col_of.truncate(n);

    let mut matches = Vec::new();
    let mut unmatched_rows = Vec::new();
    let mut col_used = vec![false; m];
    for (r, &c) in col_of.iter().enumerate() {
        if c < m {
            matches.push((r, c));
            col_used[c] = true;
        } else {
            unmatched_rows.push(r);
        }
    }
    let total_cost = matches.iter().map(|&(r, c)| cost[(r, c)]).sum();
    Ok(Assignment {
        matches,
        unmatched_rows,
        unmatched_cols: (0..m).filter(|&c| !col_used[c]).collect(),
        total_cost,
    })
}
