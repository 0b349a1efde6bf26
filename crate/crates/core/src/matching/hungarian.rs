//! Exact minimum-cost assignment on a dense rectangular cost matrix.
//!
//! Jonker–Volgenant-style shortest augmenting paths with row/column
//! potentials: O(rows² · cols) with rows ≤ cols, exact (no heuristics).
//! Costs may be any finite `f64`, including negatives.

use crate::error::{Error, Result};

/// Assigns each row (of the smaller side) to a distinct column so the
/// summed cost is minimal. `cost` is row-major `rows × cols`. Returns
/// `min(rows, cols)` pairs `(row, col)` sorted by row.
pub fn min_cost_assignment(
    cost: &[f64],
    rows: usize,
    cols: usize,
) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::shape(
            "min_cost_assignment",
            format!("{rows}×{cols} matrix needs {} entries, got {}", rows * cols, cost.len()),
        ));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if let Some(bad) = cost.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!(
                "assignment cost at ({}, {}) is {}",
                bad / cols,
                bad % cols,
                cost[bad]
            ),
        });
    }
    if rows > cols {
        let mut transposed = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = cost[r * cols + c];
            }
        }
        let mut pairs: Vec<(usize, usize)> = solve(&transposed, cols, rows)
            .into_iter()
            .map(|(r, c)| (c, r))
            .collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    Ok(solve(cost, rows, cols))
}

/// Core solver; requires `rows ≤ cols`. Indices are shifted by one so 0
/// can serve as the "unassigned" sentinel.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    debug_assert!(rows <= cols);
    let mut u = vec![0.0_f64; rows + 1]; // row potentials
    let mut v = vec![0.0_f64; cols + 1]; // column potentials
    let mut assigned_row = vec![0_usize; cols + 1]; // column → row, 0 = free
    let mut way = vec![0_usize; cols + 1]; // augmenting-path predecessors

    for i in 1..=rows {
        assigned_row[0] = i;
        let mut j0 = 0_usize;
        let mut min_slack = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        // Dijkstra over reduced costs until a free column is reached.
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if reduced < min_slack[j] {
                    min_slack[j] = reduced;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        // Walk the path backwards, flipping assignments.
        while j0 != 0 {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=cols)
        .filter(|&j| assigned_row[j] != 0)
        .map(|j| (assigned_row[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}
