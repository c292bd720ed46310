//! Minimum-cost assignment on dense square cost matrices.
//!
//! Shortest augmenting path formulation of the Hungarian method with row and
//! column potentials, `O(n^3)`.

use crate::error::{Error, Result};

/// Optimal assignment: row `i` is matched to column `columns[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub columns: Vec<usize>,
    pub cost: f64,
}

pub fn solve_assignment(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if cost.iter().any(|row| row.len() != n) {
        return Err(Error::Structural("cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Validation("cost matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Assignment {
            columns: vec![],
            cost: 0.0,
        });
    }

    // 1-based indices; row 0 / column 0 are the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut columns = vec![0usize; n];
    for j in 1..=n {
        columns[row_of[j] - 1] = j - 1;
    }
    let total = columns.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment {
        columns,
        cost: total,
    })
}
