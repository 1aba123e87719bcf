use crate::error::{Error, Result};

/// Dense `rows × cols` cost table.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != rows * cols {
            return Err(Error::CostMatrix(format!(
                "{} entries for a {rows}x{cols} matrix",
                costs.len()
            )));
        }
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::CostMatrix(format!(
                "non-finite entry at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::CostMatrix("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.costs[r * self.cols + c] = v;
    }
}

/// Injective map from ground-truth rows to prediction columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAssignment {
    /// `(gt_index, pred_slot)` sorted by `gt_index`.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchAssignment {
    pub fn slot_of(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }

    pub fn matched_slots(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Minimum-cost assignment by the Kuhn-Munkres method with potentials.
///
/// Non-square inputs are padded to square with dummy entries of
/// `max_entry + 1`; pairs touching dummy rows or columns are removed.
pub fn hungarian_solve(c: &CostMatrix) -> Result<MatchAssignment> {
    if let Some(i) = c.costs.iter().position(|v| !v.is_finite()) {
        return Err(Error::CostMatrix(format!(
            "non-finite entry at flat index {i}"
        )));
    }
    if c.rows == 0 || c.cols == 0 {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let n = c.rows.max(c.cols);
    let pad = c.costs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let cost = |r: usize, col: usize| -> f64 {
        if r < c.rows && col < c.cols {
            c.get(r, col)
        } else {
            pad
        }
    };

    // 1-based shortest augmenting path; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                // strict comparison keeps the lowest slot index on ties
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .filter(|&(r, col)| r < c.rows && col < c.cols)
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, col)| c.get(r, col)).sum();
    Ok(MatchAssignment { pairs, total_cost })
}
