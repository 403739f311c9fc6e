//! Minimum-cost bipartite assignment (shortest augmenting path with potentials).

use super::CostMatrix;

/// Optimal one-to-one matching between cost-matrix rows and columns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    /// `(row, col)` pairs in ascending row order.
    pub pairs: Vec<(usize, usize)>,
    /// Rows (proposals) left without a column.
    pub unmatched_rows: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn col_of_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|&(_, c)| c)
    }
}

/// Solves the square problem; returns `(col_of_row, row potentials, col potentials)`.
fn solve_square(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[owner[j] - 1] = j - 1;
    }
    (col_of_row, u[1..].to_vec(), v[1..].to_vec())
}

/// Among all optimal matchings (perfect matchings of the tight-edge graph), picks
/// the lexicographically smallest one row by row.
fn lexicographic_refine(tight: &[Vec<usize>], col_of_row: &mut [usize]) {
    let n = col_of_row.len();
    let mut row_of_col = vec![0usize; n];
    for (r, &c) in col_of_row.iter().enumerate() {
        row_of_col[c] = r;
    }

    #[allow(clippy::too_many_arguments)]
    fn find_path(
        row: usize,
        target: usize,
        skip_col: usize,
        first_free_row: usize,
        tight: &[Vec<usize>],
        row_of_col: &[usize],
        visited: &mut [bool],
        path: &mut Vec<(usize, usize)>,
    ) -> bool {
        for &c in &tight[row] {
            if c == skip_col || visited[c] {
                continue;
            }
            if c != target && row_of_col[c] < first_free_row {
                continue;
            }
            visited[c] = true;
            if c == target
                || find_path(
                    row_of_col[c],
                    target,
                    skip_col,
                    first_free_row,
                    tight,
                    row_of_col,
                    visited,
                    path,
                )
            {
                path.push((row, c));
                return true;
            }
        }
        false
    }

    for i in 0..n {
        for &j in &tight[i] {
            if col_of_row[i] == j {
                break;
            }
            let holder = row_of_col[j];
            if holder < i {
                continue;
            }
            let mut visited = vec![false; n];
            let mut path = Vec::new();
            let target = col_of_row[i];
            if find_path(
                holder,
                target,
                j,
                i + 1,
                tight,
                &row_of_col,
                &mut visited,
                &mut path,
            ) {
                for &(r, c) in &path {
                    col_of_row[r] = c;
                    row_of_col[c] = r;
                }
                col_of_row[i] = j;
                row_of_col[j] = i;
                break;
            }
        }
    }
}

/// Minimum total-cost matching of size `min(rows, cols)`.
///
/// Rectangular inputs are padded to square with zero-cost dummy entries. Among
/// equal-cost optima the lexicographically smallest pair list is returned, with
/// "unmatched" ordered after every real column.
pub fn hungarian_assign(cost: &CostMatrix) -> Assignment {
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 || cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..rows).collect(),
            total_cost: 0.0,
        };
    }
    let n = rows.max(cols);
    let mut square = vec![0.0f64; n * n];
    for i in 0..rows {
        for j in 0..cols {
            square[i * n + j] = cost.get(i, j);
        }
    }
    let (mut col_of_row, u, v) = solve_square(&square, n);

    let scale = square.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-10 * scale;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| square[i * n + j] - u[i] - v[j] <= tol)
                .collect()
        })
        .collect();
    let consistent = (0..n).all(|i| tight[i].contains(&col_of_row[i]));
    if consistent {
        let original = col_of_row.clone();
        lexicographic_refine(&tight, &mut col_of_row);
        let total = |c: &[usize]| (0..n).map(|i| square[i * n + c[i]]).sum::<f64>();
        if total(&col_of_row) > total(&original) {
            col_of_row = original;
        }
    }

    let mut pairs = Vec::with_capacity(rows.min(cols));
    let mut unmatched_rows = Vec::new();
    for (i, &c) in col_of_row.iter().enumerate().take(rows) {
        if c < cols {
            pairs.push((i, c));
        } else {
            unmatched_rows.push(i);
        }
    }
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j)).sum();
    Assignment {
        pairs,
        unmatched_rows,
        total_cost,
    }
}
