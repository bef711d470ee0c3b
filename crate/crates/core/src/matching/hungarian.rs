use super::MatchError;

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Shortest augmenting path with row/column potentials (Jonker–Volgenant
/// style), `O(n²·m)`. Returns `(row, col)` pairs sorted by row; the surplus
/// side of a rectangular matrix stays unmatched.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>, MatchError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(MatchError::Input("ragged cost matrix".into()));
    }
    if let Some((i, j)) = cost
        .iter()
        .enumerate()
        .find_map(|(i, r)| r.iter().position(|v| !v.is_finite()).map(|j| (i, j)))
    {
        return Err(MatchError::Input(format!("non-finite cost at ({i}, {j})")));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows <= cols {
        Ok(solve(rows, cols, |i, j| cost[i][j]))
    } else {
        let mut pairs: Vec<(usize, usize)> = solve(cols, rows, |i, j| cost[j][i])
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// `n <= m`; every one of the `n` rows gets a column.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize)> {
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
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
            for j in 0..=m {
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
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    pairs
}

pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j]).sum()
}
