//! Minimum-cost assignment via the Hungarian algorithm with potentials,
//! O(n^3) over an n x n integer cost matrix.

/// Solves the square assignment problem. Returns the minimal total cost
/// and, for each row, the column assigned to it.
///
/// Costs must be small enough that `sum(costs) + max(cost)` fits in `i64`.
pub fn solve(cost: &[Vec<i64>]) -> (i64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0, Vec::new());
    }
    debug_assert!(cost.iter().all(|row| row.len() == n));

    // 1-based arrays in the classic potential formulation: u over rows,
    // v over columns, way[j] remembers the augmenting path.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut assignment = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        assignment[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assignment[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
            for j in 0..=n {
                if used[j] {
                    u[assignment[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assignment[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assignment[j0] = assignment[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    let mut total = 0i64;
    for j in 1..=n {
        if assignment[j] != 0 {
            row_to_col[assignment[j] - 1] = j - 1;
            total += cost[assignment[j] - 1][j - 1];
        }
    }
    (total, row_to_col)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &[Vec<i64>]) -> i64 {
        let n = cost.len();
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = i64::MAX;
        permute(&mut cols, 0, &mut |perm| {
            let total: i64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            best = best.min(total);
        });
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn matches_brute_force_on_small_matrices() {
        let mut state = 0x2545F49_14F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..200 {
            let n = (next() % 5 + 1) as usize;
            let cost: Vec<Vec<i64>> = (0..n)
                .map(|_| (0..n).map(|_| (next() % 50) as i64).collect())
                .collect();
            let (got, cols) = solve(&cost);
            assert_eq!(got, brute_force(&cost));
            // assignment is a permutation and reproduces the total
            let mut seen = vec![false; n];
            let mut total = 0;
            for (i, &j) in cols.iter().enumerate() {
                assert!(!seen[j]);
                seen[j] = true;
                total += cost[i][j];
            }
            assert_eq!(total, got);
        }
    }

    #[test]
    fn diagonal_zero_is_free() {
        let cost = vec![
            vec![0, 7, 7],
            vec![7, 0, 7],
            vec![7, 7, 0],
        ];
        assert_eq!(solve(&cost).0, 0);
    }
}
