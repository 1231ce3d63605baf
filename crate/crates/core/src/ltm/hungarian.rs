use crate::diff::Tensor2;
use crate::error::{Error, Result};

/// Optimal one-to-one assignment on a rectangular score matrix.
///
/// Returns `min(rows, cols)` pairs sorted by row. Among all optimal
/// assignments the one whose row-to-column vector is lexicographically
/// smallest is returned, so ties resolve the same way on every platform.
pub fn hungarian(cost: &Tensor2, maximize: bool) -> Result<Vec<(usize, usize)>> {
    if !cost.is_finite() {
        return Err(Error::InvalidInput("assignment costs must be finite".into()));
    }
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return Ok(Vec::new());
    }
    // Short sides are padded with zero-cost columns; with rows <= cols the
    // missing rows are only implicit (see `Tight`).
    let m = r.max(c);
    let sign = if maximize { -1.0 } else { 1.0 };
    let mut a = vec![0.0; r * m];
    for i in 0..r {
        for j in 0..c {
            a[i * m + j] = sign * cost.get(i, j);
        }
    }
    let (row_assign, u, v) = solve(&a, r, m);
    let scale = a.iter().fold(1.0f64, |s, x| s.max(x.abs()));
    let tight = Tight {
        a: &a,
        u: &u,
        v: &v,
        rows: r,
        m,
        tol: 1e-9 * scale,
    };
    // Padding rows own the leftover columns. They cost 0 everywhere and
    // carry a zero potential, so their tight columns are those with v = 0.
    let mut assign = row_assign;
    let mut taken = vec![false; m];
    for &j in &assign {
        taken[j] = true;
    }
    assign.extend((0..m).filter(|&j| !taken[j]));
    lexicographic_refine(&tight, &mut assign, r);
    Ok((0..r).filter(|&i| assign[i] < c).map(|i| (i, assign[i])).collect())
}

/// Reduced-cost test on the padded square problem.
struct Tight<'a> {
    a: &'a [f64],
    u: &'a [f64],
    v: &'a [f64],
    rows: usize,
    m: usize,
    tol: f64,
}

impl Tight<'_> {
    fn get(&self, i: usize, j: usize) -> bool {
        let reduced = if i < self.rows {
            self.a[i * self.m + j] - self.u[i] - self.v[j]
        } else {
            -self.v[j]
        };
        reduced <= self.tol
    }
}

/// Shortest-augmenting-path Hungarian method with dual potentials on `n`
/// rows and `m >= n` columns. Returns the row-to-column assignment and the
/// potentials `u`, `v` with `a[i][j] - u[i] - v[j] >= 0`, equal to zero on
/// assigned pairs. Every `v` is non-positive and zero on unassigned columns.
fn solve(a: &[f64], n: usize, m: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![inf; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &a[(i0 - 1) * m..i0 * m];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
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
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    (assign, u[1..].to_vec(), v[1..].to_vec())
}

/// Every optimal assignment uses only tight edges of an optimal dual, and
/// every perfect matching on tight edges is optimal. Walking rows in order,
/// each row takes the smallest column that still admits a perfect tight
/// matching of the remaining rows; the swap is an alternating cycle.
fn lexicographic_refine(tight: &Tight, assign: &mut [usize], rows: usize) {
    let n = assign.len();
    let mut owner = vec![0; n];
    for (i, &j) in assign.iter().enumerate() {
        owner[j] = i;
    }
    for r in 0..rows {
        for c in 0..assign[r] {
            if !tight.get(r, c) || owner[c] < r {
                continue;
            }
            if let Some(path) = alternating_path(tight, assign, &owner, r, owner[c], assign[r]) {
                for &(row, col) in &path {
                    assign[row] = col;
                    owner[col] = row;
                }
                assign[r] = c;
                owner[c] = r;
                break;
            }
        }
    }
}

/// Re-homes `start` (and whoever it displaces) onto tight edges so that
/// column `goal` ends up used, touching only rows after `fixed`. Returns the
/// new `(row, column)` pairs.
fn alternating_path(
    tight: &Tight,
    assign: &[usize],
    owner: &[usize],
    fixed: usize,
    start: usize,
    goal: usize,
) -> Option<Vec<(usize, usize)>> {
    let n = assign.len();
    let mut prev_row: Vec<Option<usize>> = vec![None; n];
    let mut seen_col = vec![false; n];
    let mut seen_row = vec![false; n];
    let mut queue = std::collections::VecDeque::from([start]);
    seen_row[start] = true;
    seen_col[assign[start]] = true;
    while let Some(row) = queue.pop_front() {
        for col in 0..n {
            if seen_col[col] || !tight.get(row, col) || col == assign[row] {
                continue;
            }
            seen_col[col] = true;
            prev_row[col] = Some(row);
            if col == goal {
                let mut path = Vec::new();
                let mut c = col;
                loop {
                    let r = prev_row[c].unwrap();
                    path.push((r, c));
                    if r == start {
                        return Some(path);
                    }
                    c = assign[r];
                }
            }
            let next = owner[col];
            if next <= fixed || seen_row[next] {
                continue;
            }
            seen_row[next] = true;
            queue.push_back(next);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn next_permutation(p: &mut [usize]) -> bool {
        let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
            return false;
        };
        let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }

    fn total(cost: &Tensor2, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    fn brute_best(cost: &Tensor2, maximize: bool) -> f64 {
        fn rec(cost: &Tensor2, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, maximize: bool, need: usize, taken: usize) {
            let (r, c) = cost.shape();
            if taken == need {
                if (maximize && acc > *best) || (!maximize && acc < *best) {
                    *best = acc;
                }
                return;
            }
            if row == r {
                return;
            }
            // rows may be skipped only when there are more rows than columns
            if r - row > need - taken {
                rec(cost, row + 1, used, acc, best, maximize, need, taken);
            }
            for j in 0..c {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best, maximize, need, taken + 1);
                    used[j] = false;
                }
            }
        }
        let mut best = if maximize { f64::NEG_INFINITY } else { f64::INFINITY };
        let need = cost.rows().min(cost.cols());
        rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best, maximize, need, 0);
        best
    }

    #[test]
    fn dominant_diagonal() {
        let a = Tensor2::from_rows(&[[0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9]], 3).unwrap();
        assert_eq!(hungarian(&a, true).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn trivial_and_empty() {
        assert_eq!(hungarian(&Tensor2::scalar(-3.0), false).unwrap(), vec![(0, 0)]);
        assert!(hungarian(&Tensor2::zeros(0, 4), false).unwrap().is_empty());
        assert!(hungarian(&Tensor2::scalar(f64::NAN), false).is_err());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let flat = Tensor2::filled(3, 3, 1.0);
        assert_eq!(hungarian(&flat, true).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
        // both anti-diagonal and diagonal are optimal; diagonal wins
        let a = Tensor2::from_rows(&[[1.0, 1.0], [1.0, 1.0]], 2).unwrap();
        assert_eq!(hungarian(&a, false).unwrap(), vec![(0, 0), (1, 1)]);
        let a = Tensor2::from_rows(&[[5.0, 0.0, 0.0], [0.0, 1.0, 1.0]], 3).unwrap();
        assert_eq!(hungarian(&a, true).unwrap(), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn rectangular_covers_the_short_side() {
        let a = Tensor2::from_rows(&[[0.1], [0.8], [0.3]], 1).unwrap();
        assert_eq!(hungarian(&a, true).unwrap(), vec![(1, 0)]);
        let a = Tensor2::from_rows(&[[0.1, 0.8, 0.3]], 3).unwrap();
        assert_eq!(hungarian(&a, false).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn six_by_six_matches_all_permutations() {
        let mut s = 17u64;
        let data: Vec<f64> = (0..36)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        let a = Tensor2::from_vec(6, 6, data).unwrap();
        let pairs = hungarian(&a, true).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!((total(&a, &pairs) - brute_best(&a, true)).abs() < 1e-12);
    }

    fn matrix() -> impl Strategy<Value = Tensor2> {
        (1usize..6, 1usize..6).prop_flat_map(|(r, c)| {
            prop::collection::vec((-5i32..5).prop_map(|x| x as f64 * 0.5), r * c)
                .prop_map(move |d| Tensor2::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn optimal_and_one_to_one(a in matrix(), maximize in any::<bool>()) {
            let pairs = hungarian(&a, maximize).unwrap();
            prop_assert_eq!(pairs.len(), a.rows().min(a.cols()));
            let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            cols.sort();
            cols.dedup();
            prop_assert_eq!(cols.len(), pairs.len());
            prop_assert!((total(&a, &pairs) - brute_best(&a, maximize)).abs() < 1e-9);
        }

        #[test]
        fn rectangular_tie_break_is_lexicographic(r in 1usize..5, c in 1usize..5, d in prop::collection::vec(0i32..3, 16)) {
            // unmatched rows count as column `c`, after every real column
            let a = Tensor2::from_vec(r, c, d[..r * c].iter().map(|&x| x as f64).collect()).unwrap();
            let mut got = vec![c; r];
            for (i, j) in hungarian(&a, true).unwrap() {
                got[i] = j;
            }
            fn rec(a: &Tensor2, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, out: &mut Vec<(f64, Vec<usize>)>) {
                let (r, c) = a.shape();
                if row == r {
                    if cur.iter().filter(|&&j| j < c).count() == r.min(c) {
                        let t = cur.iter().enumerate().filter(|p| *p.1 < c).map(|(i, &j)| a.get(i, j)).sum();
                        out.push((t, cur.clone()));
                    }
                    return;
                }
                for j in 0..=c {
                    if j < c && used[j] {
                        continue;
                    }
                    if j < c {
                        used[j] = true;
                    }
                    cur.push(j);
                    rec(a, row + 1, used, cur, out);
                    cur.pop();
                    if j < c {
                        used[j] = false;
                    }
                }
            }
            let mut all = Vec::new();
            rec(&a, 0, &mut vec![false; c], &mut Vec::new(), &mut all);
            let best = all.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            let first = all.into_iter().filter(|x| (x.0 - best).abs() < 1e-9).map(|x| x.1).min().unwrap();
            prop_assert_eq!(got, first);
        }

        #[test]
        fn tie_break_is_lexicographic(n in 1usize..6, d in prop::collection::vec(0i32..3, 25)) {
            // small integer costs produce many tied optima
            let a = Tensor2::from_vec(n, n, d[..n * n].iter().map(|&x| x as f64).collect()).unwrap();
            let got: Vec<usize> = hungarian(&a, true).unwrap().iter().map(|p| p.1).collect();
            let best = brute_best(&a, true);
            let mut perm: Vec<usize> = (0..n).collect();
            let first = loop {
                let t: f64 = perm.iter().enumerate().map(|(i, &j)| a.get(i, j)).sum();
                if (t - best).abs() < 1e-9 {
                    break perm.clone();
                }
                if !next_permutation(&mut perm) {
                    unreachable!();
                }
            };
            prop_assert_eq!(got, first);
        }
    }
}
