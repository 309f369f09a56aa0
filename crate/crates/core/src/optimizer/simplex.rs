//! Dense tableau simplex for `max cᵀx  s.t.  Ax <= b, x >= 0` with `b >= 0`.
//!
//! The origin is always feasible under `b >= 0`, so a single phase
//! suffices. Bland's rule rules out cycling; the problems solved here have a
//! few dozen columns at most.

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Unbounded,
}

pub fn maximize(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let m = a.len();
    let n = c.len();
    assert_eq!(b.len(), m);
    assert!(b.iter().all(|v| *v >= 0.0), "right-hand side must be nonnegative");

    // columns: n structural, m slack, then rhs
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        assert_eq!(a[i].len(), n);
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();

    loop {
        // Bland: lowest-index improving column
        let Some(col) = (0..n + m).find(|&j| t[m][j] < -EPS) else {
            break;
        };
        let mut pivot: Option<(usize, f64)> = None;
        for i in 0..m {
            if t[i][col] > EPS {
                let ratio = t[i][width - 1] / t[i][col];
                pivot = match pivot {
                    None => Some((i, ratio)),
                    Some((bi, br)) => {
                        if ratio < br - EPS || (ratio <= br + EPS && basis[i] < basis[bi]) {
                            Some((i, ratio))
                        } else {
                            Some((bi, br))
                        }
                    }
                };
            }
        }
        let Some((row, _)) = pivot else {
            return LpOutcome::Unbounded;
        };
        let p = t[row][col];
        for v in t[row].iter_mut() {
            *v /= p;
        }
        for i in 0..=m {
            if i != row {
                let factor = t[i][col];
                if factor != 0.0 {
                    for j in 0..width {
                        t[i][j] -= factor * t[row][j];
                    }
                }
            }
        }
        basis[row] = col;
    }

    let mut x = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            x[bv] = t[i][width - 1];
        }
    }
    LpOutcome::Optimal {
        value: t[m][width - 1],
        x,
    }
}
