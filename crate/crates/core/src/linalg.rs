//! Dense linear solves for the small systems raised by the traffic
//! equations and the route-chain moment recursions.

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot collapses relative to the input scale,
/// which signals a singular or numerically unusable system.
pub(crate) fn solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    let scale = a
        .iter()
        .flatten()
        .fold(1.0f64, |acc, &v| acc.max(v.abs()));
    let tiny = scale * 1e-14;

    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a[i].clone();
            row.push(b[i]);
            row
        })
        .collect();

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .expect("non-empty pivot range");
        if m[pivot_row][col].abs() <= tiny {
            return None;
        }
        m.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = m[row][col] / m[col][col];
            if factor != 0.0 {
                for k in col..=n {
                    let upper = m[col][k];
                    m[row][k] -= factor * upper;
                }
            }
        }
    }

    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = m[row][n];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Solves `(I - M) x = b`, the shape shared by absorbing-chain moment
/// systems.
pub(crate) fn solve_i_minus(m: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if i == j { 1.0 - m[i][j] } else { -m[i][j] })
                .collect()
        })
        .collect();
    solve(&a, b)
}

/// Max-norm residual `max_i |A x - b|_i`.
pub(crate) fn residual(a: &[Vec<f64>], x: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(row, &bi)| {
            let ax: f64 = row.iter().zip(x).map(|(&aij, &xj)| aij * xj).sum();
            (ax - bi).abs()
        })
        .fold(0.0, f64::max)
}
