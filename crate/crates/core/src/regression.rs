//! Small dense least-squares solver for the latency regressions.
//!
//! Columns are scaled to unit max-norm, then the normal equations are solved
//! by Cholesky. When the scaled Gram matrix has a condition number above
//! [`GRAM_CONDITION_LIMIT`] the solve falls back to Householder QR with column
//! pivoting on the design matrix itself.

/// Largest Gram condition number accepted before falling back to pivoted QR.
pub const GRAM_CONDITION_LIMIT: f64 = 1e12;

/// Relative pivot size below which the design matrix is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Fits `y ≈ w · x + b`. Every row of `xs` must have the same length.
/// Returns `(w, b)`, or `None` when the system has no unique solution.
pub fn least_squares(xs: &[&[f64]], ys: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = xs.len();
    let k = xs.first().map_or(0, |r| r.len());
    let p = k + 1;
    if n < p || ys.len() != n {
        return None;
    }

    let mut scale = vec![1.0; p];
    for (j, s) in scale.iter_mut().enumerate().take(k) {
        *s = xs.iter().map(|r| r[j].abs()).fold(0.0, f64::max);
        if *s == 0.0 {
            return None;
        }
    }

    // design matrix, row-major, intercept column last
    let mut a = vec![0.0; n * p];
    for (i, row) in xs.iter().enumerate() {
        for j in 0..k {
            a[i * p + j] = row[j] / scale[j];
        }
        a[i * p + k] = 1.0;
    }

    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    for i in 0..n {
        let row = &a[i * p..(i + 1) * p];
        for r in 0..p {
            rhs[r] += row[r] * ys[i];
            for c in 0..p {
                gram[r * p + c] += row[r] * row[c];
            }
        }
    }

    let eig = symmetric_eigenvalues(&gram, p);
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let scaled = if lo > 0.0 && hi / lo <= GRAM_CONDITION_LIMIT {
        cholesky_solve(&gram, &rhs, p)?
    } else {
        log::debug!("gram condition {:.3e} exceeds limit, using pivoted QR", hi / lo);
        pivoted_qr_solve(&a, ys, n, p)?
    };

    let weights = (0..k).map(|j| scaled[j] / scale[j]).collect();
    Some((weights, scaled[k]))
}

fn cholesky_solve(g: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut sum = g[i * p + j];
            for m in 0..j {
                sum -= l[i * p + m] * l[j * p + m];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * p + i] = sum.sqrt();
            } else {
                l[i * p + j] = sum / l[j * p + j];
            }
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|m| l[i * p + m] * z[m]).sum();
        z[i] = (b[i] - s) / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|m| l[m * p + i] * x[m]).sum();
        x[i] = (z[i] - s) / l[i * p + i];
    }
    Some(x)
}

/// Householder QR with column pivoting; solves min ||A x - y|| for full-rank A.
fn pivoted_qr_solve(a: &[f64], y: &[f64], n: usize, p: usize) -> Option<Vec<f64>> {
    let mut r = a.to_vec();
    let mut qty = y.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let col_norm =
        |r: &[f64], c: usize, from: usize| -> f64 { (from..n).map(|i| r[i * p + c] * r[i * p + c]).sum::<f64>() };

    let mut first_pivot = 0.0;
    for step in 0..p {
        let best = (step..p)
            .max_by(|&x, &y| col_norm(&r, x, step).total_cmp(&col_norm(&r, y, step)))
            .unwrap();
        if best != step {
            perm.swap(step, best);
            for i in 0..n {
                r.swap(i * p + step, i * p + best);
            }
        }

        let norm = col_norm(&r, step, step).sqrt();
        if step == 0 {
            first_pivot = norm;
        }
        if norm <= RANK_TOLERANCE * first_pivot || norm == 0.0 {
            return None;
        }
        let alpha = if r[step * p + step] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (step..n).map(|i| r[i * p + step]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in step..p {
                let dot: f64 = (step..n).map(|i| v[i - step] * r[i * p + c]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in step..n {
                    r[i * p + c] -= f * v[i - step];
                }
            }
            let dot: f64 = (step..n).map(|i| v[i - step] * qty[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in step..n {
                qty[i] -= f * v[i - step];
            }
        }
    }

    let mut z = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|c| r[i * p + c] * z[c]).sum();
        z[i] = (qty[i] - s) / r[i * p + i];
    }
    let mut x = vec![0.0; p];
    for (i, &col) in perm.iter().enumerate() {
        x[col] = z[i];
    }
    Some(x)
}

/// Cyclic Jacobi eigenvalues of a small symmetric matrix.
fn symmetric_eigenvalues(m: &[f64], p: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _sweep in 0..64 {
        let off: f64 = (0..p)
            .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * p + j] * a[i * p + j])
            .sum();
        let diag: f64 = (0..p).map(|i| a[i * p + i] * a[i * p + i]).sum();
        if off <= 1e-30 * diag || off == 0.0 {
            break;
        }
        for i in 0..p {
            for j in i + 1..p {
                let aij = a[i * p + j];
                if aij == 0.0 {
                    continue;
                }
                let theta = (a[j * p + j] - a[i * p + i]) / (2.0 * aij);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for m in 0..p {
                    let ami = a[m * p + i];
                    let amj = a[m * p + j];
                    a[m * p + i] = c * ami - s * amj;
                    a[m * p + j] = s * ami + c * amj;
                }
                for m in 0..p {
                    let aim = a[i * p + m];
                    let ajm = a[j * p + m];
                    a[i * p + m] = c * aim - s * ajm;
                    a[j * p + m] = s * aim + c * ajm;
                }
            }
        }
    }
    (0..p).map(|i| a[i * p + i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let mut e = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        e.sort_by(f64::total_cmp);
        assert!((e[0] - 1.0).abs() < 1e-12);
        assert!((e[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn qr_and_cholesky_agree() {
        let rows: Vec<[f64; 2]> = (0..20)
            .map(|i| [i as f64 * 0.37 + 1.0, ((i * 7) % 11) as f64])
            .collect();
        let ys: Vec<f64> = rows
            .iter()
            .map(|r| 0.5 * r[0] - 1.25 * r[1] + 3.0 + 1e-3 * (r[0] * 13.0).sin())
            .collect();
        let n = rows.len();
        let mut a = vec![0.0; n * 3];
        for (i, r) in rows.iter().enumerate() {
            a[i * 3] = r[0];
            a[i * 3 + 1] = r[1];
            a[i * 3 + 2] = 1.0;
        }
        let qr = pivoted_qr_solve(&a, &ys, n, 3).unwrap();
        let mut g = vec![0.0; 9];
        let mut b = vec![0.0; 3];
        for i in 0..n {
            for r in 0..3 {
                b[r] += a[i * 3 + r] * ys[i];
                for c in 0..3 {
                    g[r * 3 + c] += a[i * 3 + r] * a[i * 3 + c];
                }
            }
        }
        let ch = cholesky_solve(&g, &b, 3).unwrap();
        for (x, y) in qr.iter().zip(&ch) {
            assert!((x - y).abs() < 1e-9, "{qr:?} vs {ch:?}");
        }
    }

    #[test]
    fn ill_conditioned_but_full_rank_uses_fallback() {
        // second column nearly equal to the first
        let xs: Vec<Vec<f64>> = (1..30)
            .map(|i| {
                let x = i as f64;
                vec![x, x * (1.0 + 1e-7 * (i % 3) as f64)]
            })
            .collect();
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let ys: Vec<f64> = xs.iter().map(|r| 2.0 * r[0] + 3.0 * r[1] + 1.0).collect();
        let (w, b) = least_squares(&rows, &ys).unwrap();
        let resid: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(r, y)| (w[0] * r[0] + w[1] * r[1] + b - y).abs())
            .fold(0.0, f64::max);
        assert!(resid < 1e-6, "{w:?} {b}");
    }

    #[test]
    fn constant_feature_is_collinear_with_intercept() {
        let xs = [[5.0], [5.0], [5.0]];
        let rows: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        assert!(least_squares(&rows, &[1.0, 2.0, 3.0]).is_none());
    }
}
