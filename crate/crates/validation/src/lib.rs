//! Reference computations for the acceptance suite. Each one is written
//! independently of the library routine it checks.

/// Ranks with ties sharing their average rank, starting at 1.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Minimiser `(w, b)` of `mean (wᵀx + b − t)² + λ‖w‖²`, from the
/// uncentred normal equations in the augmented variable `(w, b)`.
pub fn ridge_reference(rows: &[Vec<f64>], t: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut a = vec![vec![0.0; d + 1]; d + 1];
    let mut rhs = vec![0.0; d + 1];
    for (x, &ti) in rows.iter().zip(t) {
        let z: Vec<f64> = x.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..=d {
            for j in 0..=d {
                a[i][j] += z[i] * z[j] / n;
            }
            rhs[i] += z[i] * ti / n;
        }
    }
    for (i, row) in a.iter_mut().enumerate().take(d) {
        row[i] += lambda;
    }
    let sol = gauss_solve(a, rhs);
    (sol[..d].to_vec(), sol[d])
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `P = B (BᵀB)⁻¹ Bᵀ` for the columns of the `d×k` matrix `basis` (row-major).
pub fn projector_from_columns(basis: &[f64], d: usize, k: usize) -> Vec<f64> {
    let col = |j: usize| (0..d).map(move |i| basis[i * k + j]);
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|a| {
            (0..k)
                .map(|b| col(a).zip(col(b)).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect();
    // Columns of (BᵀB)⁻¹ one unit vector at a time.
    let inv: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            gauss_solve(
                gram.clone(),
                (0..k).map(|i| f64::from(u8::from(i == j))).collect(),
            )
        })
        .collect();
    let mut p = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            let mut s = 0.0;
            for a in 0..k {
                for b in 0..k {
                    s += basis[r * k + a] * inv[b][a] * basis[c * k + b];
                }
            }
            p[r * d + c] = s;
        }
    }
    p
}

pub fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
