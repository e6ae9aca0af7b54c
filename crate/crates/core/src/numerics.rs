//! Small numerical helpers shared across modules.

/// `n` logarithmically spaced points in `[lo, hi]`, endpoints included.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// `n` uniformly spaced points in `[lo, hi]`, endpoints included.
pub fn lin_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Golden-section search for a local minimum of `f` on `[a, b]`.
///
/// Returns `(argmin, min)`. The endpoints are also compared so the result is
/// never worse than `min(f(a), f(b))`.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, iters: usize) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (a, b);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for x in [a, b] {
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

/// Minimum of `f` over a log-spaced grid on `[lo, hi]`, polished by golden
/// section between the neighbours of the best grid point.
pub fn log_grid_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    let grid = log_space(lo, hi, n);
    let (i, v) = grid
        .iter()
        .map(|&x| f(x))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty grid");
    let (a, b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(n - 1)]);
    let (x, fx) = golden_section_min(&f, a, b, 100);
    if fx < v {
        (x, fx)
    } else {
        (grid[i], v)
    }
}

/// Bisection for a root of `f` in `[a, b]`; `f(a)` and `f(b)` must differ in sign.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let mut fa = f(a);
    for _ in 0..iters {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Five-point Gauss-Legendre nodes and weights on `[0, 1]`.
pub const GAUSS5: [(f64, f64); 5] = [
    (0.046_910_077_030_668_004, 0.118_463_442_528_094_54),
    (0.230_765_344_947_158_45, 0.239_314_335_249_683_23),
    (0.5, 0.284_444_444_444_444_45),
    (0.769_234_655_052_841_6, 0.239_314_335_249_683_23),
    (0.953_089_922_969_332, 0.118_463_442_528_094_54),
];

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Solves the dense linear system `a x = b` by Gaussian elimination with
/// partial pivoting. Returns `None` for a (numerically) singular matrix.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[row][c] -= f * a[col][c];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn golden_finds_parabola_minimum() {
        let (x, v) = golden_section_min(|x| (x - 0.3).powi(2) + 1.0, -1.0, 2.0, 100);
        assert_relative_eq!(x, 0.3, epsilon = 1e-7);
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn gauss5_integrates_degree_nine() {
        let s: f64 = GAUSS5.iter().map(|(x, w)| w * x.powi(9)).sum();
        assert_relative_eq!(s, 0.1, epsilon = 1e-14);
    }

    #[test]
    fn dense_solve() {
        let x = solve_dense(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 5.0]).unwrap();
        assert_relative_eq!(x[0], 0.8, epsilon = 1e-14);
        assert_relative_eq!(x[1], 1.4, epsilon = 1e-14);
    }
}
