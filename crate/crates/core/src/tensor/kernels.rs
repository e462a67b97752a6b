//! Dense and sparse compute kernels. Row-parallel where rows are independent;
//! every reduction runs in a fixed order so results do not depend on the
//! thread schedule.

use crate::par;

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n == 0 {
        return out;
    }
    par::for_each_row_mut(&mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Sequential reference for benches.
pub fn matmul_sequential(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `g (m×n) · bᵀ` where `b` is `k×n`; result `m×k`.
pub fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    if k == 0 {
        return out;
    }
    par::for_each_row_mut(&mut out, k, |i, row| {
        let grow = &g[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * n..(j + 1) * n];
            *o = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    out
}

/// `aᵀ (k×m) · g (m×n)` where `a` is `m×k`; result `k×n`.
pub fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    matmul(&at, g, k, m, n)
}

/// Weighted row aggregation: `out[r] = Σ_{e ∈ row r} w[e] · x[col[e]]`.
/// `offsets` has `n_rows + 1` entries delimiting each row's edge range.
pub fn spmm(offsets: &[usize], cols: &[usize], w: &[f64], x: &[f64], n_rows: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_rows * width];
    par::for_each_row_mut(&mut out, width, |r, row| {
        for e in offsets[r]..offsets[r + 1] {
            let we = w[e];
            let xr = &x[cols[e] * width..(cols[e] + 1) * width];
            for (o, &xv) in row.iter_mut().zip(xr) {
                *o += we * xv;
            }
        }
    });
    out
}

/// Sequential reference for benches.
pub fn spmm_sequential(offsets: &[usize], cols: &[usize], w: &[f64], x: &[f64], n_rows: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_rows * width];
    for r in 0..n_rows {
        for e in offsets[r]..offsets[r + 1] {
            for j in 0..width {
                out[r * width + j] += w[e] * x[cols[e] * width + j];
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
