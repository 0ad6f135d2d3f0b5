//! Flat-slice numeric kernels shared by the tape and the inference path.

const LANES: usize = 8;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    let mut s = tail;
    for v in acc {
        s += v;
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y[j] += x[0]*b[0][j] + ... + x[3]*b[3][j]`, added left to right so the
/// result equals four successive `axpy` calls.
#[inline]
fn axpy4(x: [f64; 4], b: [&[f64]; 4], y: &mut [f64]) {
    let n = y.len();
    let (b0, b1, b2, b3) = (&b[0][..n], &b[1][..n], &b[2][..n], &b[3][..n]);
    for j in 0..n {
        y[j] = y[j] + x[0] * b0[j] + x[1] * b1[j] + x[2] * b2[j] + x[3] * b3[j];
    }
}

/// `out += x W` for `x [k]`, `W [k,n]`, accumulating over `k` in order.
fn vecmat_acc(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    let k = x.len();
    let mut p = 0;
    while p + 4 <= k {
        let rows = [&w[p * n..], &w[(p + 1) * n..], &w[(p + 2) * n..], &w[(p + 3) * n..]];
        axpy4([x[p], x[p + 1], x[p + 2], x[p + 3]], rows, out);
        p += 4;
    }
    while p < k {
        axpy(x[p], &w[p * n..(p + 1) * n], out);
        p += 1;
    }
}

/// `[m,k] x [k,n] -> [m,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        vecmat_acc(&a[i * k..(i + 1) * k], b, n, &mut out[i * n..(i + 1) * n]);
    }
    out
}

/// Four dot products of `a` with `b[0..4]`, each summed exactly like `dot`.
fn dot4(a: &[f64], b: [&[f64]; 4]) -> [f64; 4] {
    let k = a.len();
    let b = [&b[0][..k], &b[1][..k], &b[2][..k], &b[3][..k]];
    let mut acc = [[0.0f64; LANES]; 4];
    let full = k - k % LANES;
    let mut c = 0;
    while c < full {
        for l in 0..LANES {
            let x = a[c + l];
            acc[0][l] += x * b[0][c + l];
            acc[1][l] += x * b[1][c + l];
            acc[2][l] += x * b[2][c + l];
            acc[3][l] += x * b[3][c + l];
        }
        c += LANES;
    }
    let mut out = [0.0; 4];
    for r in 0..4 {
        let mut tail = 0.0;
        for i in full..k {
            tail += a[i] * b[r][i];
        }
        let mut s = tail;
        for v in acc[r] {
            s += v;
        }
        out[r] = s;
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        let row = &mut out[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let rows = [&b[j * k..], &b[(j + 1) * k..], &b[(j + 2) * k..], &b[(j + 3) * k..]];
            row[j..j + 4].copy_from_slice(&dot4(ai, rows));
            j += 4;
        }
        while j < n {
            row[j] = dot(ai, &b[j * k..(j + 1) * k]);
            j += 1;
        }
    }
    out
}

/// `[m,k]^T x [m,n] -> [k,n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let mut i = 0;
    while i + 4 <= m {
        let rows = [&b[i * n..], &b[(i + 1) * n..], &b[(i + 2) * n..], &b[(i + 3) * n..]];
        for p in 0..k {
            let x = [a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]];
            axpy4(x, rows, &mut out[p * n..(p + 1) * n]);
        }
        i += 4;
    }
    while i < m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], bi, &mut out[p * n..(p + 1) * n]);
        }
        i += 1;
    }
    out
}

/// `x [k] x W [k,n] -> [n]`
pub(crate) fn vecmat(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    vecmat_acc(x, w, n, &mut out);
    out
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_sum = sum.ln();
    for v in row.iter_mut() {
        *v = (*v - max) - log_sum;
    }
}

/// Softmax over the first `active` entries; the rest are set to zero.
pub(crate) fn masked_softmax_in_place(row: &mut [f64], active: usize) {
    let max = row[..active].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row[..active].iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row[..active].iter_mut() {
        *v /= sum;
    }
    for v in row[active..].iter_mut() {
        *v = 0.0;
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Normalizes each row in place; returns (mean, rstd) per row.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    stats: &mut Vec<f64>,
) {
    let d = gamma.len();
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            or[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        stats.push(mean);
        stats.push(rstd);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum_on_odd_lengths() {
        for n in [0usize, 1, 7, 8, 9, 31] {
            let a: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            let b: Vec<f64> = (0..n).map(|i| 2.0 - i as f64 * 0.25).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        // (A^T)^T B through the tn kernel
        let c3 = matmul_tn(&at, &b, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
