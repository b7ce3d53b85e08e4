//! Raw slice kernels shared by the tape ops. All loops run in a fixed order so
//! results are bit-reproducible.

/// Strided `c += alpha · a · b` where `a` is `m×k` and `b` is `k×n`, each
/// addressed by (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too short"
    );
    // SAFETY: the strides address exactly the m×k, k×n and m×n prefixes
    // checked above, and `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] += alpha · a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, alpha: f64) {
    dgemm(m, k, n, alpha, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c[m×n] += alpha · a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, alpha: f64) {
    dgemm(m, k, n, alpha, a, (k as isize, 1), b, (1, k as isize), c);
}

/// `c[m×n] += alpha · a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, alpha: f64) {
    dgemm(m, k, n, alpha, a, (1, m as isize), b, (n as isize, 1), c);
}

pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Softmax over the entries of `row` where `valid` is true; invalid entries
/// are written as exactly 0. Returns false if no entry is valid (the row is
/// then all zeros).
pub fn masked_softmax_row(row: &[f64], valid: &[bool], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (&x, &ok) in row.iter().zip(valid) {
        if ok && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for ((o, &x), &ok) in out.iter_mut().zip(row).zip(valid) {
        if ok {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for (o, &ok) in out.iter_mut().zip(valid) {
        if ok {
            *o *= inv;
        }
    }
    true
}
