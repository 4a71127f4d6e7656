//! Dense kernels. Small row counts take a plain loop; larger products go
//! through `matrixmultiply`, whose packing cost only pays off past a few rows.

const GEMM_MIN_ROWS: usize = 8;

/// `out[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m >= GEMM_MIN_ROWS {
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: slice lengths checked above; strides describe row-major
        // layouts that stay inside each slice.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    if !accumulate {
        out.fill(0.0);
    }
    for r in 0..m {
        let o = &mut out[r * n..(r + 1) * n];
        for (i, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &w) in o.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *o += x * w;
            }
        }
    }
}

/// `out[k×n] += aᵀ · c` with `a` of shape `m×k`, `c` of shape `m×n`.
pub(crate) fn matmul_at_b_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if m >= GEMM_MIN_ROWS {
        // SAFETY: `a` is read transposed through swapped strides.
        unsafe {
            matrixmultiply::dgemm(
                k,
                m,
                n,
                1.0,
                a.as_ptr(),
                1,
                k as isize,
                c.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        return;
    }
    for r in 0..m {
        let cr = &c[r * n..(r + 1) * n];
        for (i, &x) in a[r * k..(r + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &g) in out[i * n..(i + 1) * n].iter_mut().zip(cr) {
                *o += x * g;
            }
        }
    }
}

/// `out[m×k] (+)= c[m×n] · bᵀ` with `b` of shape `k×n`.
pub(crate) fn matmul_a_bt(c: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize, accumulate: bool) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    if m >= GEMM_MIN_ROWS {
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: `b` is read transposed through swapped strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                n,
                k,
                1.0,
                c.as_ptr(),
                n as isize,
                1,
                b.as_ptr(),
                1,
                n as isize,
                beta,
                out.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        return;
    }
    for r in 0..m {
        let cr = &c[r * n..(r + 1) * n];
        for i in 0..k {
            let dot: f64 = cr.iter().zip(&b[i * n..(i + 1) * n]).map(|(x, y)| x * y).sum();
            if accumulate {
                out[r * k + i] += dot;
            } else {
                out[r * k + i] = dot;
            }
        }
    }
}

pub(crate) fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn column_sums_acc(grad: &[f64], out: &mut [f64]) {
    for row in grad.chunks_exact(out.len()) {
        for (o, g) in out.iter_mut().zip(row) {
            *o += g;
        }
    }
}
