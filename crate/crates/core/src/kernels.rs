//! Dense f64 compute kernels with sequential and rayon backends.
//!
//! Both backends accumulate every output element in the same order, so they
//! are bit-identical; the parallel one only splits independent output rows
//! across threads.

use crate::parallel::parallelism_enabled;

/// Below this many multiply-adds the rayon spawn overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 64 * 64 * 64;

/// C[m×n] = A[m×k] · B[k×n], row-major. Dispatches on feature + size.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    #[cfg(feature = "parallel")]
    if parallelism_enabled() && m > 1 && m * k * n >= PAR_FLOP_THRESHOLD {
        return matmul_par(a, b, m, k, n);
    }
    let _ = parallelism_enabled;
    matmul_seq(a, b, m, k, n)
}

/// Sequential reference kernel (ikj loop order, axpy inner loop).
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    }
    out
}

/// Parallel kernel: one task per output row, same per-row arithmetic as
/// [`matmul_seq`].
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    use rayon::prelude::*;
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| matmul_row(&a[i * k..(i + 1) * k], b, n, out_row));
    out
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// B[n×m] = Aᵀ for row-major A[m×n].
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
