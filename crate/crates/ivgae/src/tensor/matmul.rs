//! Matrix-multiply kernels.
//!
//! Row-partitioned so rayon parallelism cannot change results: each output
//! row is produced by exactly one thread with a fixed accumulation order.

use rayon::prelude::*;

/// Work threshold above which row-parallelism pays for itself.
const PAR_FLOPS: usize = 1 << 22;

/// One output row of C = A·B, k unrolled by 4 so the compiler can keep four
/// row accumulations in flight.
#[inline]
fn nn_row(a_row: &[f64], b: &[f64], c_row: &mut [f64], k: usize, n: usize) {
    let mut kk = 0;
    while kk + 4 <= k {
        let a0 = a_row[kk];
        let a1 = a_row[kk + 1];
        let a2 = a_row[kk + 2];
        let a3 = a_row[kk + 3];
        let b0 = &b[kk * n..][..n];
        let b1 = &b[(kk + 1) * n..][..n];
        let b2 = &b[(kk + 2) * n..][..n];
        let b3 = &b[(kk + 3) * n..][..n];
        for j in 0..n {
            c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        kk += 4;
    }
    while kk < k {
        let aik = a_row[kk];
        let b_row = &b[kk * n..][..n];
        for j in 0..n {
            c_row[j] += aik * b_row[j];
        }
        kk += 1;
    }
}

/// C[m×n] = A[m×k] · B[k×n].
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| nn_row(&a[i * k..][..k], b, row, k, n));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            nn_row(&a[i * k..][..k], b, row, k, n);
        }
    }
    c
}

/// Dot product with 8-way accumulators for instruction-level parallelism.
/// Accumulation order is fixed, independent of call site.
#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let chunks = x.len() / 8;
    let mut acc = [0.0f64; 8];
    for c in 0..chunks {
        let xb = &x[c * 8..c * 8 + 8];
        let yb = &y[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xb[l] * yb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..x.len() {
        tail += x[i] * y[i];
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

#[inline]
fn nt_row(a_row: &[f64], b: &[f64], c_row: &mut [f64], k: usize) {
    for (j, cj) in c_row.iter_mut().enumerate() {
        *cj = dot(a_row, &b[j * k..][..k]);
    }
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ  (row-row dot products).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| nt_row(&a[i * k..][..k], b, row, k));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            nt_row(&a[i * k..][..k], b, row, k);
        }
    }
    c
}

/// One output row i of C = Aᵀ·B: c[i,:] = Σ_kk a[kk,i]·b[kk,:].
#[inline]
fn tn_row(a: &[f64], b: &[f64], c_row: &mut [f64], i: usize, m: usize, k: usize, n: usize) {
    let mut kk = 0;
    while kk + 4 <= k {
        let a0 = a[kk * m + i];
        let a1 = a[(kk + 1) * m + i];
        let a2 = a[(kk + 2) * m + i];
        let a3 = a[(kk + 3) * m + i];
        let b0 = &b[kk * n..][..n];
        let b1 = &b[(kk + 1) * n..][..n];
        let b2 = &b[(kk + 2) * n..][..n];
        let b3 = &b[(kk + 3) * n..][..n];
        for j in 0..n {
            c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        kk += 4;
    }
    while kk < k {
        let aki = a[kk * m + i];
        let b_row = &b[kk * n..][..n];
        for j in 0..n {
            c_row[j] += aki * b_row[j];
        }
        kk += 1;
    }
}

/// C[m×n] = A[k×m]ᵀ · B[k×n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * k * n >= PAR_FLOPS && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| tn_row(a, b, row, i, m, k, n));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            tn_row(a, b, row, i, m, k, n);
        }
    }
    c
}
