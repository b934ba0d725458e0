//! Deterministic matrix-multiply kernels.
//!
//! Every output element accumulates its reduction in a fixed order that does
//! not depend on blocking or worker count, so parallel and serial runs are
//! bit-identical. The `nn` kernel streams rows of B (ikj order, vectorizes
//! over columns); `nt` uses eight fixed partial sums per dot product; `tn`
//! accumulates with the reduction index outermost.

use crate::par;

const PAR_THRESHOLD: usize = 1 << 15;

/// C[m,n] = A[m,k] · B[k,n]
pub fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, c_row: &mut [f32]| {
        c_row.fill(0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        par::for_each_chunk(c, n, |i, c_row| row(i, c_row));
    } else {
        for i in 0..m {
            row(i, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Fixed-structure dot product: eight partial lanes summed pairwise.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ac[l] * bc[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ
pub fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, c_row: &mut [f32]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cj) in c_row.iter_mut().enumerate() {
            *cj = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        par::for_each_chunk(c, n, |i, c_row| row(i, c_row));
    } else {
        for i in 0..m {
            row(i, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// C[m,n] = A[k,m]ᵀ · B[k,n]. Reduction index outermost; the whole of C is
/// touched per step, which is fine for the small outputs this is used for
/// (weight gradients).
pub fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += av * bj;
            }
        }
    }
}
