//! Row-major f64 matrix kernels. Accumulation order is fixed (sequential in
//! the contraction index) so results are bitwise reproducible regardless of
//! thread count; rayon only splits work across independent output rows.

use rayon::prelude::*;

/// Work below this many multiply-adds stays single threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// Writes rows `i0..i0+rows` of C = A * B; four-row blocks amortize the
/// streaming loads of B.
fn nn_block(a: &[f64], b: &[f64], k: usize, n: usize, i0: usize, rows: usize, c: &mut [f64]) {
    c.fill(0.0);
    let mut i = 0;
    while i + 4 <= rows {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        let base = (i0 + i) * k;
        for p in 0..k {
            let x0 = a[base + p];
            let x1 = a[base + k + p];
            let x2 = a[base + 2 * k + p];
            let x3 = a[base + 3 * k + p];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bj = br[j];
                c0[j] += x0 * bj;
                c1[j] += x1 * bj;
                c2[j] += x2 * bj;
                c3[j] += x3 * bj;
            }
        }
        i += 4;
    }
    while i < rows {
        let cr = &mut c[i * n..(i + 1) * n];
        let ar = &a[(i0 + i) * k..(i0 + i + 1) * k];
        for (p, &aip) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (cj, bj) in cr.iter_mut().zip(br) {
                *cj += aip * bj;
            }
        }
        i += 1;
    }
}

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m >= 8 {
        let chunk_rows = (m / (2 * rayon::current_num_threads()).max(1)).max(4) & !3;
        out.par_chunks_mut(chunk_rows * n).enumerate().for_each(|(ci, c)| {
            let i0 = ci * chunk_rows;
            nn_block(a, b, k, n, i0, c.len() / n, c);
        });
    } else {
        nn_block(a, b, k, n, 0, m, out);
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T  (row-by-row dot products)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, c: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cj) in c.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in ar.iter().zip(br) {
                s += x * y;
            }
            *cj = s;
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, c)| row(i, c));
    } else {
        for (i, c) in out.chunks_mut(n).enumerate() {
            row(i, c);
        }
    }
}

fn tn_block(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, i0: usize, rows: usize, c: &mut [f64]) {
    c.fill(0.0);
    let mut i = 0;
    while i + 4 <= rows {
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let ap = &a[p * m + i0 + i..p * m + i0 + i + 4];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bj = br[j];
                c0[j] += ap[0] * bj;
                c1[j] += ap[1] * bj;
                c2[j] += ap[2] * bj;
                c3[j] += ap[3] * bj;
            }
        }
        i += 4;
    }
    while i < rows {
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let api = a[p * m + i0 + i];
            let br = &b[p * n..(p + 1) * n];
            for (cj, bj) in cr.iter_mut().zip(br) {
                *cj += api * bj;
            }
        }
        i += 1;
    }
}

/// C[m,n] = A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m >= 8 {
        let chunk_rows = (m / (2 * rayon::current_num_threads()).max(1)).max(4) & !3;
        out.par_chunks_mut(chunk_rows * n).enumerate().for_each(|(ci, c)| {
            let i0 = ci * chunk_rows;
            tn_block(a, b, m, k, n, i0, c.len() / n, c);
        });
    } else {
        tn_block(a, b, m, k, n, 0, m, out);
    }
}

/// Batched C[b] = A[b] * B[b], all row-major, optionally with B transposed.
pub fn bmm(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_transposed: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(out.len(), batch * m * n);
    let one = |bi: usize, o: &mut [f64]| {
        let av = &a[bi * m * k..(bi + 1) * m * k];
        let bv = &b[bi * k * n..(bi + 1) * k * n];
        // Serial inner kernels: parallelism lives at the batch level here.
        if b_transposed {
            for i in 0..m {
                let ar = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let br = &bv[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (x, y) in ar.iter().zip(br) {
                        s += x * y;
                    }
                    o[i * n + j] = s;
                }
            }
        } else {
            for i in 0..m {
                let c = &mut o[i * n..(i + 1) * n];
                c.fill(0.0);
                let ar = &av[i * k..(i + 1) * k];
                for (p, &aip) in ar.iter().enumerate() {
                    let br = &bv[p * n..(p + 1) * n];
                    for (cj, bj) in c.iter_mut().zip(br) {
                        *cj += aip * bj;
                    }
                }
            }
        }
    };
    if batch * m * k * n >= PAR_THRESHOLD && batch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(|(bi, o)| one(bi, o));
    } else {
        for (bi, o) in out.chunks_mut(m * n).enumerate() {
            one(bi, o);
        }
    }
}
