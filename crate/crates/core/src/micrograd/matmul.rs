//! Dense f64 matrix kernels shared by conv and the head projections.
//!
//! Row-parallel loops only: every output row is produced by exactly one task,
//! so results are bitwise identical whatever the thread count.

use rayon::prelude::*;

/// Work threshold below which threading overhead outweighs the win.
const PAR_FLOPS: usize = 1 << 21;

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (dot products of contiguous rows)
pub fn matmul_abt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            *o += dot(arow, brow);
        }
    };
    if m * k * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

/// out[m,n] += a[p,m]^T * b[p,n]
pub fn matmul_atb_acc(a: &[f64], b: &[f64], out: &mut [f64], p: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [f64]| {
        for pp in 0..p {
            let api = a[pp * m + i];
            if api == 0.0 {
                continue;
            }
            let brow = &b[pp * n..(pp + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    };
    if p * m * n >= PAR_FLOPS && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
    } else {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row(i, orow);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut acc0 = 0.0;
    let mut acc1 = 0.0;
    let mut acc2 = 0.0;
    let mut acc3 = 0.0;
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc0 += a[i] * b[i];
        acc1 += a[i + 1] * b[i + 1];
        acc2 += a[i + 2] * b[i + 2];
        acc3 += a[i + 3] * b[i + 3];
    }
    let mut rest = 0.0;
    for i in chunks * 4..n {
        rest += a[i] * b[i];
    }
    (acc0 + acc1) + (acc2 + acc3) + rest
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn kernels_match_naive_reference() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "matmul-test", 0);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (7, 2, 9), (16, 16, 16), (5, 31, 2)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let want = naive(&a, &b, m, k, n);

            let mut got = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut got, m, k, n);
            assert_eq!(got, want, "matmul_acc {m}x{k}x{n}");

            // a * b^T with b stored transposed must agree.
            let mut bt = vec![0.0; k * n];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b[kk * n + j];
                }
            }
            let mut got2 = vec![0.0; m * n];
            matmul_abt_acc(&a, &bt, &mut got2, m, k, n);
            for (g, w) in got2.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "matmul_abt_acc {m}x{k}x{n}");
            }

            // a^T * b with a stored transposed must agree.
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a[i * k + kk];
                }
            }
            let mut got3 = vec![0.0; m * n];
            matmul_atb_acc(&at, &b, &mut got3, k, m, n);
            for (g, w) in got3.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "matmul_atb_acc {m}x{k}x{n}");
            }
        }
    }
}
