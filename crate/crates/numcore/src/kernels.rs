//! Dense kernels. Every loop nest is written in "axpy" form (the inner loop
//! updates a contiguous output row) so the compiler can vectorize without
//! reassociating floating point reductions; summation order is fixed and
//! independent of thread count.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn matmul_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let zero = T::zero();
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for p in 0..k {
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            if a0 == zero && a1 == zero && a2 == zero && a3 == zero {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] = c0[j] + a0 * bv;
                c1[j] = c1[j] + a1 * bv;
                c2[j] = c2[j] + a2 * bv;
                c3[j] = c3[j] + a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == zero {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
        i += 1;
    }
}

/// `db[k×n] += aᵀ · dc` with `a[m×k]`, `dc[m×n]`.
pub(crate) fn matmul_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], dc: &[T], db: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(dc.len(), m * n);
    debug_assert_eq!(db.len(), k * n);
    let zero = T::zero();
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == zero {
                continue;
            }
            let out = &mut db[p * n..(p + 1) * n];
            for (o, &d) in out.iter_mut().zip(drow) {
                *o = *o + av * d;
            }
        }
    }
}

/// `da[m×k] += dc[m×n] · bᵀ` with `b[k×n]`.
pub(crate) fn matmul_nt_acc<T: Scalar>(m: usize, k: usize, n: usize, dc: &[T], b: &[T], da: &mut [T]) {
    let bt = transpose(k, n, b);
    matmul_acc(m, n, k, dc, &bt, da);
}

pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_matmul_matches_naive() {
        let mut rng = crate::SplitMix64::new(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 7), (9, 16, 4), (4, 4, 4)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut c = vec![0.0; m * n];
            matmul_acc(m, k, n, &a, &b, &mut c);
            let r = naive(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&r) {
                assert!((x - y).abs() < 1e-12);
            }
            let mut db = vec![0.0; k * n];
            matmul_tn_acc(m, k, n, &a, &c, &mut db);
            let at = transpose(m, k, &a);
            let r2 = naive(k, m, n, &at, &c);
            for (x, y) in db.iter().zip(&r2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
