//! Raw row-major kernels shared by forward ops and their backward rules.
//!
//! Matrix products parallelize over output rows; each row's arithmetic is a
//! fixed sequential reduction, so results are bit-identical for any thread
//! count.

use rayon::prelude::*;

use crate::dtype::Scalar;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

/// c[m,n] = a[m,k] @ b[k,n]
pub fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    let row = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
    c
}

/// c[m,n] = a[m,k] @ b[n,k]^T
pub fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); m * n];
    let row = |i: usize, crow: &mut [E]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv = s;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
    c
}

/// c[k,n] = a[m,k]^T @ b[m,n]
pub fn matmul_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); k * n];
    let row = |i: usize, crow: &mut [E]| {
        // c[i, :] = sum_p a[p, i] * b[p, :]
        for p in 0..m {
            let av = a[p * k + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(i, crow)| row(i, crow));
    } else {
        for (i, crow) in c.chunks_mut(n).enumerate() {
            row(i, crow);
        }
    }
    c
}

/// Batched variants: `batch` independent products laid out contiguously.
pub fn bmm_nn<E: Scalar>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); batch * m * n];
    let work = batch * m * k * n;
    let row = |r: usize, crow: &mut [E]| {
        let (q, i) = (r / m, r % m);
        let ab = &a[q * m * k..(q + 1) * m * k];
        let bb = &b[q * k * n..(q + 1) * k * n];
        let arow = &ab[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bb[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(r, crow)| row(r, crow));
    } else {
        for (r, crow) in c.chunks_mut(n).enumerate() {
            row(r, crow);
        }
    }
    c
}

pub fn bmm_nt<E: Scalar>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); batch * m * n];
    let work = batch * m * k * n;
    let row = |r: usize, crow: &mut [E]| {
        let (q, i) = (r / m, r % m);
        let ab = &a[q * m * k..(q + 1) * m * k];
        let bb = &b[q * n * k..(q + 1) * n * k];
        let arow = &ab[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &bb[j * k..(j + 1) * k];
            let mut s = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv = s;
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(r, crow)| row(r, crow));
    } else {
        for (r, crow) in c.chunks_mut(n).enumerate() {
            row(r, crow);
        }
    }
    c
}

pub fn bmm_tn<E: Scalar>(a: &[E], b: &[E], batch: usize, m: usize, k: usize, n: usize) -> Vec<E> {
    let mut c = vec![E::zero(); batch * k * n];
    let work = batch * m * k * n;
    let row = |r: usize, crow: &mut [E]| {
        let (q, i) = (r / k, r % k);
        let ab = &a[q * m * k..(q + 1) * m * k];
        let bb = &b[q * m * n..(q + 1) * m * n];
        for p in 0..m {
            let av = ab[p * k + i];
            let brow = &bb[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if work >= PAR_FLOP_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(|(r, crow)| row(r, crow));
    } else {
        for (r, crow) in c.chunks_mut(n).enumerate() {
            row(r, crow);
        }
    }
    c
}
