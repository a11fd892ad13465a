//! Matrix-multiply kernels shared by the tape ops and the inference path.
//!
//! All kernels *accumulate* (`C += ...`) over row-major slices; callers
//! zero-fill when they want a plain product. Loop orders are chosen so the
//! innermost loop always runs over contiguous memory and autovectorizes.
//!
//! Parallel variants split work by disjoint output rows, so each output
//! element is reduced in a fixed sequential order regardless of thread
//! count — results are bit-identical whether run on one thread or many.

use super::Real;

/// Minimum number of multiply-adds before a kernel bothers with threads.
const PAR_THRESHOLD: usize = 1 << 19;

/// `C[m,n] += A[m,k] * B[k,n]`.
pub fn nn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], a_row: &[T]| {
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, &b[kk * n..kk * n + n], c_row);
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            row(c_row, a_row);
        }
    }
}

/// `C[m,n] += A[m,k] * B[n,k]^T` — i.e. `c[i][j] += dot(a_row_i, b_row_j)`.
pub fn nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [T], a_row: &[T]| {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cv += dot(a_row, b_row);
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(c_row, a_row)| row(c_row, a_row));
    } else {
        for (c_row, a_row) in c.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
            row(c_row, a_row);
        }
    }
}

/// `C[k,n] += A[m,k]^T * B[m,n]` — the weight-gradient shape.
pub fn tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        use rayon::prelude::*;
        // Each task owns a disjoint band of C rows (a contiguous range of k);
        // the reduction over m stays sequential inside the task.
        let band = usize::max(1, k.div_ceil(rayon::current_num_threads() * 2));
        c.par_chunks_mut(band * n).enumerate().for_each(|(chunk, c_band)| {
            let k0 = chunk * band;
            let kw = c_band.len() / n;
            for i in 0..m {
                let b_row = &b[i * n..i * n + n];
                let a_row = &a[i * k + k0..i * k + k0 + kw];
                for (kk, &aik) in a_row.iter().enumerate() {
                    if aik != T::zero() {
                        axpy(aik, b_row, &mut c_band[kk * n..kk * n + n]);
                    }
                }
            }
        });
    } else {
        for i in 0..m {
            let b_row = &b[i * n..i * n + n];
            let a_row = &a[i * k..i * k + k];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik != T::zero() {
                    axpy(aik, b_row, &mut c[kk * n..kk * n + n]);
                }
            }
        }
    }
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = alpha.mul_add(xv, *yv);
    }
}

/// Dot product with four independent accumulators so the reduction pipelines.
#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 4];
    let chunks = x.len() / 4;
    for i in 0..chunks {
        let xi = &x[i * 4..i * 4 + 4];
        let yi = &y[i * 4..i * 4 + 4];
        acc[0] = xi[0].mul_add(yi[0], acc[0]);
        acc[1] = xi[1].mul_add(yi[1], acc[1]);
        acc[2] = xi[2].mul_add(yi[2], acc[2]);
        acc[3] = xi[3].mul_add(yi[3], acc[3]);
    }
    let mut tail = T::zero();
    for i in chunks * 4..x.len() {
        tail = x[i].mul_add(y[i], tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}
