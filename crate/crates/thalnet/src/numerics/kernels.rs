//! Dense f64 kernels with an optional rayon path.
//!
//! Every parallel kernel splits work across *output* rows and keeps the
//! arithmetic inside each row identical to the sequential loop, so enabling
//! parallelism never changes a single bit of the result. Reductions that walk
//! the batch axis always iterate it in ascending index order.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable the rayon path at runtime. A no-op when the crate is
/// built without the `parallel` feature.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

/// True when parallel kernels are compiled in and currently enabled.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_FLOP_THRESHOLD: usize = 16_384;

fn use_par(rows: usize, work_per_row: usize) -> bool {
    parallel_enabled() && rows > 1 && rows * work_per_row >= PAR_FLOP_THRESHOLD
}

/// Index of the first NaN or infinity, if any.
pub fn first_nonfinite(data: &[f64]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

// ── Matrix products ──────────────────────────────────────────────────────

fn matmul_row(arow: &[f64], b: &[f64], n: usize, crow: &mut [f64]) {
    for (kk, &aik) in arow.iter().enumerate() {
        let brow = &b[kk * n..kk * n + n];
        for j in 0..n {
            crow[j] += aik * brow[j];
        }
    }
}

/// C[m×n] = A[m×k] · B[k×n], all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if use_par(m, k * n) {
        #[cfg(feature = "parallel")]
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| matmul_row(arow, b, n, crow));
    } else {
        for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k)) {
            matmul_row(arow, b, n, crow);
        }
    }
    c
}

fn matmul_nt_row(arow: &[f64], b: &[f64], k: usize, crow: &mut [f64]) {
    for (j, cij) in crow.iter_mut().enumerate() {
        let brow = &b[j * k..j * k + k];
        let mut s = 0.0;
        for q in 0..k {
            s += arow[q] * brow[q];
        }
        *cij = s;
    }
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ (B stored row-major, used untransposed in memory).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    if use_par(m, k * n) {
        #[cfg(feature = "parallel")]
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(crow, arow)| matmul_nt_row(arow, b, k, crow));
    } else {
        for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k)) {
            matmul_nt_row(arow, b, k, crow);
        }
    }
    c
}

fn matmul_tn_row(p: usize, a: &[f64], b: &[f64], r: usize, m: usize, n: usize, crow: &mut [f64]) {
    // Row p of C = Σ_i A[i][p] · B[i][·], with i (the batch axis) ascending.
    for i in 0..r {
        let aip = a[i * m + p];
        let brow = &b[i * n..i * n + n];
        for j in 0..n {
            crow[j] += aip * brow[j];
        }
    }
}

/// C[m×n] = A[r×m]ᵀ · B[r×n]. The reduction over `r` (typically the batch
/// axis) runs in ascending index order on both execution paths.
pub fn matmul_tn(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    let mut c = vec![0.0; m * n];
    if use_par(m, r * n) {
        #[cfg(feature = "parallel")]
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, crow)| matmul_tn_row(p, a, b, r, m, n, crow));
    } else {
        for (p, crow) in c.chunks_mut(n).enumerate() {
            matmul_tn_row(p, a, b, r, m, n, crow);
        }
    }
    c
}

// ── Elementwise maps ─────────────────────────────────────────────────────

/// Chunk length for parallel elementwise maps; results are chunk-invariant
/// because each output element depends only on the matching input element.
const MAP_CHUNK: usize = 4096;

pub fn unary_map<F: Fn(f64) -> f64 + Sync>(x: &[f64], f: F) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if parallel_enabled() && x.len() >= 2 * MAP_CHUNK {
        #[cfg(feature = "parallel")]
        out.par_chunks_mut(MAP_CHUNK)
            .zip(x.par_chunks(MAP_CHUNK))
            .for_each(|(o, i)| {
                for (ov, iv) in o.iter_mut().zip(i) {
                    *ov = f(*iv);
                }
            });
    } else {
        for (ov, iv) in out.iter_mut().zip(x) {
            *ov = f(*iv);
        }
    }
    out
}

pub fn binary_map<F: Fn(f64, f64) -> f64 + Sync>(a: &[f64], b: &[f64], f: F) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    let mut out = vec![0.0; a.len()];
    if parallel_enabled() && a.len() >= 2 * MAP_CHUNK {
        #[cfg(feature = "parallel")]
        out.par_chunks_mut(MAP_CHUNK)
            .zip(a.par_chunks(MAP_CHUNK).zip(b.par_chunks(MAP_CHUNK)))
            .for_each(|(o, (x, y))| {
                for ((ov, xv), yv) in o.iter_mut().zip(x).zip(y) {
                    *ov = f(*xv, *yv);
                }
            });
    } else {
        for ((ov, xv), yv) in out.iter_mut().zip(a).zip(b) {
            *ov = f(*xv, *yv);
        }
    }
    out
}
