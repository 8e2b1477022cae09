//! Scalar trait and the hand-rolled dense kernels everything else sits on.
//!
//! All heavy math funnels through three GEMM shapes plus dot/axpy/exp; each
//! has an AVX2+FMA path picked at runtime and a portable scalar fallback with
//! a fixed summation order, so results are reproducible for a given build on
//! a given machine.

use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Send
    + Sync
    + 'static
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;
    fn maxv(self, other: Self) -> Self;
    fn minv(self, other: Self) -> Self;
    fn neg_infinity() -> Self;

    /// Dot product of two equal-length slices.
    fn dot(a: &[Self], b: &[Self]) -> Self;

    /// y += alpha * x, elementwise over equal-length slices.
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]);

    /// C[m,n] (+)= A[m,k] @ B[k,n]. With `acc` false, C is overwritten.
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], acc: bool);

    /// C[m,n] (+)= A[m,k] @ Bt[n,k]^T (B supplied already transposed).
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], bt: &[Self], c: &mut [Self], acc: bool);

    /// C[k,n] (+)= A[m,k]^T @ B[m,n].
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], acc: bool);

    /// Exponential over a slice, tuned for softmax rows: inputs at or below
    /// the underflow cutoff map to exactly 0, overflow maps to +inf (callers
    /// that cannot tolerate infinities check afterwards).
    fn exp_slice(xs: &mut [Self]);
}

pub fn gelu_phi<T: Real>(x: T) -> T {
    // standard normal CDF
    let half = T::from_f64(0.5);
    half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_pdf<T: Real>(x: T) -> T {
    // standard normal density
    let c = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    c * (-(x * x) * T::from_f64(0.5)).exp()
}

pub fn gelu<T: Real>(x: T) -> T {
    x * gelu_phi(x)
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    gelu_phi(x) + x * gelu_pdf(x)
}

/// out[r][c] = a[c][r] for a row-major `a` with `rows` x `cols`.
pub fn transpose<T: Copy>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

// ---------------------------------------------------------------------------
// scalar fallbacks (fixed summation order, shared by both float widths)
// ---------------------------------------------------------------------------

const LANES: usize = 8;

fn dot_scalar<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let off = i * LANES;
        for j in 0..LANES {
            lanes[j] += a[off + j] * b[off + j];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut acc = T::ZERO;
    for l in lanes {
        acc += l;
    }
    acc + tail
}

fn axpy_scalar<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

fn gemm_nn_scalar<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    if !acc {
        c.fill(T::ZERO);
    }
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            axpy_scalar(a[i * k + l], &b[l * n..(l + 1) * n], crow);
        }
    }
}

fn gemm_nt_scalar<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    bt: &[T],
    c: &mut [T],
    acc: bool,
) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let d = dot_scalar(arow, &bt[j * k..(j + 1) * k]);
            let cij = &mut c[i * n + j];
            *cij = if acc { *cij + d } else { d };
        }
    }
}

fn gemm_tn_scalar<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    if !acc {
        c.fill(T::ZERO);
    }
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy_scalar(a[i * k + kk], brow, &mut c[kk * n..(kk + 1) * n]);
        }
    }
}

// ---------------------------------------------------------------------------
// AVX2 + FMA paths
// ---------------------------------------------------------------------------

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub fn available() -> bool {
        static FLAG: OnceLock<bool> = OnceLock::new();
        *FLAG.get_or_init(|| {
            std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        })
    }

    #[inline(always)]
    unsafe fn hsum256(v: __m256) -> f32 {
        let hi = _mm256_extractf128_ps(v, 1);
        let lo = _mm256_castps256_ps128(v);
        let s = _mm_add_ps(lo, hi);
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    #[inline(always)]
    unsafe fn hsum256d(v: __m256d) -> f64 {
        let hi = _mm256_extractf128_pd(v, 1);
        let lo = _mm256_castpd256_pd128(v);
        let s = _mm_add_pd(lo, hi);
        let s = _mm_add_pd(s, _mm_unpackhi_pd(s, s));
        _mm_cvtsd_f64(s)
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len();
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let mut acc0 = _mm256_setzero_ps();
        let mut acc1 = _mm256_setzero_ps();
        let mut acc2 = _mm256_setzero_ps();
        let mut acc3 = _mm256_setzero_ps();
        let mut i = 0;
        while i + 32 <= n {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(ap.add(i)), _mm256_loadu_ps(bp.add(i)), acc0);
            acc1 = _mm256_fmadd_ps(
                _mm256_loadu_ps(ap.add(i + 8)),
                _mm256_loadu_ps(bp.add(i + 8)),
                acc1,
            );
            acc2 = _mm256_fmadd_ps(
                _mm256_loadu_ps(ap.add(i + 16)),
                _mm256_loadu_ps(bp.add(i + 16)),
                acc2,
            );
            acc3 = _mm256_fmadd_ps(
                _mm256_loadu_ps(ap.add(i + 24)),
                _mm256_loadu_ps(bp.add(i + 24)),
                acc3,
            );
            i += 32;
        }
        while i + 8 <= n {
            acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(ap.add(i)), _mm256_loadu_ps(bp.add(i)), acc0);
            i += 8;
        }
        let mut total = hsum256(_mm256_add_ps(_mm256_add_ps(acc0, acc1), _mm256_add_ps(acc2, acc3)));
        while i < n {
            total = (*ap.add(i)).mul_add(*bp.add(i), total);
            i += 1;
        }
        total
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn axpy_f32(alpha: f32, x: &[f32], y: &mut [f32]) {
        let n = x.len();
        let xp = x.as_ptr();
        let yp = y.as_mut_ptr();
        let va = _mm256_set1_ps(alpha);
        let mut i = 0;
        while i + 32 <= n {
            let y0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(xp.add(i)), _mm256_loadu_ps(yp.add(i)));
            let y1 = _mm256_fmadd_ps(
                va,
                _mm256_loadu_ps(xp.add(i + 8)),
                _mm256_loadu_ps(yp.add(i + 8)),
            );
            let y2 = _mm256_fmadd_ps(
                va,
                _mm256_loadu_ps(xp.add(i + 16)),
                _mm256_loadu_ps(yp.add(i + 16)),
            );
            let y3 = _mm256_fmadd_ps(
                va,
                _mm256_loadu_ps(xp.add(i + 24)),
                _mm256_loadu_ps(yp.add(i + 24)),
            );
            _mm256_storeu_ps(yp.add(i), y0);
            _mm256_storeu_ps(yp.add(i + 8), y1);
            _mm256_storeu_ps(yp.add(i + 16), y2);
            _mm256_storeu_ps(yp.add(i + 24), y3);
            i += 32;
        }
        while i + 8 <= n {
            let y0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(xp.add(i)), _mm256_loadu_ps(yp.add(i)));
            _mm256_storeu_ps(yp.add(i), y0);
            i += 8;
        }
        while i < n {
            *yp.add(i) = alpha.mul_add(*xp.add(i), *yp.add(i));
            i += 1;
        }
    }

    /// Store an 8-lane accumulator tile element, honoring the acc flag.
    #[inline(always)]
    unsafe fn store_acc(cptr: *mut f32, v: __m256, acc: bool) {
        if acc {
            _mm256_storeu_ps(cptr, _mm256_add_ps(_mm256_loadu_ps(cptr), v));
        } else {
            _mm256_storeu_ps(cptr, v);
        }
    }

    /// One row strip of C via broadcast-A FMAs: 16-wide, then 8-wide, then
    /// scalar columns. Covers every C element of the strip exactly once.
    #[inline(always)]
    unsafe fn nn_row_f32(k: usize, n: usize, arow: *const f32, bp: *const f32, crow: *mut f32, acc: bool) {
        let mut j = 0;
        while j + 16 <= n {
            let mut c0 = _mm256_setzero_ps();
            let mut c1 = _mm256_setzero_ps();
            for l in 0..k {
                let va = _mm256_broadcast_ss(&*arow.add(l));
                let brow = bp.add(l * n + j);
                c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow), c0);
                c1 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow.add(8)), c1);
            }
            store_acc(crow.add(j), c0, acc);
            store_acc(crow.add(j + 8), c1, acc);
            j += 16;
        }
        if j + 8 <= n {
            let mut c0 = _mm256_setzero_ps();
            for l in 0..k {
                let va = _mm256_broadcast_ss(&*arow.add(l));
                c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(bp.add(l * n + j)), c0);
            }
            store_acc(crow.add(j), c0, acc);
            j += 8;
        }
        while j < n {
            let mut s = 0.0f32;
            for l in 0..k {
                s = (*arow.add(l)).mul_add(*bp.add(l * n + j), s);
            }
            *crow.add(j) = if acc { *crow.add(j) + s } else { s };
            j += 1;
        }
    }

    /// C[m,n] (+)= A[m,k] @ B[k,n]; 4x16 register-tiled microkernel, C held
    /// in accumulators across the whole k loop.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_nn_f32(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        acc: bool,
    ) {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        let mut i = 0;
        while i + 4 <= m {
            let a0 = ap.add(i * k);
            let a1 = ap.add((i + 1) * k);
            let a2 = ap.add((i + 2) * k);
            let a3 = ap.add((i + 3) * k);
            let c0 = cp.add(i * n);
            let c1 = cp.add((i + 1) * n);
            let c2 = cp.add((i + 2) * n);
            let c3 = cp.add((i + 3) * n);
            let mut j = 0;
            while j + 16 <= n {
                let mut acc00 = _mm256_setzero_ps();
                let mut acc01 = _mm256_setzero_ps();
                let mut acc10 = _mm256_setzero_ps();
                let mut acc11 = _mm256_setzero_ps();
                let mut acc20 = _mm256_setzero_ps();
                let mut acc21 = _mm256_setzero_ps();
                let mut acc30 = _mm256_setzero_ps();
                let mut acc31 = _mm256_setzero_ps();
                for l in 0..k {
                    let brow = bp.add(l * n + j);
                    let b0 = _mm256_loadu_ps(brow);
                    let b1 = _mm256_loadu_ps(brow.add(8));
                    let va0 = _mm256_broadcast_ss(&*a0.add(l));
                    acc00 = _mm256_fmadd_ps(va0, b0, acc00);
                    acc01 = _mm256_fmadd_ps(va0, b1, acc01);
                    let va1 = _mm256_broadcast_ss(&*a1.add(l));
                    acc10 = _mm256_fmadd_ps(va1, b0, acc10);
                    acc11 = _mm256_fmadd_ps(va1, b1, acc11);
                    let va2 = _mm256_broadcast_ss(&*a2.add(l));
                    acc20 = _mm256_fmadd_ps(va2, b0, acc20);
                    acc21 = _mm256_fmadd_ps(va2, b1, acc21);
                    let va3 = _mm256_broadcast_ss(&*a3.add(l));
                    acc30 = _mm256_fmadd_ps(va3, b0, acc30);
                    acc31 = _mm256_fmadd_ps(va3, b1, acc31);
                }
                store_acc(c0.add(j), acc00, acc);
                store_acc(c0.add(j + 8), acc01, acc);
                store_acc(c1.add(j), acc10, acc);
                store_acc(c1.add(j + 8), acc11, acc);
                store_acc(c2.add(j), acc20, acc);
                store_acc(c2.add(j + 8), acc21, acc);
                store_acc(c3.add(j), acc30, acc);
                store_acc(c3.add(j + 8), acc31, acc);
                j += 16;
            }
            if j + 8 <= n {
                let mut acc0 = _mm256_setzero_ps();
                let mut acc1 = _mm256_setzero_ps();
                let mut acc2 = _mm256_setzero_ps();
                let mut acc3 = _mm256_setzero_ps();
                for l in 0..k {
                    let b0 = _mm256_loadu_ps(bp.add(l * n + j));
                    acc0 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a0.add(l)), b0, acc0);
                    acc1 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a1.add(l)), b0, acc1);
                    acc2 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a2.add(l)), b0, acc2);
                    acc3 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a3.add(l)), b0, acc3);
                }
                store_acc(c0.add(j), acc0, acc);
                store_acc(c1.add(j), acc1, acc);
                store_acc(c2.add(j), acc2, acc);
                store_acc(c3.add(j), acc3, acc);
                j += 8;
            }
            while j < n {
                let mut s0 = 0.0f32;
                let mut s1 = 0.0f32;
                let mut s2 = 0.0f32;
                let mut s3 = 0.0f32;
                for l in 0..k {
                    let bv = *bp.add(l * n + j);
                    s0 = (*a0.add(l)).mul_add(bv, s0);
                    s1 = (*a1.add(l)).mul_add(bv, s1);
                    s2 = (*a2.add(l)).mul_add(bv, s2);
                    s3 = (*a3.add(l)).mul_add(bv, s3);
                }
                for (cr, s) in [(c0, s0), (c1, s1), (c2, s2), (c3, s3)] {
                    *cr.add(j) = if acc { *cr.add(j) + s } else { s };
                }
                j += 1;
            }
            i += 4;
        }
        while i < m {
            nn_row_f32(k, n, ap.add(i * k), bp, cp.add(i * n), acc);
            i += 1;
        }
    }

    /// C[m,n] (+)= A[m,k] @ Bt[n,k]^T; dot-product formulation tiled 2 rows
    /// by 4 columns so each A/B load feeds several FMAs.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_nt_f32(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        bt: &[f32],
        c: &mut [f32],
        acc: bool,
    ) {
        let ap = a.as_ptr();
        let btp = bt.as_ptr();
        let cp = c.as_mut_ptr();
        let mut i = 0;
        while i + 2 <= m {
            let ar0 = ap.add(i * k);
            let ar1 = ap.add((i + 1) * k);
            let cr0 = cp.add(i * n);
            let cr1 = cp.add((i + 1) * n);
            let mut j = 0;
            while j + 4 <= n {
                let b0 = btp.add(j * k);
                let b1 = btp.add((j + 1) * k);
                let b2 = btp.add((j + 2) * k);
                let b3 = btp.add((j + 3) * k);
                let mut q00 = _mm256_setzero_ps();
                let mut q01 = _mm256_setzero_ps();
                let mut q02 = _mm256_setzero_ps();
                let mut q03 = _mm256_setzero_ps();
                let mut q10 = _mm256_setzero_ps();
                let mut q11 = _mm256_setzero_ps();
                let mut q12 = _mm256_setzero_ps();
                let mut q13 = _mm256_setzero_ps();
                let mut kk = 0;
                while kk + 8 <= k {
                    let av0 = _mm256_loadu_ps(ar0.add(kk));
                    let av1 = _mm256_loadu_ps(ar1.add(kk));
                    let bv0 = _mm256_loadu_ps(b0.add(kk));
                    let bv1 = _mm256_loadu_ps(b1.add(kk));
                    let bv2 = _mm256_loadu_ps(b2.add(kk));
                    let bv3 = _mm256_loadu_ps(b3.add(kk));
                    q00 = _mm256_fmadd_ps(av0, bv0, q00);
                    q01 = _mm256_fmadd_ps(av0, bv1, q01);
                    q02 = _mm256_fmadd_ps(av0, bv2, q02);
                    q03 = _mm256_fmadd_ps(av0, bv3, q03);
                    q10 = _mm256_fmadd_ps(av1, bv0, q10);
                    q11 = _mm256_fmadd_ps(av1, bv1, q11);
                    q12 = _mm256_fmadd_ps(av1, bv2, q12);
                    q13 = _mm256_fmadd_ps(av1, bv3, q13);
                    kk += 8;
                }
                let mut s = [
                    [hsum256(q00), hsum256(q01), hsum256(q02), hsum256(q03)],
                    [hsum256(q10), hsum256(q11), hsum256(q12), hsum256(q13)],
                ];
                while kk < k {
                    let av0 = *ar0.add(kk);
                    let av1 = *ar1.add(kk);
                    let bs = [*b0.add(kk), *b1.add(kk), *b2.add(kk), *b3.add(kk)];
                    for (col, &bv) in bs.iter().enumerate() {
                        s[0][col] = av0.mul_add(bv, s[0][col]);
                        s[1][col] = av1.mul_add(bv, s[1][col]);
                    }
                    kk += 1;
                }
                for (row, cr) in [(0usize, cr0), (1usize, cr1)] {
                    for col in 0..4 {
                        let cij = cr.add(j + col);
                        *cij = if acc { *cij + s[row][col] } else { s[row][col] };
                    }
                }
                j += 4;
            }
            while j < n {
                let brow = std::slice::from_raw_parts(btp.add(j * k), k);
                let s0 = dot_f32(std::slice::from_raw_parts(ar0, k), brow);
                let s1 = dot_f32(std::slice::from_raw_parts(ar1, k), brow);
                let c0 = cr0.add(j);
                let c1 = cr1.add(j);
                *c0 = if acc { *c0 + s0 } else { s0 };
                *c1 = if acc { *c1 + s1 } else { s1 };
                j += 1;
            }
            i += 2;
        }
        if i < m {
            let arow = std::slice::from_raw_parts(ap.add(i * k), k);
            let crow = cp.add(i * n);
            for j in 0..n {
                let s = dot_f32(arow, std::slice::from_raw_parts(btp.add(j * k), k));
                let cij = crow.add(j);
                *cij = if acc { *cij + s } else { s };
            }
        }
    }

    /// One C row of the tn product: c[kk,:] (+)= sum_i a[i,kk] * b[i,:].
    #[inline(always)]
    unsafe fn tn_row_f32(
        m: usize,
        k: usize,
        n: usize,
        acol: *const f32,
        bp: *const f32,
        crow: *mut f32,
        acc: bool,
    ) {
        let mut j = 0;
        while j + 8 <= n {
            let mut q = _mm256_setzero_ps();
            for i in 0..m {
                let va = _mm256_broadcast_ss(&*acol.add(i * k));
                q = _mm256_fmadd_ps(va, _mm256_loadu_ps(bp.add(i * n + j)), q);
            }
            store_acc(crow.add(j), q, acc);
            j += 8;
        }
        while j < n {
            let mut s = 0.0f32;
            for i in 0..m {
                s = (*acol.add(i * k)).mul_add(*bp.add(i * n + j), s);
            }
            *crow.add(j) = if acc { *crow.add(j) + s } else { s };
            j += 1;
        }
    }

    /// C[k,n] (+)= A[m,k]^T @ B[m,n]; m is chunked so each chunk of B stays
    /// cache-resident, then 4x16 register tiles over (k, n).
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_tn_f32(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        acc: bool,
    ) {
        const CHUNK: usize = 256;
        if m == 0 && !acc {
            c.fill(0.0);
            return;
        }
        let mut i0 = 0;
        while i0 < m {
            let mb = CHUNK.min(m - i0);
            tn_chunk_f32(mb, k, n, &a[i0 * k..], &b[i0 * n..], c, acc || i0 > 0);
            i0 += CHUNK;
        }
    }

    /// One m-chunk of the tn product, C written or accumulated once.
    #[target_feature(enable = "avx2", enable = "fma")]
    unsafe fn tn_chunk_f32(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        acc: bool,
    ) {
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let cp = c.as_mut_ptr();
        let mut kk = 0;
        while kk + 4 <= k {
            let a0 = ap.add(kk);
            let a1 = ap.add(kk + 1);
            let a2 = ap.add(kk + 2);
            let a3 = ap.add(kk + 3);
            let c0 = cp.add(kk * n);
            let c1 = cp.add((kk + 1) * n);
            let c2 = cp.add((kk + 2) * n);
            let c3 = cp.add((kk + 3) * n);
            let mut j = 0;
            while j + 16 <= n {
                let mut acc00 = _mm256_setzero_ps();
                let mut acc01 = _mm256_setzero_ps();
                let mut acc10 = _mm256_setzero_ps();
                let mut acc11 = _mm256_setzero_ps();
                let mut acc20 = _mm256_setzero_ps();
                let mut acc21 = _mm256_setzero_ps();
                let mut acc30 = _mm256_setzero_ps();
                let mut acc31 = _mm256_setzero_ps();
                for i in 0..m {
                    let brow = bp.add(i * n + j);
                    let b0 = _mm256_loadu_ps(brow);
                    let b1 = _mm256_loadu_ps(brow.add(8));
                    let arow = i * k;
                    let va0 = _mm256_broadcast_ss(&*a0.add(arow));
                    acc00 = _mm256_fmadd_ps(va0, b0, acc00);
                    acc01 = _mm256_fmadd_ps(va0, b1, acc01);
                    let va1 = _mm256_broadcast_ss(&*a1.add(arow));
                    acc10 = _mm256_fmadd_ps(va1, b0, acc10);
                    acc11 = _mm256_fmadd_ps(va1, b1, acc11);
                    let va2 = _mm256_broadcast_ss(&*a2.add(arow));
                    acc20 = _mm256_fmadd_ps(va2, b0, acc20);
                    acc21 = _mm256_fmadd_ps(va2, b1, acc21);
                    let va3 = _mm256_broadcast_ss(&*a3.add(arow));
                    acc30 = _mm256_fmadd_ps(va3, b0, acc30);
                    acc31 = _mm256_fmadd_ps(va3, b1, acc31);
                }
                store_acc(c0.add(j), acc00, acc);
                store_acc(c0.add(j + 8), acc01, acc);
                store_acc(c1.add(j), acc10, acc);
                store_acc(c1.add(j + 8), acc11, acc);
                store_acc(c2.add(j), acc20, acc);
                store_acc(c2.add(j + 8), acc21, acc);
                store_acc(c3.add(j), acc30, acc);
                store_acc(c3.add(j + 8), acc31, acc);
                j += 16;
            }
            if j + 8 <= n {
                let mut q0 = _mm256_setzero_ps();
                let mut q1 = _mm256_setzero_ps();
                let mut q2 = _mm256_setzero_ps();
                let mut q3 = _mm256_setzero_ps();
                for i in 0..m {
                    let b0 = _mm256_loadu_ps(bp.add(i * n + j));
                    let arow = i * k;
                    q0 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a0.add(arow)), b0, q0);
                    q1 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a1.add(arow)), b0, q1);
                    q2 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a2.add(arow)), b0, q2);
                    q3 = _mm256_fmadd_ps(_mm256_broadcast_ss(&*a3.add(arow)), b0, q3);
                }
                store_acc(c0.add(j), q0, acc);
                store_acc(c1.add(j), q1, acc);
                store_acc(c2.add(j), q2, acc);
                store_acc(c3.add(j), q3, acc);
                j += 8;
            }
            while j < n {
                let mut s0 = 0.0f32;
                let mut s1 = 0.0f32;
                let mut s2 = 0.0f32;
                let mut s3 = 0.0f32;
                for i in 0..m {
                    let bv = *bp.add(i * n + j);
                    let arow = i * k;
                    s0 = (*a0.add(arow)).mul_add(bv, s0);
                    s1 = (*a1.add(arow)).mul_add(bv, s1);
                    s2 = (*a2.add(arow)).mul_add(bv, s2);
                    s3 = (*a3.add(arow)).mul_add(bv, s3);
                }
                for (cr, s) in [(c0, s0), (c1, s1), (c2, s2), (c3, s3)] {
                    *cr.add(j) = if acc { *cr.add(j) + s } else { s };
                }
                j += 1;
            }
            kk += 4;
        }
        while kk < k {
            tn_row_f32(m, k, n, ap.add(kk), bp, cp.add(kk * n), acc);
            kk += 1;
        }
    }

    // f64 variants: same structure, 4-wide.

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len();
        let ap = a.as_ptr();
        let bp = b.as_ptr();
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut acc2 = _mm256_setzero_pd();
        let mut acc3 = _mm256_setzero_pd();
        let mut i = 0;
        while i + 16 <= n {
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(i)), _mm256_loadu_pd(bp.add(i)), acc0);
            acc1 = _mm256_fmadd_pd(
                _mm256_loadu_pd(ap.add(i + 4)),
                _mm256_loadu_pd(bp.add(i + 4)),
                acc1,
            );
            acc2 = _mm256_fmadd_pd(
                _mm256_loadu_pd(ap.add(i + 8)),
                _mm256_loadu_pd(bp.add(i + 8)),
                acc2,
            );
            acc3 = _mm256_fmadd_pd(
                _mm256_loadu_pd(ap.add(i + 12)),
                _mm256_loadu_pd(bp.add(i + 12)),
                acc3,
            );
            i += 16;
        }
        while i + 4 <= n {
            acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(ap.add(i)), _mm256_loadu_pd(bp.add(i)), acc0);
            i += 4;
        }
        let mut total = hsum256d(_mm256_add_pd(_mm256_add_pd(acc0, acc1), _mm256_add_pd(acc2, acc3)));
        while i < n {
            total = (*ap.add(i)).mul_add(*bp.add(i), total);
            i += 1;
        }
        total
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn axpy_f64(alpha: f64, x: &[f64], y: &mut [f64]) {
        let n = x.len();
        let xp = x.as_ptr();
        let yp = y.as_mut_ptr();
        let va = _mm256_set1_pd(alpha);
        let mut i = 0;
        while i + 4 <= n {
            let yv = _mm256_fmadd_pd(va, _mm256_loadu_pd(xp.add(i)), _mm256_loadu_pd(yp.add(i)));
            _mm256_storeu_pd(yp.add(i), yv);
            i += 4;
        }
        while i < n {
            *yp.add(i) = alpha.mul_add(*xp.add(i), *yp.add(i));
            i += 1;
        }
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_nn_f64(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        acc: bool,
    ) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            if !acc {
                crow.fill(0.0);
            }
            for l in 0..k {
                axpy_f64(a[i * k + l], &b[l * n..(l + 1) * n], crow);
            }
        }
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_nt_f64(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        bt: &[f64],
        c: &mut [f64],
        acc: bool,
    ) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let d = dot_f64(arow, &bt[j * k..(j + 1) * k]);
                let cij = &mut c[i * n + j];
                *cij = if acc { *cij + d } else { d };
            }
        }
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn gemm_tn_f64(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        acc: bool,
    ) {
        if !acc {
            c.fill(0.0);
        }
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for kk in 0..k {
                axpy_f64(a[i * k + kk], brow, &mut c[kk * n..(kk + 1) * n]);
            }
        }
    }

    /// Vectorized single-precision exponential (Cody-Waite reduction plus a
    /// degree-6 polynomial). Inputs <= -87.33655 return exactly 0, inputs
    /// >= 88.72284 return +inf.
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn exp_slice_f32(xs: &mut [f32]) {
        const LO: f32 = -87.33655;
        const HI: f32 = 88.72284;
        let log2e = _mm256_set1_ps(std::f32::consts::LOG2_E);
        let ln2_hi = _mm256_set1_ps(0.693_359_375);
        let ln2_lo = _mm256_set1_ps(-2.121_944_4e-4);
        let p0 = _mm256_set1_ps(1.987_569_1e-4);
        let p1 = _mm256_set1_ps(1.398_199_9e-3);
        let p2 = _mm256_set1_ps(8.333_452e-3);
        let p3 = _mm256_set1_ps(4.166_579_6e-2);
        let p4 = _mm256_set1_ps(1.666_666_5e-1);
        let p5 = _mm256_set1_ps(5.000_000_1e-1);
        let one = _mm256_set1_ps(1.0);
        let lo = _mm256_set1_ps(LO);
        let hi = _mm256_set1_ps(HI);
        let inf = _mm256_set1_ps(f32::INFINITY);
        let bias = _mm256_set1_epi32(127);

        let n = xs.len();
        let p = xs.as_mut_ptr();
        let mut i = 0;
        while i + 8 <= n {
            let x = _mm256_loadu_ps(p.add(i));
            let under = _mm256_cmp_ps(x, lo, _CMP_LE_OQ);
            let over = _mm256_cmp_ps(x, hi, _CMP_GE_OQ);
            let xc = _mm256_max_ps(_mm256_min_ps(x, hi), lo);
            let t = _mm256_mul_ps(xc, log2e);
            let nf = _mm256_round_ps(t, _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
            let r = _mm256_fnmadd_ps(nf, ln2_hi, xc);
            let r = _mm256_fnmadd_ps(nf, ln2_lo, r);
            let r2 = _mm256_mul_ps(r, r);
            let mut q = p0;
            q = _mm256_fmadd_ps(q, r, p1);
            q = _mm256_fmadd_ps(q, r, p2);
            q = _mm256_fmadd_ps(q, r, p3);
            q = _mm256_fmadd_ps(q, r, p4);
            q = _mm256_fmadd_ps(q, r, p5);
            let y = _mm256_add_ps(_mm256_fmadd_ps(q, r2, r), one);
            let ni = _mm256_cvtps_epi32(nf);
            let scale = _mm256_castsi256_ps(_mm256_slli_epi32(_mm256_add_epi32(ni, bias), 23));
            let y = _mm256_mul_ps(y, scale);
            let y = _mm256_blendv_ps(y, inf, over);
            let y = _mm256_andnot_ps(under, y);
            _mm256_storeu_ps(p.add(i), y);
            i += 8;
        }
        while i < n {
            let x = *p.add(i);
            *p.add(i) = if x <= LO {
                0.0
            } else if x >= HI {
                f32::INFINITY
            } else {
                libm::expf(x)
            };
            i += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// trait impls
// ---------------------------------------------------------------------------

macro_rules! dispatch {
    ($avx_fn:path, $scalar_fn:path, ($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if avx::available() {
                return unsafe { $avx_fn($($arg),*) };
            }
        }
        $scalar_fn($($arg),*)
    }};
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn exp(self) -> Self {
        libm::expf(self)
    }
    fn ln(self) -> Self {
        libm::logf(self)
    }
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn minv(self, other: Self) -> Self {
        f32::min(self, other)
    }
    fn neg_infinity() -> Self {
        f32::NEG_INFINITY
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        dispatch!(avx::dot_f32, dot_scalar, (a, b))
    }
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        dispatch!(avx::axpy_f32, axpy_scalar, (alpha, x, y))
    }
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], acc: bool) {
        dispatch!(avx::gemm_nn_f32, gemm_nn_scalar, (m, k, n, a, b, c, acc))
    }
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], bt: &[Self], c: &mut [Self], acc: bool) {
        dispatch!(avx::gemm_nt_f32, gemm_nt_scalar, (m, k, n, a, bt, c, acc))
    }
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], acc: bool) {
        dispatch!(avx::gemm_tn_f32, gemm_tn_scalar, (m, k, n, a, b, c, acc))
    }
    fn exp_slice(xs: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        {
            if avx::available() {
                return unsafe { avx::exp_slice_f32(xs) };
            }
        }
        for x in xs.iter_mut() {
            *x = if *x <= -87.33655 {
                0.0
            } else {
                libm::expf(*x)
            };
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn minv(self, other: Self) -> Self {
        f64::min(self, other)
    }
    fn neg_infinity() -> Self {
        f64::NEG_INFINITY
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        dispatch!(avx::dot_f64, dot_scalar, (a, b))
    }
    fn axpy(alpha: Self, x: &[Self], y: &mut [Self]) {
        dispatch!(avx::axpy_f64, axpy_scalar, (alpha, x, y))
    }
    fn gemm_nn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], acc: bool) {
        dispatch!(avx::gemm_nn_f64, gemm_nn_scalar, (m, k, n, a, b, c, acc))
    }
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], bt: &[Self], c: &mut [Self], acc: bool) {
        dispatch!(avx::gemm_nt_f64, gemm_nt_scalar, (m, k, n, a, bt, c, acc))
    }
    fn gemm_tn(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self], acc: bool) {
        dispatch!(avx::gemm_tn_f64, gemm_tn_scalar, (m, k, n, a, b, c, acc))
    }
    fn exp_slice(xs: &mut [Self]) {
        for x in xs.iter_mut() {
            *x = libm::exp(*x);
        }
    }
}
