//! Dot-product kernels.
//!
//! `dot_fast` accumulates products in eight independent f32 lanes and reduces
//! the lanes in f64; it drives the bulk index scan. `dot` accumulates exactly
//! representable f32 products in f64 and is the only kernel used for the
//! distances that decide neighbor order, on every search path.

const LANES: usize = 8;

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        sum += *x as f64 * *y as f64;
    }
    sum
}

/// Worst-case absolute error of [`dot_fast`] relative to the exact dot
/// product, for two vectors of unit L2 norm and length `dim`.
pub(crate) fn fast_error_bound(dim: usize) -> f64 {
    // each lane sums ceil(dim / LANES) products; every f32 add and multiply
    // contributes at most one unit roundoff of a partial sum bounded by 1
    let per_lane = dim.div_ceil(LANES) as f64;
    2.0 * (per_lane + 2.0) * f32::EPSILON as f64
}

#[inline]
pub(crate) fn dot_fast(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut sum = 0.0f64;
    for lane in acc {
        sum += lane as f64;
    }
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        sum += (*x as f64) * (*y as f64);
    }
    sum
}

/// Dot products of one row against a tile of queries, written to `out`.
/// Every implementation stays within [`fast_error_bound`].
pub(crate) type TileKernel = fn(&[&[f32]], &[f32], &mut [f64]);

/// Picks the fastest tile kernel this CPU supports.
pub(crate) fn tile_kernel() -> TileKernel {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            return dot_tile_avx2;
        }
    }
    dot_tile_portable
}

pub(crate) fn dot_tile_portable(queries: &[&[f32]], row: &[f32], out: &mut [f64]) {
    for (q, o) in queries.iter().zip(out) {
        *o = dot_fast(q, row);
    }
}

#[cfg(target_arch = "x86_64")]
fn dot_tile_avx2(queries: &[&[f32]], row: &[f32], out: &mut [f64]) {
    let mut chunks = queries.chunks_exact(LANES);
    let mut outs = out.chunks_exact_mut(LANES);
    for (q, o) in (&mut chunks).zip(&mut outs) {
        // SAFETY: selected only after runtime detection of avx2 and fma
        unsafe { avx2::dot_tile::<LANES>(q, row, o) }
    }
    for (q, o) in chunks.remainder().iter().zip(outs.into_remainder()) {
        unsafe { avx2::dot_tile::<1>(std::slice::from_ref(q), row, std::slice::from_mut(o)) }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    use super::LANES;

    // lddqu rather than loadu: loadu goes through a copy whose debug-build
    // precondition checks dominate the loop in test builds
    #[inline]
    #[target_feature(enable = "avx2")]
    unsafe fn load(p: *const f32) -> __m256 {
        _mm256_castsi256_ps(_mm256_lddqu_si256(p as *const __m256i))
    }

    /// `N` queries against one row: eight f32 lanes per query with fused
    /// multiply-add, lanes reduced in f64 like `dot_fast`.
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_tile<const N: usize>(
        queries: &[&[f32]],
        row: &[f32],
        out: &mut [f64],
    ) {
        debug_assert!(queries.len() == N && out.len() == N);
        let dim = row.len();
        let full = dim - dim % LANES;
        let rp = row.as_ptr();
        let ptrs: [*const f32; N] = std::array::from_fn(|n| queries[n].as_ptr());
        let mut acc = [_mm256_setzero_ps(); N];
        let mut j = 0;
        while j < full {
            let r = load(rp.wrapping_add(j));
            for n in 0..N {
                acc[n] = _mm256_fmadd_ps(load(ptrs[n].wrapping_add(j)), r, acc[n]);
            }
            j += LANES;
        }
        let mut lanes = [0.0f32; LANES];
        for n in 0..N {
            _mm256_storeu_ps(lanes.as_mut_ptr(), acc[n]);
            let mut sum = 0.0f64;
            for v in lanes {
                sum += v as f64;
            }
            for k in full..dim {
                sum += queries[n][k] as f64 * row[k] as f64;
            }
            out[n] = sum;
        }
    }
}

#[inline]
pub(crate) fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}
