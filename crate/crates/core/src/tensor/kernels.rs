//! Shared accumulation kernels. Every reduction in the crate funnels through
//! these so the accumulation order is fixed: lane-split dot products always
//! use eight partial sums combined pairwise, and axpy updates are strictly
//! element-ordered. That makes results independent of call site and thread
//! count while still letting the compiler vectorize the f64 chains.

use super::Element;

/// `sum_i a[i] * b[i]` in f64. Eight fixed lanes break the FMA latency
/// chain; the combine order never changes, so the result is deterministic.
#[inline]
pub(crate) fn dot_acc<E: Element>(a: &[E], b: &[E]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let ar = ac.remainder();
    let br = bc.remainder();
    for (ca, cb) in ac.zip(bc) {
        for i in 0..8 {
            lanes[i] += ca[i].to_f64() * cb[i].to_f64();
        }
    }
    for i in 0..ar.len() {
        lanes[i] += ar[i].to_f64() * br[i].to_f64();
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
}

/// `acc[i] += s * x[i]` with f64 accumulators. No cross-element dependency,
/// so element order is trivially preserved under vectorization.
#[inline]
pub(crate) fn axpy_acc<E: Element>(acc: &mut [f64], s: f64, x: &[E]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += s * v.to_f64();
    }
}
