//! Minimal dense-tensor engine: f64 tensors, a reverse-mode tape, and Adam.

mod adam;
pub mod kernels;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::{sigmoid, softplus, softplus_inv};
pub use tape::{GroupMap, Mask, Tape, Var, BCE_EPS};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function at `x`.
///
/// Used as the independent oracle for the analytic tape gradients.
pub fn finite_difference<F>(x: &[f64], h: f64, coords: &[usize], mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&c| {
            let orig = probe[c];
            probe[c] = orig + h;
            let plus = f(&probe);
            probe[c] = orig - h;
            let minus = f(&probe);
            probe[c] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Relative error used by the gradient checks; absolute when both sides are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Keeps large tape buffers on the heap instead of fresh `mmap` pages. The
/// tape allocates and frees many multi-megabyte buffers per step; with glibc
/// defaults each one is returned to the kernel and page-faulted back in,
/// which roughly doubles step time. Process-wide; runs once.
pub fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator thresholds.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 256 << 20);
        }
    });
}
