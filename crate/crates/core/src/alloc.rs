//! Allocator tuning. The autodiff graph frees and reallocates many
//! multi-megabyte buffers per step; with glibc defaults those are returned to
//! the kernel each time and the next step pays the page faults again.

use std::sync::Once;

static TUNE: Once = Once::new();

#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune() {
    use std::os::raw::c_int;
    extern "C" {
        fn mallopt(param: c_int, value: c_int) -> c_int;
    }
    const M_TRIM_THRESHOLD: c_int = -1;
    const M_TOP_PAD: c_int = -2;
    const M_MMAP_THRESHOLD: c_int = -3;
    // SAFETY: mallopt only adjusts allocator parameters; it is called once,
    // before the heavy allocation starts.
    unsafe {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, 1 << 30);
        mallopt(M_TOP_PAD, 64 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune() {}

/// Keeps freed buffers in the process heap. Idempotent.
pub fn tune_allocator() {
    TUNE.call_once(tune);
}
