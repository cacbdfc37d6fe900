//! Criterion benchmarks for the routing oracle and the forecasting model.
//! See `benches/`.

/// Keeps freed training buffers on the heap (glibc only); call once before
/// timing anything.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
