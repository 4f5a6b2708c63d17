/// Keeps glibc from mmapping (and page-faulting afresh) every large
/// activation buffer. No-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
    }
}
