//! Sparse-view neural surface reconstruction.
//!
//! Jointly optimizes a signed-distance field and a color field by volume
//! rendering a handful of posed images, regularized globally by an unsigned
//! distance field learned from SfM points and locally by projection-feature
//! consistency over on-surface and pseudo on-surface points. Meshes come out
//! through marching cubes; quality is measured as capped symmetric Chamfer
//! distance against reference points.

pub mod autodiff;
pub mod camera;
pub mod config;
pub mod features;
pub mod fields;
pub mod geom;
pub mod losses;
pub mod mesh;
pub mod pipeline;
pub mod metrics;
pub mod render;
pub mod trainer;
pub mod scene;

pub use autodiff::{Tape, Tensor};

/// Tune the process allocator for the tape workload: training graphs
/// allocate and drop megabytes of activation buffers per iteration, and the
/// default glibc thresholds hand those chunks back to the kernel every time.
/// Raising the mmap/trim thresholds keeps them in the arena. Call once at
/// process start; safe to call repeatedly. No-op on non-glibc targets.
pub fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        }
    });
}
