//! Building blocks for unbalanced 3D binary segmentation experiments:
//! asymmetric overlap losses with analytic gradients, overlapping-patch
//! prediction fusion with spline-weighted soft voting, lesion-aware
//! evaluation metrics, a deterministic synthetic volume generator, and a
//! small trainable voxel classifier that ties them together.
//!
//! Data-parallel inner loops run on rayon when the default `parallel`
//! feature is enabled and fall back to plain iteration without it; either
//! way results are bit-identical (see [`mod@par`] internals: fixed-size
//! chunking with ordered combination).

pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
mod par;
pub mod patching;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};

/// Cap the global worker pool. Returns false when the sequential build is
/// in use or a pool was already installed.
pub fn configure_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}
