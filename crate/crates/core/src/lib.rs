//! Whole-slide image processing and vision-language alignment toolkit.
//!
//! The crate covers the full slide path: synthetic or file-backed rasters,
//! tissue segmentation and 2048-px region planning with 1/4/16 multi-scale
//! subdivision, dual-encoder tile embedding with region average pooling,
//! fixed-length token compression by learned-query cross-attention, and the
//! evaluation side (contrastive alignment, zero-shot prompts, linear probing,
//! gated-attention MIL, BLEU/ROUGE-L) together with the four-stage training
//! schedule.
//!
//! All numerics are computed in `f64`. [`FeatureMatrix`] stores `f32`
//! because that is what the on-disk feature format carries.

pub mod compressor;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod feature;
pub mod linalg;
pub mod metrics;
pub mod mil;
pub mod optim;
pub mod probe;
pub mod schedule;
pub mod slide;
pub mod synthetic;
pub mod tiler;

pub use error::{Error, Result};
pub use feature::{FeatureMatrix, Provenance};
pub use linalg::Mat;
pub use slide::{SlideRaster, SyntheticSlideSpec};

/// Runs `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub(crate) fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
