//! Few-shot label synthesis from generative-backbone features: a per-pixel
//! MLP ensemble trained on a handful of annotated samples labels freshly
//! generated images, ensemble disagreement filters the results, and a coreset
//! step picks the next samples worth annotating.

pub mod annotation;
pub mod backbone;
pub mod factory;
pub mod feature_volume;
pub mod hash;
pub mod interpreter;
pub mod keypoints;
pub mod linalg;
pub mod lock;
pub mod metrics;
pub mod raster;
pub mod selection;
pub mod uncertainty;
