//! Brachytherapy seed localization: synthetic phantoms, preprocessing,
//! probability-map targets, a 3D encoder-decoder regression network,
//! watershed extraction and greedy-matching evaluation.

pub mod error;
pub mod eval;
pub mod infer;
pub mod io;
pub mod net;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod targetmap;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{AnnotationSet, Point3, Volume};
