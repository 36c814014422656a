pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod params;
pub mod refiners;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use features::{BackboneConfig, FeatureMap, RoIFeature};
pub use geometry::{AnchorConfig, BBox, BoxDelta, EdgeDistances, ImageSize, Point};
pub use image::Image;
pub use refiners::guidance::{GuidanceFeature, GuidanceKind};
pub use refiners::{Model, ModelConfig, RefinerKind, RefinerOutput};
