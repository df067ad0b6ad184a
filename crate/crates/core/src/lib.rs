//! Scale-space keypoints, 128-d gradient descriptors, ratio-test matching and
//! open-set gallery identification.
//!
//! The pipeline is `imgio` → `scalespace` → `detector` → `descriptor`
//! (bundled by `features`) → `matcher` → `gallery`.

pub mod descriptor;
pub mod detector;
pub mod error;
pub mod features;
pub mod gallery;
pub mod imgio;
pub mod matcher;
pub mod scalespace;
pub mod synth;

pub use descriptor::{Descriptor, DescriptorParams, DESCRIPTOR_LEN};
pub use detector::Keypoint;
pub use error::{Error, Result};
pub use features::{extract_features, Feature, FeatureParams};
pub use gallery::{GalleryEntry, GalleryIndex, GateMode, Gates, IdentificationReport};
pub use imgio::GrayImage;
pub use matcher::{lowe_similarity, MatchParams, MatcherKind};
pub use scalespace::PyramidParams;
