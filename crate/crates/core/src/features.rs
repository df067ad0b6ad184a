//! Image -> keypoints with descriptors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{
    assign_orientation, assign_orientations, compute_descriptor, compute_gradients, Descriptor,
    DescriptorParams, GradientField,
};
use crate::detector::{detect_in_pyramid, Keypoint};
use crate::error::Result;
use crate::imgio::GrayImage;
use crate::scalespace::{build_dog_pyramid, build_gaussian_pyramid, GaussianPyramid, PyramidParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub keypoint: Keypoint,
    pub descriptor: Descriptor,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureParams {
    pub pyramid: PyramidParams,
    pub descriptor: DescriptorParams,
    /// Keep only the strongest keypoints (by response) before description.
    pub max_keypoints: Option<usize>,
}

/// Gaussian level whose nominal blur is closest to the keypoint's scale.
pub fn nearest_level(kp: &Keypoint, levels: usize) -> usize {
    (kp.level.round().max(0.0) as usize).min(levels - 1)
}

/// Detects, orients and describes keypoints. Output follows the detector's
/// response order; keypoints whose patch or window leaves the image, or whose
/// descriptor is all zeros, are dropped.
pub fn extract_features(img: &GrayImage, params: &FeatureParams) -> Result<Vec<Feature>> {
    let gp = build_gaussian_pyramid(img, &params.pyramid)?;
    let dog = build_dog_pyramid(&gp);
    let keypoints = detect_in_pyramid(&gp, &dog, &params.pyramid, params.max_keypoints);
    Ok(describe_keypoints(&gp, &keypoints, &params.descriptor))
}

pub fn describe_keypoints(
    gp: &GaussianPyramid,
    keypoints: &[Keypoint],
    params: &DescriptorParams,
) -> Vec<Feature> {
    let mut wanted: Vec<(usize, usize)> = keypoints
        .iter()
        .map(|kp| (kp.octave, nearest_level(kp, gp.octaves[kp.octave].levels.len())))
        .collect();
    wanted.sort_unstable();
    wanted.dedup();
    let fields: BTreeMap<(usize, usize), GradientField> = wanted
        .par_iter()
        .map(|&(o, l)| ((o, l), compute_gradients(&gp.octaves[o].levels[l])))
        .collect();

    keypoints
        .par_iter()
        .map(|kp| {
            let key = (kp.octave, nearest_level(kp, gp.octaves[kp.octave].levels.len()));
            let field = &fields[&key];
            let scale = gp.octave_scale(kp.octave);
            let oriented = if params.multi_orientation {
                assign_orientations(kp, field, scale, params.peak_ratio)
            } else {
                assign_orientation(kp, field, scale).into_iter().collect()
            };
            oriented
                .into_iter()
                .filter_map(|okp| {
                    compute_descriptor(&okp, field, scale, params.clamp)
                        .filter(|d| !d.is_degenerate())
                        .map(|descriptor| Feature {
                            keypoint: okp,
                            descriptor,
                        })
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}
