//! Truly-dynamic object detection by warped-mask overlap, and small-object
//! removal.
//!
//! An object that only moves with the camera lands on its own target-frame
//! mask when its source mask is forward-warped with the ego-motion; an
//! independently moving object does not. The overlap of the two masks
//! (Dice or IoU) therefore separates static from dynamic instances.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::mask::{mask_union, BinaryMask, InstanceId, InstanceMaskSet};
use crate::raster::Raster;
use crate::warp::forward_warp_mask;

/// Overlap metric used for theta filtering.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMetric {
    #[default]
    Dice,
    Iou,
}

impl std::str::FromStr for OverlapMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dice" => Ok(Self::Dice),
            "iou" | "jaccard" => Ok(Self::Iou),
            other => Err(Error::InvalidArgument(format!("unknown metric {other:?}"))),
        }
    }
}

fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_dims(a.dims(), b.dims())?;
    let (mut na, mut nb, mut ni) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        ni += (x && y) as usize;
    }
    Ok((na, nb, ni))
}

/// Sørensen–Dice coefficient `2|a∩b| / (|a|+|b|)`.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (na, nb, ni) = overlap_counts(a, b)?;
    if na + nb == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(2.0 * ni as f64 / (na + nb) as f64)
}

/// Jaccard index `|a∩b| / |a∪b|`.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (na, nb, ni) = overlap_counts(a, b)?;
    if na + nb == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(ni as f64 / (na + nb - ni) as f64)
}

/// Pixels that belong to no instance in either frame.
pub fn build_background_mask(
    masks_t: &InstanceMaskSet,
    masks_tgt: &InstanceMaskSet,
) -> Result<BinaryMask> {
    check_dims(masks_t.dims(), masks_tgt.dims())?;
    let (w, h) = masks_t.dims();
    let both = mask_union(&[&masks_t.union(), &masks_tgt.union()], w, h)?;
    Ok(both.complement())
}

/// Removes every instance whose pixel count is strictly below
/// `min_frac · width · height`. Returns the kept set and the removed ids.
pub fn filter_small_objects(
    masks: &InstanceMaskSet,
    min_frac: f64,
) -> Result<(InstanceMaskSet, Vec<InstanceId>)> {
    if !(0.0..=1.0).contains(&min_frac) {
        return Err(Error::InvalidArgument(format!(
            "min_frac must lie in [0, 1], got {min_frac}"
        )));
    }
    let threshold = min_frac * (masks.width() * masks.height()) as f64;
    let removed: Vec<InstanceId> = masks
        .instances()
        .iter()
        .filter(|i| (i.mask.pixel_count() as f64) < threshold)
        .map(|i| i.id)
        .collect();
    Ok((masks.without(&removed), removed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapScore {
    pub instance_id: InstanceId,
    pub dice: f64,
    pub iou: f64,
    /// Instance has no mask in the target frame.
    pub missing_in_target: bool,
    /// Warped and target masks are both empty; the overlap is undefined.
    pub undefined: bool,
}

impl OverlapScore {
    pub fn value(&self, metric: OverlapMetric) -> f64 {
        match metric {
            OverlapMetric::Dice => self.dice,
            OverlapMetric::Iou => self.iou,
        }
    }
}

/// Forward-warps each source instance mask with `ego_pose` and scores it
/// against the same id's target mask. Output is ordered by instance id.
pub fn score_objects(
    masks_t: &InstanceMaskSet,
    masks_tgt: &InstanceMaskSet,
    depth_t: &Raster,
    ego_pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<Vec<OverlapScore>> {
    check_dims(masks_t.dims(), masks_tgt.dims())?;
    check_dims(masks_t.dims(), depth_t.dims())?;
    let mut scores = Vec::with_capacity(masks_t.len());
    for inst in masks_t.sorted().instances() {
        let Some(target) = masks_tgt.get(inst.id) else {
            scores.push(OverlapScore {
                instance_id: inst.id,
                dice: 0.0,
                iou: 0.0,
                missing_in_target: true,
                undefined: false,
            });
            continue;
        };
        let warped = forward_warp_mask(&inst.mask, depth_t, ego_pose, k)?;
        let score = match (dice(&warped, target), iou(&warped, target)) {
            (Ok(d), Ok(i)) => OverlapScore {
                instance_id: inst.id,
                dice: d,
                iou: i,
                missing_in_target: false,
                undefined: false,
            },
            (Err(Error::UndefinedOverlap), _) | (_, Err(Error::UndefinedOverlap)) => OverlapScore {
                instance_id: inst.id,
                dice: 0.0,
                iou: 0.0,
                missing_in_target: false,
                undefined: true,
            },
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        scores.push(score);
    }
    Ok(scores)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionClassification {
    pub dynamic_ids: Vec<InstanceId>,
    pub static_ids: Vec<InstanceId>,
    pub removed_small_ids: Vec<InstanceId>,
    pub scores: Vec<OverlapScore>,
}

impl MotionClassification {
    pub fn is_dynamic(&self, id: InstanceId) -> bool {
        self.dynamic_ids.contains(&id)
    }
}

/// Classifies instances from precomputed scores.
///
/// Scores are sorted in decreasing order (ties by ascending id) and only the
/// first `max_objects` are candidates; a candidate is dynamic iff its score
/// is strictly below `theta`. Non-candidates and undefined overlaps are static.
pub fn classify_scores(
    scores: Vec<OverlapScore>,
    theta: f64,
    metric: OverlapMetric,
    max_objects: usize,
) -> Result<MotionClassification> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("theta must lie in [0, 1], got {theta}")));
    }
    if max_objects == 0 {
        return Err(Error::InvalidArgument("max_objects must be at least 1".into()));
    }
    let mut ranked: Vec<&OverlapScore> = scores.iter().filter(|s| !s.undefined).collect();
    for s in scores.iter().filter(|s| s.undefined) {
        log::warn!(
            "instance {}: warped and target masks both empty, treating as static",
            s.instance_id
        );
    }
    ranked.sort_by(|a, b| {
        b.value(metric)
            .total_cmp(&a.value(metric))
            .then(a.instance_id.cmp(&b.instance_id))
    });
    let dynamic: BTreeSet<InstanceId> = ranked
        .iter()
        .take(max_objects)
        .filter(|s| s.value(metric) < theta)
        .map(|s| s.instance_id)
        .collect();
    let mut scores = scores;
    scores.sort_by_key(|s| s.instance_id);
    let static_ids = scores
        .iter()
        .map(|s| s.instance_id)
        .filter(|id| !dynamic.contains(id))
        .collect();
    Ok(MotionClassification {
        dynamic_ids: dynamic.into_iter().collect(),
        static_ids,
        removed_small_ids: Vec::new(),
        scores,
    })
}

/// Scores every instance of `masks_t` and applies the theta rule.
#[allow(clippy::too_many_arguments)]
pub fn theta_filter(
    masks_t: &InstanceMaskSet,
    masks_tgt: &InstanceMaskSet,
    depth_t: &Raster,
    ego_pose: &RigidPose,
    k: &CameraIntrinsics,
    theta: f64,
    metric: OverlapMetric,
    max_objects: usize,
) -> Result<MotionClassification> {
    let scores = score_objects(masks_t, masks_tgt, depth_t, ego_pose, k)?;
    classify_scores(scores, theta, metric, max_objects)
}

/// Background mask that excludes only the dynamic instances, in either frame.
pub fn updated_background_mask(
    masks_t: &InstanceMaskSet,
    masks_tgt: &InstanceMaskSet,
    classification: &MotionClassification,
) -> Result<BinaryMask> {
    check_dims(masks_t.dims(), masks_tgt.dims())?;
    let (w, h) = masks_t.dims();
    let ids = &classification.dynamic_ids;
    let dynamic = mask_union(&[&masks_t.union_of(ids), &masks_tgt.union_of(ids)], w, h)?;
    Ok(dynamic.complement())
}
