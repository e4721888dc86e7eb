//! End-to-end evaluation of a frame sequence: ego-motion, dynamic-object
//! filtering, per-object motion, reconstruction, losses and metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::io::{Frame, Sequence};
use crate::losses::{
    composite_reconstruction, geometric_loss, height_loss, photometric_loss, smoothness_loss, Composite,
    HeightPriors, LossReport, LossWeights, ObjectWarp,
};
use crate::mask::{BinaryMask, InstanceId, InstanceMaskSet};
use crate::metrics::{depth_metrics, MetricsConfig, MetricsReport};
use crate::pose::{estimate_object_motion, estimate_pose_masked, ObjectMotion, PoseEstimate, PoseSolverConfig};
use crate::raster::{is_valid_depth, Raster, ValidityMask};
use crate::segment::{
    build_background_mask, filter_small_objects, theta_filter, updated_background_mask, MotionClassification,
    OverlapMetric,
};
use crate::warp::{inverse_sample_labels, inverse_warp, inverse_warp_depth, inverse_warp_weighted, WarpResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub theta: f64,
    pub metric: OverlapMetric,
    pub temporal_stride: usize,
    pub min_object_frac: f64,
    pub max_objects: usize,
    pub weights: LossWeights,
    pub both_directions: bool,
    pub seed: u64,
    /// Height prior `p_h` in scene units.
    pub height_prior: f64,
    pub solver: PoseSolverConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            theta: 0.9,
            metric: OverlapMetric::Dice,
            temporal_stride: 2,
            min_object_frac: 0.0075,
            max_objects: 20,
            weights: LossWeights::default(),
            both_directions: false,
            seed: 0,
            height_prior: 1.5,
            solver: PoseSolverConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Configuration that treats every object as a motion candidate.
    pub fn all_objects(&self) -> Self {
        Self {
            theta: 1.0,
            min_object_frac: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::InvalidArgument(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if !(1..=2).contains(&self.temporal_stride) {
            return Err(Error::InvalidArgument(format!(
                "temporal stride must be 1 or 2, got {}",
                self.temporal_stride
            )));
        }
        if !(0.0..=1.0).contains(&self.min_object_frac) {
            return Err(Error::InvalidArgument(format!(
                "min object fraction must lie in [0, 1], got {}",
                self.min_object_frac
            )));
        }
        if self.max_objects == 0 {
            return Err(Error::InvalidArgument("max_objects must be at least 1".into()));
        }
        if !(self.height_prior > 0.0 && self.height_prior.is_finite()) {
            return Err(Error::InvalidArgument(format!("height prior must be positive, got {}", self.height_prior)));
        }
        self.weights.validate()?;
        self.solver.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPoseReport {
    pub instance_id: InstanceId,
    /// Residual motion after the ego-motion, when estimation succeeded.
    pub estimate: Option<PoseEstimate>,
    /// Why the object fell back to the background motion.
    pub error: Option<String>,
}

/// One reconstruction direction: `target` is synthesised from `source`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub source: usize,
    pub target: usize,
    /// Pose mapping target-camera points into the source camera.
    pub initial_ego: PoseEstimate,
    pub updated_ego: PoseEstimate,
    pub classification: MotionClassification,
    pub objects: Vec<ObjectPoseReport>,
    pub losses: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub source: usize,
    pub target: usize,
    pub forward: DirectionReport,
    pub backward: Option<DirectionReport>,
    /// Forward losses, or the mean of both directions.
    pub losses: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub n_frames: usize,
    pub pairs: Vec<PairReport>,
    /// Mean over pairs.
    pub losses: LossReport,
    /// Mean over frames, when ground truth depth was supplied.
    pub metrics: Option<MetricsReport>,
    pub frame_metrics: Vec<MetricsReport>,
}

impl PipelineReport {
    /// JSON with keys in alphabetical order.
    pub fn to_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Everything computed for one direction, including the rasters.
#[derive(Clone, Debug)]
pub struct DirectionResult {
    pub report: DirectionReport,
    pub reconstruction: Composite,
    /// Validity times label consistency.
    pub valid: ValidityMask,
}

fn label_map_without(masks: &InstanceMaskSet, removed: &[InstanceId]) -> Vec<InstanceId> {
    masks.without(removed).label_map()
}

/// Largest `|d̂ − d| / (d̂ + d)` at which a target pixel counts as visible in
/// the source.
pub const DEPTH_CONSISTENCY_TOL: f64 = 0.01;

/// Target pixels whose depth, moved into the source camera by `pose`, agrees
/// with the source depth there. Drops occluded and disoccluded pixels and the
/// mixed samples along depth edges.
pub fn depth_consistent_region(
    src_depth: &Raster,
    tgt_depth: &Raster,
    pose: &RigidPose,
    k: &CameraIntrinsics,
    tol: f64,
) -> Result<BinaryMask> {
    let dw = inverse_warp_depth(src_depth, tgt_depth, pose, k)?;
    let (w, h) = tgt_depth.dims();
    let (c, s) = (dw.computed.data(), dw.sampled.data());
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let p = y * w + x;
        let (a, b) = (c[p] as f64, s[p] as f64);
        dw.valid.at(p) && (a - b).abs() <= tol * (a + b)
    }))
}

/// Runs every stage for `target` reconstructed from `source`.
pub fn process_direction(
    src: &Frame,
    tgt: &Frame,
    (source, target): (usize, usize),
    k: &CameraIntrinsics,
    cfg: &PipelineConfig,
) -> Result<DirectionResult> {
    let (w, h) = src.dims();
    let solver = &cfg.solver;

    let background = build_background_mask(&src.masks, &tgt.masks)?;
    if background.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let src_background = src.masks.union().complement();
    let initial = estimate_pose_masked(
        &src.image,
        &src_background,
        &tgt.image,
        &tgt.depth,
        &background,
        k,
        &RigidPose::identity(),
        solver,
    )?;

    let (kept, removed) = filter_small_objects(&src.masks, cfg.min_object_frac)?;
    let tgt_kept = tgt.masks.without(&removed);
    let mut classification = theta_filter(
        &kept,
        &tgt_kept,
        &src.depth,
        &initial.pose.inverse(),
        k,
        cfg.theta,
        cfg.metric,
        cfg.max_objects,
    )?;
    classification.removed_small_ids = removed.clone();

    let background = updated_background_mask(&src.masks, &tgt.masks, &classification)?;
    if background.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let consistent = depth_consistent_region(&src.depth, &tgt.depth, &initial.pose, k, DEPTH_CONSISTENCY_TOL)?;
    let refined = background.intersect(&consistent)?;
    let background = if refined.is_empty() { background } else { refined };
    let src_background = src.masks.union_of(&classification.dynamic_ids).complement();
    let updated = estimate_pose_masked(
        &src.image,
        &src_background,
        &tgt.image,
        &tgt.depth,
        &background,
        k,
        &initial.pose,
        solver,
    )?;
    let bg_pose = updated.pose;
    let ego = bg_pose.inverse();

    let motions: Vec<(InstanceId, Result<ObjectMotion>)> = classification
        .dynamic_ids
        .par_iter()
        .map(|&id| {
            let r = match (kept.get(id), tgt_kept.get(id)) {
                (Some(m_src), Some(m_tgt)) => {
                    estimate_object_motion(&src.image, &tgt.image, &src.depth, m_src, m_tgt, &ego, k, solver)
                }
                _ => Err(Error::NoOverlap),
            };
            (id, r)
        })
        .collect();

    let bg = inverse_warp(&src.image, &tgt.depth, &bg_pose, k)?;
    let mut objects = Vec::new();
    let mut object_reports = Vec::new();
    let mut object_poses = Vec::new();
    for (id, r) in motions {
        match r {
            Ok(m) => {
                let q_inv = m.estimate.pose.inverse();
                let fw = &m.forward;
                let recon = inverse_warp_weighted(&fw.image, Some(&fw.validity), &tgt.depth, &q_inv, k)?;
                let depth = inverse_warp_weighted(&fw.depth, Some(&fw.validity), &tgt.depth, &q_inv, k)?.image;
                let claimed = BinaryMask::from_fn(w, h, |x, y| recon.validity.get(y * w + x) >= 0.5);
                objects.push(ObjectWarp {
                    id,
                    warp: WarpResult {
                        image: recon.image,
                        validity: recon.validity,
                        depth,
                    },
                    claimed,
                });
                object_poses.push((id, bg_pose.compose(&q_inv)));
                object_reports.push(ObjectPoseReport {
                    instance_id: id,
                    estimate: Some(m.estimate),
                    error: None,
                });
            }
            Err(e) => {
                log::warn!("frames {source}->{target}: object {id} falls back to the background motion: {e}");
                object_reports.push(ObjectPoseReport {
                    instance_id: id,
                    estimate: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let composite = composite_reconstruction(&bg, &objects)?;

    // Valid mask: warp validity where the reconstructed instance label
    // agrees with the target label.
    let src_labels = label_map_without(&src.masks, &removed);
    let tgt_labels = label_map_without(&tgt.masks, &removed);
    let sampled_labels = inverse_sample_labels(&src_labels, w, h, &tgt.depth, &bg_pose, k);
    let weights: Vec<f32> = (0..w * h)
        .map(|p| {
            let label = composite.owner[p].or(sampled_labels[p]);
            if label == Some(tgt_labels[p]) {
                composite.warp.validity.get(p)
            } else {
                0.0
            }
        })
        .collect();
    let valid = ValidityMask::new(w, h, weights)?;

    let photometric = photometric_loss(&tgt.image, &composite.warp.image, &valid, cfg.weights.alpha)?;

    let bg_depth = inverse_warp_depth(&src.depth, &tgt.depth, &bg_pose, k)?;
    let obj_depth: Vec<(InstanceId, _)> = object_poses
        .iter()
        .map(|(id, pose)| inverse_warp_depth(&src.depth, &tgt.depth, pose, k).map(|d| (*id, d)))
        .collect::<Result<_>>()?;
    let mut computed = bg_depth.computed.data().to_vec();
    let mut sampled = bg_depth.sampled.data().to_vec();
    let mut geo_mask = vec![false; w * h];
    for p in 0..w * h {
        let dw = match composite.owner[p] {
            Some(id) => &obj_depth.iter().find(|(o, _)| *o == id).expect("object depth").1,
            None => &bg_depth,
        };
        computed[p] = dw.computed.data()[p];
        sampled[p] = dw.sampled.data()[p];
        geo_mask[p] = dw.valid.at(p) && valid.get(p) > 0.0;
    }
    let geometric = geometric_loss(
        &Raster::new(w, h, 1, computed)?,
        &Raster::new(w, h, 1, sampled)?,
        &BinaryMask::new(w, h, geo_mask)?,
    )?;

    let smoothness = smoothness_loss(&tgt.depth, &tgt.image)?;
    let (tgt_instances, _) = filter_small_objects(&tgt.masks, cfg.min_object_frac)?;
    let height = height_loss(&tgt.depth, &tgt_instances, &HeightPriors::new(cfg.height_prior)?, k.fy)?;
    let losses = LossReport::new(photometric, geometric, smoothness, height, &cfg.weights)?;

    Ok(DirectionResult {
        report: DirectionReport {
            source,
            target,
            initial_ego: initial,
            updated_ego: updated,
            classification,
            objects: object_reports,
            losses,
        },
        reconstruction: composite,
        valid,
    })
}

/// Frame pairs `(t, t + stride)` of an `n`-frame sequence.
pub fn frame_pairs(n: usize, stride: usize) -> Vec<(usize, usize)> {
    (0..n.saturating_sub(stride)).map(|t| (t, t + stride)).collect()
}

pub fn process_pair(seq: &Sequence, (s, t): (usize, usize), cfg: &PipelineConfig) -> Result<PairReport> {
    let k = &seq.intrinsics;
    let forward = process_direction(&seq.frames[s], &seq.frames[t], (s, t), k, cfg)?.report;
    let backward = if cfg.both_directions {
        Some(process_direction(&seq.frames[t], &seq.frames[s], (t, s), k, cfg)?.report)
    } else {
        None
    };
    let losses = match &backward {
        Some(b) => LossReport::mean(&[forward.losses, b.losses], &cfg.weights)?,
        None => forward.losses,
    };
    Ok(PairReport {
        source: s,
        target: t,
        forward,
        backward,
        losses,
    })
}

/// Depth metrics of every frame's depth against `gt`.
pub fn sequence_metrics(seq: &Sequence, gt: &[Raster], cfg: &MetricsConfig) -> Result<Vec<MetricsReport>> {
    if gt.len() != seq.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "{} ground-truth depth maps for {} frames",
            gt.len(),
            seq.frames.len()
        )));
    }
    seq.frames
        .iter()
        .zip(gt)
        .map(|(f, g)| {
            let (w, h) = g.dims();
            let valid = BinaryMask::from_fn(w, h, |x, y| is_valid_depth(g.get(x, y, 0)));
            depth_metrics(&f.depth, g, &valid, cfg)
        })
        .collect()
}

pub fn run_pipeline(seq: &Sequence, gt_depth: Option<&[Raster]>, cfg: &PipelineConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let pairs = frame_pairs(seq.frames.len(), cfg.temporal_stride);
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need at least {} frames for stride {}, got {}",
            cfg.temporal_stride + 1,
            cfg.temporal_stride,
            seq.frames.len()
        )));
    }
    let pairs: Vec<PairReport> = pairs
        .par_iter()
        .map(|&p| process_pair(seq, p, cfg))
        .collect::<Result<_>>()?;
    let losses = LossReport::mean(&pairs.iter().map(|p| p.losses).collect::<Vec<_>>(), &cfg.weights)?;
    let frame_metrics = match gt_depth {
        Some(gt) => sequence_metrics(seq, gt, &cfg.metrics)?,
        None => Vec::new(),
    };
    Ok(PipelineReport {
        config: cfg.clone(),
        n_frames: seq.frames.len(),
        pairs,
        losses,
        metrics: MetricsReport::mean(&frame_metrics),
        frame_metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub theta: f64,
    pub losses: LossReport,
    pub n_dynamic: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// θ with the lowest total loss (first on ties).
    pub best_theta: f64,
}

/// Mean losses over several sequences at each θ.
pub fn sweep_theta(sequences: &[Sequence], thetas: &[f64], cfg: &PipelineConfig) -> Result<SweepReport> {
    if thetas.is_empty() || sequences.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one theta and one sequence".into()));
    }
    let mut entries = Vec::with_capacity(thetas.len());
    for &theta in thetas {
        let c = PipelineConfig { theta, ..cfg.clone() };
        let reports: Vec<PipelineReport> = sequences
            .iter()
            .map(|s| run_pipeline(s, None, &c))
            .collect::<Result<_>>()?;
        let losses = LossReport::mean(&reports.iter().map(|r| r.losses).collect::<Vec<_>>(), &cfg.weights)?;
        let n_dynamic = reports
            .iter()
            .flat_map(|r| &r.pairs)
            .map(|p| p.forward.classification.dynamic_ids.len())
            .sum();
        entries.push(SweepEntry { theta, losses, n_dynamic });
    }
    let best_theta = entries
        .iter()
        .min_by(|a, b| a.losses.total.total_cmp(&b.losses.total))
        .map(|e| e.theta)
        .expect("nonempty");
    Ok(SweepReport { entries, best_theta })
}

/// Converts rendered frames into an ingestible sequence.
pub fn sequence_from_bundles(k: CameraIntrinsics, bundles: &[crate::synth::FrameBundle]) -> Result<Sequence> {
    let frames = bundles
        .iter()
        .map(|b| Frame::new(b.image.clone(), b.depth.clone(), b.masks.clone()))
        .collect::<Result<_>>()?;
    Sequence::new(k, frames, Some(bundles.iter().map(|b| b.cam_to_world).collect()))
}

/// Relative pose `P_{i→j}` from camera-to-world poses.
pub fn relative_pose(cam_to_world: &[RigidPose], i: usize, j: usize) -> RigidPose {
    cam_to_world[j].inverse().compose(&cam_to_world[i])
}
