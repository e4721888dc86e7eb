//! Direct photometric pose estimation.
//!
//! The residual of a target pixel `p` with depth `d` is
//! `I_src(π(P·d·K⁻¹p)) − I_tgt(p)`, where `P` maps target-camera points into
//! the source camera. Poses are updated on the left, `P ← exp(δ)·P`, with a
//! damped Gauss–Newton (Levenberg–Marquardt) step on a Huber-weighted mean
//! cost.

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::mask::BinaryMask;
use crate::raster::{is_valid_depth, Raster, ValidityMask};
use crate::warp::{bilinear_taps, forward_warp_mask, forward_warp_masked, WarpResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSolverConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the norm of the tangent-space step.
    pub step_tolerance: f64,
    pub damping_init: f64,
    /// Huber threshold in intensity units.
    pub huber_delta: f64,
}

impl Default for PoseSolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-7,
            damping_init: 1e-4,
            huber_delta: 0.1,
        }
    }
}

impl PoseSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be at least 1".into()));
        }
        for (name, v) in [
            ("step_tolerance", self.step_tolerance),
            ("damping_init", self.damping_init),
            ("huber_delta", self.huber_delta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub pose: RigidPose,
    /// Huber-robustified mean residual at `pose`.
    pub final_residual: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// The image carries no usable gradient on the region; `pose` is the
    /// initial guess.
    pub degenerate_texture: bool,
    pub valid_pixels: usize,
}

/// Intensity lookup with spatial gradient, used by the photometric residual.
pub trait ImageSampler: Sync {
    /// Value and `(∂/∂u, ∂/∂v)` at a continuous pixel location, or `None`
    /// when the location cannot be sampled.
    fn sample(&self, u: f64, v: f64) -> Option<(f64, f64, f64)>;
}

/// Bilinear sampler over a single-channel raster. Gradients are central
/// differences of the raster (one-sided at the border), bilinearly
/// interpolated.
pub struct RasterSampler {
    width: usize,
    height: usize,
    value: Vec<f64>,
    grad_u: Vec<f64>,
    grad_v: Vec<f64>,
    valid: Option<Vec<bool>>,
}

impl RasterSampler {
    pub fn new(image: &Raster) -> Self {
        Self::build(image, None)
    }

    /// Sampler that refuses locations touching a tap with zero validity.
    pub fn with_validity(image: &Raster, validity: &ValidityMask) -> Result<Self> {
        check_dims(image.dims(), validity.dims())?;
        Ok(Self::build(image, Some(validity)))
    }

    fn build(image: &Raster, validity: Option<&ValidityMask>) -> Self {
        let gray = image.intensity();
        let (w, h) = gray.dims();
        let value: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
        let at = |x: usize, y: usize| value[y * w + x];
        let mut grad_u = vec![0.0; w * h];
        let mut grad_v = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                grad_u[y * w + x] = if w == 1 {
                    0.0
                } else if x == 0 {
                    at(1, y) - at(0, y)
                } else if x == w - 1 {
                    at(x, y) - at(x - 1, y)
                } else {
                    0.5 * (at(x + 1, y) - at(x - 1, y))
                };
                grad_v[y * w + x] = if h == 1 {
                    0.0
                } else if y == 0 {
                    at(x, 1) - at(x, 0)
                } else if y == h - 1 {
                    at(x, y) - at(x, y - 1)
                } else {
                    0.5 * (at(x, y + 1) - at(x, y - 1))
                };
            }
        }
        Self {
            width: w,
            height: h,
            value,
            grad_u,
            grad_v,
            valid: validity.map(|v| v.weights().iter().map(|&w| w > 0.0).collect()),
        }
    }
}

impl ImageSampler for RasterSampler {
    fn sample(&self, u: f64, v: f64) -> Option<(f64, f64, f64)> {
        let taps = bilinear_taps(self.width, self.height, u, v)?;
        let (mut val, mut gu, mut gv) = (0.0, 0.0, 0.0);
        for (&i, &w) in taps.idx.iter().zip(&taps.w) {
            if w == 0.0 {
                continue;
            }
            if let Some(valid) = &self.valid {
                if !valid[i] {
                    return None;
                }
            }
            val += w * self.value[i];
            gu += w * self.grad_u[i];
            gv += w * self.grad_v[i];
        }
        Some((val, gu, gv))
    }
}

/// Target points and intensities for one alignment problem.
pub struct PhotometricProblem<'a, S: ImageSampler> {
    sampler: &'a S,
    k: CameraIntrinsics,
    points: Vec<(Vector3<f64>, f64)>,
    pivot: Vector3<f64>,
}

/// Residual and its derivative with respect to a left perturbation `[ρ; ω]`
/// whose rotation acts about the problem's pivot.
pub type ResidualRow = (f64, [f64; 6]);

const CHUNK: usize = 512;

impl<'a, S: ImageSampler> PhotometricProblem<'a, S> {
    /// Target points `(X, I_tgt)` already lifted to 3D in the target camera.
    pub fn new(sampler: &'a S, k: CameraIntrinsics, points: Vec<(Vector3<f64>, f64)>) -> Self {
        Self {
            sampler,
            k,
            points,
            pivot: Vector3::zeros(),
        }
    }

    /// Takes update rotations about `pivot` (source-camera coordinates)
    /// instead of the camera centre. For a small region far from the camera
    /// this separates its translation from rotation. Default: the origin.
    pub fn with_pivot(mut self, pivot: Vector3<f64>) -> Self {
        self.pivot = pivot;
        self
    }

    /// `T(c)·exp(δ)·T(−c)·pose` with `c` the pivot.
    pub fn perturb(&self, delta: &Vector6<f64>, pose: &RigidPose) -> RigidPose {
        let c = self.pivot;
        RigidPose::from_translation(c)
            .compose(&RigidPose::exp(delta))
            .compose(&RigidPose::from_translation(-c))
            .compose(pose)
    }

    /// Builds the problem from a target image, depth and region mask.
    pub fn from_target(
        sampler: &'a S,
        k: CameraIntrinsics,
        tgt: &Raster,
        tgt_depth: &Raster,
        region: &BinaryMask,
    ) -> Result<Self> {
        tgt_depth.expect_single_channel("target depth")?;
        check_dims(tgt.dims(), tgt_depth.dims())?;
        check_dims(tgt.dims(), region.dims())?;
        if region.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let gray = tgt.intensity();
        let w = tgt.width();
        let points = region
            .indices()
            .filter(|&i| is_valid_depth(tgt_depth.data()[i]))
            .map(|i| {
                let x = k.backproject((i % w) as f64, (i / w) as f64, tgt_depth.data()[i] as f64);
                (x, gray.data()[i] as f64)
            })
            .collect();
        Ok(Self::new(sampler, k, points))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Residuals at `pose`; `None` where the point cannot be sampled.
    pub fn residuals(&self, pose: &RigidPose) -> Vec<Option<f64>> {
        self.points
            .par_iter()
            .map(|(x, i_tgt)| {
                let y = pose.transform(x);
                if !(y.z > 0.0) {
                    return None;
                }
                let (u, v) = self.k.project(&y);
                self.sampler.sample(u, v).map(|(val, _, _)| val - i_tgt)
            })
            .collect()
    }

    /// Residuals with analytic Jacobian rows at `pose`.
    pub fn jacobian(&self, pose: &RigidPose) -> Vec<Option<ResidualRow>> {
        self.points
            .par_iter()
            .map(|(x, i_tgt)| self.row(pose, x, *i_tgt))
            .collect()
    }

    fn row(&self, pose: &RigidPose, x: &Vector3<f64>, i_tgt: f64) -> Option<ResidualRow> {
        let y = pose.transform(x);
        if !(y.z > 0.0) {
            return None;
        }
        let (u, v) = self.k.project(&y);
        let (val, gu, gv) = self.sampler.sample(u, v)?;
        let iz = 1.0 / y.z;
        // ∂r/∂Y = [gu gv]·∂π/∂Y
        let a = gu * self.k.fx * iz;
        let b = gv * self.k.fy * iz;
        let c = -(a * y.x + b * y.y) * iz;
        // ∂Y/∂δ = [I | −[Y − pivot]×]; row = ∂r/∂Y · ∂Y/∂δ
        let p = y - self.pivot;
        let j = [
            a,
            b,
            c,
            b * (-p.z) + c * p.y,
            a * p.z + c * (-p.x),
            a * (-p.y) + b * p.x,
        ];
        Some((val - i_tgt, j))
    }

    /// Huber mean cost and number of valid residuals.
    pub fn cost(&self, pose: &RigidPose, delta: f64) -> (f64, usize) {
        let r = self.residuals(pose);
        let mut sum = 0.0;
        let mut n = 0;
        for v in r.into_iter().flatten() {
            sum += huber(v, delta);
            n += 1;
        }
        if n == 0 {
            (f64::INFINITY, 0)
        } else {
            (sum / n as f64, n)
        }
    }

    /// IRLS normal equations `(JᵀWJ, JᵀWr)` normalised by the valid count,
    /// with the Huber mean cost. Accumulation order is fixed, so results do
    /// not depend on the number of worker threads.
    fn linearize(&self, pose: &RigidPose, delta: f64) -> Linearization {
        let partial: Vec<Linearization> = self
            .points
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut lin = Linearization::default();
                for (x, i_tgt) in chunk {
                    let Some((r, j)) = self.row(pose, x, *i_tgt) else {
                        continue;
                    };
                    let jv = Vector6::from_column_slice(&j);
                    let w = if r.abs() <= delta { 1.0 } else { delta / r.abs() };
                    lin.h += jv * jv.transpose() * w;
                    lin.g += jv * (w * r);
                    lin.cost += huber(r, delta);
                    lin.n += 1;
                }
                lin
            })
            .collect();
        let mut total = Linearization::default();
        for p in partial {
            total.h += p.h;
            total.g += p.g;
            total.cost += p.cost;
            total.n += p.n;
        }
        if total.n > 0 {
            let n = total.n as f64;
            total.h /= n;
            total.g /= n;
            total.cost /= n;
        }
        total
    }

    /// Damped Gauss–Newton from `init`.
    pub fn solve(&self, init: &RigidPose, cfg: &PoseSolverConfig) -> Result<PoseEstimate> {
        cfg.validate()?;
        if self.points.is_empty() {
            return Err(Error::EmptyRegion);
        }
        let mut pose = *init;
        let mut lin = self.linearize(&pose, cfg.huber_delta);
        if lin.n == 0 {
            return Err(Error::AllInvalid);
        }
        let max_diag = (0..6).map(|i| lin.h[(i, i)]).fold(0.0, f64::max);
        if !(max_diag > DEGENERATE_GRADIENT) {
            return Ok(PoseEstimate {
                pose,
                final_residual: lin.cost,
                iterations_used: 0,
                converged: false,
                degenerate_texture: true,
                valid_pixels: lin.n,
            });
        }

        let mut lambda = cfg.damping_init;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < cfg.max_iterations {
            iterations += 1;
            let floor = 1e-9 * (0..6).map(|i| lin.h[(i, i)]).fold(0.0, f64::max);
            let mut a = lin.h;
            for i in 0..6 {
                a[(i, i)] += lambda * lin.h[(i, i)].max(floor);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-lin.g))) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < cfg.step_tolerance {
                converged = true;
                break;
            }
            let candidate = self.perturb(&step, &pose);
            let (cost, n) = self.cost(&candidate, cfg.huber_delta);
            if n > 0 && cost <= lin.cost {
                pose = candidate;
                lin = self.linearize(&pose, cfg.huber_delta);
                lambda = (lambda * 0.3).max(1e-12);
            } else {
                lambda *= 8.0;
                if lambda > 1e12 {
                    break;
                }
            }
        }
        Ok(PoseEstimate {
            pose,
            final_residual: lin.cost,
            iterations_used: iterations,
            converged,
            degenerate_texture: false,
            valid_pixels: lin.n,
        })
    }
}

/// Mean squared gradient (in intensity per unit motion) below which the
/// region is treated as textureless.
const DEGENERATE_GRADIENT: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct Linearization {
    h: Matrix6<f64>,
    g: Vector6<f64>,
    cost: f64,
    n: usize,
}

impl Default for Linearization {
    fn default() -> Self {
        Self {
            h: Matrix6::zeros(),
            g: Vector6::zeros(),
            cost: 0.0,
            n: 0,
        }
    }
}

#[inline]
pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Estimates the pose mapping target-camera points into the source camera,
/// aligning `src` to `tgt` on `region` (channel-mean intensities).
#[allow(clippy::too_many_arguments)]
pub fn estimate_pose(
    src: &Raster,
    tgt: &Raster,
    tgt_depth: &Raster,
    region: &BinaryMask,
    k: &CameraIntrinsics,
    init: &RigidPose,
    cfg: &PoseSolverConfig,
) -> Result<PoseEstimate> {
    src.same_shape(tgt)?;
    let sampler = RasterSampler::new(src);
    let problem = PhotometricProblem::from_target(&sampler, *k, tgt, tgt_depth, region)?;
    problem.solve(init, cfg)
}

/// As [`estimate_pose`], but bilinear taps may only touch source pixels in
/// `src_region`, so that occluders in the source never enter the residual.
#[allow(clippy::too_many_arguments)]
pub fn estimate_pose_masked(
    src: &Raster,
    src_region: &BinaryMask,
    tgt: &Raster,
    tgt_depth: &Raster,
    region: &BinaryMask,
    k: &CameraIntrinsics,
    init: &RigidPose,
    cfg: &PoseSolverConfig,
) -> Result<PoseEstimate> {
    src.same_shape(tgt)?;
    let validity = ValidityMask::from_mask(src_region);
    let sampler = RasterSampler::with_validity(src, &validity)?;
    let problem = PhotometricProblem::from_target(&sampler, *k, tgt, tgt_depth, region)?;
    problem.solve(init, cfg)
}

/// Result of aligning one object after cancelling the ego-motion.
#[derive(Clone, Debug)]
pub struct ObjectMotion {
    /// Source object forward-warped with the ego-motion.
    pub forward: WarpResult,
    /// Target pixels hit by the forward warp.
    pub forward_region: BinaryMask,
    /// Residual motion: maps ego-predicted object points onto the target.
    pub estimate: PoseEstimate,
}

/// Residual rigid motion of one object: the object is forward-warped with
/// `ego` (source→target), then aligned against the masked target image.
/// Composing `ego` and then the returned pose moves the object from the
/// source frame onto its target position.
#[allow(clippy::too_many_arguments)]
pub fn estimate_object_pose(
    src: &Raster,
    tgt: &Raster,
    src_depth: &Raster,
    obj_mask_t: &BinaryMask,
    obj_mask_tgt: &BinaryMask,
    ego: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &PoseSolverConfig,
) -> Result<PoseEstimate> {
    estimate_object_motion(src, tgt, src_depth, obj_mask_t, obj_mask_tgt, ego, k, cfg)
        .map(|m| m.estimate)
}

const MIN_INTERIOR_PIXELS: usize = 24;

#[allow(clippy::too_many_arguments)]
pub fn estimate_object_motion(
    src: &Raster,
    tgt: &Raster,
    src_depth: &Raster,
    obj_mask_t: &BinaryMask,
    obj_mask_tgt: &BinaryMask,
    ego: &RigidPose,
    k: &CameraIntrinsics,
    cfg: &PoseSolverConfig,
) -> Result<ObjectMotion> {
    src.same_shape(tgt)?;
    check_dims(src.dims(), obj_mask_t.dims())?;
    check_dims(src.dims(), obj_mask_tgt.dims())?;
    if obj_mask_t.is_empty() || obj_mask_tgt.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let warped_mask = forward_warp_mask(obj_mask_t, src_depth, ego, k)?;
    if warped_mask.intersect(obj_mask_tgt)?.is_empty() {
        return Err(Error::NoOverlap);
    }
    let forward = forward_warp_masked(src, src_depth, obj_mask_t, ego, k)?;
    let (w, h) = src.dims();
    let forward_region = BinaryMask::from_fn(w, h, |x, y| forward.validity.get(y * w + x) > 0.0);
    if forward_region.is_empty() {
        return Err(Error::EmptyRegion);
    }
    // Fit on the exact ego-transformed source points rather than the
    // splatted raster, whose cells are rounded to whole pixels. Boundary
    // pixels straddle the object edge; drop them when the object is large
    // enough to spare them.
    let interior = obj_mask_t.erode();
    let fit_mask = if interior.pixel_count() >= MIN_INTERIOR_PIXELS {
        &interior
    } else {
        obj_mask_t
    };
    let gray = src.intensity();
    let points: Vec<(Vector3<f64>, f64)> = fit_mask
        .indices()
        .filter(|&i| is_valid_depth(src_depth.data()[i]))
        .map(|i| {
            let x = k.backproject((i % w) as f64, (i / w) as f64, src_depth.data()[i] as f64);
            (ego.transform(&x), gray.data()[i] as f64)
        })
        .filter(|(y, _)| y.z > 0.0)
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyRegion);
    }

    // Pixels outside the target mask belong to other surfaces and are
    // excluded rather than zeroed.
    let sampler = RasterSampler::with_validity(tgt, &ValidityMask::from_mask(obj_mask_tgt))?;
    let problem = PhotometricProblem::new(&sampler, *k, points);

    // Start from the translation that aligns the mask centroids at the
    // object's mean depth.
    let (cu_f, cv_f) = forward_region.centroid().expect("nonempty");
    let (cu_t, cv_t) = obj_mask_tgt.centroid().expect("nonempty");
    let mean_z = forward_region
        .indices()
        .map(|i| forward.depth.data()[i] as f64)
        .sum::<f64>()
        / forward_region.pixel_count() as f64;
    let init = RigidPose::from_translation(Vector3::new(
        (cu_t - cu_f) * mean_z / k.fx,
        (cv_t - cv_f) * mean_z / k.fy,
        0.0,
    ));
    let centroid = k.backproject(cu_t, cv_t, mean_z);
    let estimate = problem.with_pivot(centroid).solve(&init, cfg)?;
    Ok(ObjectMotion {
        forward,
        forward_region,
        estimate,
    })
}

/// Pixel-wise product of an image with a binary mask.
pub fn mask_raster(image: &Raster, mask: &BinaryMask) -> Raster {
    let c = image.channels();
    let data = image
        .data()
        .chunks_exact(c)
        .zip(mask.data())
        .flat_map(|(px, &m)| px.iter().map(move |&v| if m { v } else { 0.0 }))
        .collect();
    Raster::new(image.width(), image.height(), c, data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(80.0, 80.0, 31.5, 23.5).unwrap()
    }

    fn smooth(w: usize, h: usize) -> Raster {
        Raster::from_fn(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            0.5 + 0.25 * (0.31 * x).sin() * (0.23 * y + 0.4).cos() + 0.15 * (0.17 * x - 0.29 * y).sin()
        })
    }

    #[test]
    fn identical_images_converge_immediately() {
        let img = smooth(64, 48);
        let d = Raster::filled(64, 48, 1, 4.0);
        let region = BinaryMask::ones(64, 48);
        let est = estimate_pose(&img, &img, &d, &region, &k(), &RigidPose::identity(), &Default::default()).unwrap();
        assert!(est.converged);
        assert!(est.iterations_used <= 1);
        assert!(est.pose.is_identity(1e-12));
        assert!(est.final_residual < 1e-12);
    }

    #[test]
    fn textureless_is_degenerate() {
        let img = Raster::filled(32, 24, 3, 0.5);
        let d = Raster::filled(32, 24, 1, 4.0);
        let est = estimate_pose(
            &img,
            &img,
            &d,
            &BinaryMask::ones(32, 24),
            &k(),
            &RigidPose::identity(),
            &Default::default(),
        )
        .unwrap();
        assert!(est.degenerate_texture);
        assert!(!est.converged);
        assert!(est.pose.is_identity(0.0));
    }

    #[test]
    fn empty_region_and_all_invalid() {
        let img = smooth(16, 12);
        let d = Raster::filled(16, 12, 1, 4.0);
        let cfg = PoseSolverConfig::default();
        let id = RigidPose::identity();
        assert!(matches!(
            estimate_pose(&img, &img, &d, &BinaryMask::zeros(16, 12), &k(), &id, &cfg),
            Err(Error::EmptyRegion)
        ));
        let far = RigidPose::from_translation(Vector3::new(100.0, 0.0, 0.0));
        assert!(matches!(
            estimate_pose(&img, &img, &d, &BinaryMask::ones(16, 12), &k(), &far, &cfg),
            Err(Error::AllInvalid)
        ));
    }

    #[test]
    fn exact_model_optimum_is_fixed_point() {
        // Target generated by the warp model itself, so the ground truth has
        // zero residual.
        let src = smooth(64, 48);
        let d = Raster::from_fn(64, 48, |x, y| 3.0 + 0.02 * x as f32 + 0.01 * y as f32);
        let gt = RigidPose::from_axis_angle(Vector3::new(0.002, -0.003, 0.001), Vector3::new(0.03, -0.01, 0.02));
        let warped = crate::warp::inverse_warp(&src, &d, &gt, &k()).unwrap();
        let (w, h) = (64, 48);
        let region = BinaryMask::from_fn(w, h, |x, y| warped.validity.get(y * w + x) == 1.0);
        let est = estimate_pose(&src, &warped.image, &d, &region, &k(), &gt, &Default::default()).unwrap();
        assert!(est.converged);
        assert_eq!(est.iterations_used, 1);
        assert_eq!(est.pose, gt);
    }

    #[test]
    fn recovers_model_generated_motion() {
        let src = smooth(64, 48);
        let d = Raster::from_fn(64, 48, |x, _| 3.0 + 0.03 * x as f32);
        let gt = RigidPose::from_axis_angle(Vector3::new(0.0, 0.004, 0.002), Vector3::new(0.05, 0.02, -0.03));
        let warped = crate::warp::inverse_warp(&src, &d, &gt, &k()).unwrap();
        let region = BinaryMask::from_fn(64, 48, |x, y| warped.validity.get(y * 64 + x) == 1.0);
        let est = estimate_pose(&src, &warped.image, &d, &region, &k(), &RigidPose::identity(), &Default::default()).unwrap();
        let err = est.pose.compose(&gt.inverse());
        assert!(err.translation().norm() < 1e-3, "{:?}", est);
        assert!(err.rotation_angle() < 1e-4);
    }

    #[test]
    fn huber_is_continuous() {
        let d = 0.1;
        assert!((huber(d, d) - huber(d + 1e-12, d)).abs() < 1e-12);
        assert_eq!(huber(-0.05, d), huber(0.05, d));
    }
}
