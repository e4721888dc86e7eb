//! Pinhole reprojection, inverse warping (bilinear sampling) and forward
//! warping (z-buffered splatting) of images, depth maps and masks.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{check_dims, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::mask::{BinaryMask, InstanceId};
use crate::raster::{is_valid_depth, Raster, ValidityMask};

/// Where one source pixel lands after reprojection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Depth of the transformed point in the destination camera.
    pub z: f64,
    pub valid: bool,
}

impl Projection {
    const INVALID: Projection = Projection {
        u: f64::NAN,
        v: f64::NAN,
        z: f64::NAN,
        valid: false,
    };
}

/// Image, validity and per-pixel depth of a warped view.
///
/// For inverse warps `depth` is the depth of each target pixel's 3D point
/// in the source camera; for forward warps it is the z-buffer winner's depth
/// in the target camera. Pixels with zero validity carry zero image and depth.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub image: Raster,
    pub validity: ValidityMask,
    pub depth: Raster,
}

/// Back-projects every pixel of `depth`, applies `pose` and re-projects through `k`.
/// Pixels with invalid depth or a transformed depth `z ≤ 0` are flagged invalid.
pub fn project_pixels(depth: &Raster, k: &CameraIntrinsics, pose: &RigidPose) -> Vec<Projection> {
    let w = depth.width();
    (0..depth.len_pixels())
        .into_par_iter()
        .map(|i| {
            let d = depth.data()[i * depth.channels()];
            if !is_valid_depth(d) {
                return Projection::INVALID;
            }
            let p = pose.transform(&k.backproject((i % w) as f64, (i / w) as f64, d as f64));
            if !(p.z > 0.0) {
                return Projection::INVALID;
            }
            let (u, v) = k.project(&p);
            Projection {
                u,
                v,
                z: p.z,
                valid: u.is_finite() && v.is_finite(),
            }
        })
        .collect()
}

/// Bilinear taps of a continuous location. Locations within `SNAP` of the
/// last row/column are snapped onto it so integer positions stay valid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

const SNAP: f64 = 1e-9;

/// Returns `None` if any tap with non-zero weight falls outside the grid.
pub(crate) fn bilinear_taps(width: usize, height: usize, u: f64, v: f64) -> Option<Taps> {
    let axis = |x: f64, n: usize| -> Option<(usize, usize, f64)> {
        let max = (n - 1) as f64;
        let x = if x < 0.0 && x > -SNAP {
            0.0
        } else if x > max && x < max + SNAP {
            max
        } else {
            x
        };
        if !(x >= 0.0 && x <= max) {
            return None;
        }
        if n == 1 {
            return Some((0, 0, 0.0));
        }
        let i0 = (x.floor() as usize).min(n - 2);
        Some((i0, i0 + 1, x - i0 as f64))
    };
    let (x0, x1, fx) = axis(u, width)?;
    let (y0, y1, fy) = axis(v, height)?;
    Some(Taps {
        idx: [
            y0 * width + x0,
            y0 * width + x1,
            y1 * width + x0,
            y1 * width + x1,
        ],
        w: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
    })
}

/// Synthesises the target view by sampling `src` at the locations where the
/// target pixels (lifted with `tgt_depth`) land under `pose_tgt_to_src`.
pub fn inverse_warp(
    src: &Raster,
    tgt_depth: &Raster,
    pose_tgt_to_src: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    inverse_warp_weighted(src, None, tgt_depth, pose_tgt_to_src, k)
}

/// Inverse warp of a source with its own validity weights (e.g. a forward
/// warped image with holes). Each output pixel is the validity-weighted
/// bilinear average of its taps; its validity is the bilinear average of the
/// tap validities.
pub fn inverse_warp_weighted(
    src: &Raster,
    src_validity: Option<&ValidityMask>,
    tgt_depth: &Raster,
    pose_tgt_to_src: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    tgt_depth.expect_single_channel("target depth")?;
    check_dims(src.dims(), tgt_depth.dims())?;
    if let Some(v) = src_validity {
        check_dims(src.dims(), v.dims())?;
    }
    let (w, h, c) = (src.width(), src.height(), src.channels());
    let proj = project_pixels(tgt_depth, k, pose_tgt_to_src);

    let samples: Vec<(Vec<f32>, f32, f32)> = proj
        .par_iter()
        .map(|p| {
            let zero = (vec![0.0; c], 0.0, 0.0);
            if !p.valid {
                return zero;
            }
            let Some(taps) = bilinear_taps(w, h, p.u, p.v) else {
                return zero;
            };
            let mut acc = vec![0.0f64; c];
            let mut wsum = 0.0f64;
            for (&i, &tw) in taps.idx.iter().zip(&taps.w) {
                let sv = src_validity.map_or(1.0, |v| v.get(i) as f64);
                let wt = tw * sv;
                if wt == 0.0 {
                    continue;
                }
                wsum += wt;
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a += wt * src.pixel(i)[ch] as f64;
                }
            }
            if wsum <= 0.0 {
                return zero;
            }
            let px = acc.iter().map(|a| (a / wsum) as f32).collect();
            (px, wsum.min(1.0) as f32, p.z as f32)
        })
        .collect();

    let mut image = Vec::with_capacity(w * h * c);
    let mut validity = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    for (px, v, z) in samples {
        image.extend(px);
        validity.push(v);
        depth.push(z);
    }
    Ok(WarpResult {
        image: Raster::new(w, h, c, image)?,
        validity: ValidityMask::new(w, h, validity)?,
        depth: Raster::new(w, h, 1, depth)?,
    })
}

/// Depth pair needed by the geometric consistency term: for each target
/// pixel, the depth of its 3D point in the source camera (`computed`) and
/// the source depth map bilinearly sampled where that point projects
/// (`sampled`). `valid` marks pixels where both are defined.
#[derive(Clone, Debug)]
pub struct DepthWarp {
    pub computed: Raster,
    pub sampled: Raster,
    pub valid: BinaryMask,
}

pub fn inverse_warp_depth(
    src_depth: &Raster,
    tgt_depth: &Raster,
    pose_tgt_to_src: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<DepthWarp> {
    src_depth.expect_single_channel("source depth")?;
    let src_valid = ValidityMask::new(
        src_depth.width(),
        src_depth.height(),
        src_depth
            .data()
            .iter()
            .map(|&d| if is_valid_depth(d) { 1.0 } else { 0.0 })
            .collect(),
    )?;
    let warped = inverse_warp_weighted(src_depth, Some(&src_valid), tgt_depth, pose_tgt_to_src, k)?;
    let (w, h) = src_depth.dims();
    // All four taps must carry valid depth.
    let valid = BinaryMask::from_fn(w, h, |x, y| warped.validity.get(y * w + x) >= 1.0 - 1e-6);
    let zero_invalid = |r: &Raster| {
        let data = r
            .data()
            .iter()
            .zip(valid.data())
            .map(|(&d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Raster::new(w, h, 1, data)
    };
    Ok(DepthWarp {
        computed: zero_invalid(&warped.depth)?,
        sampled: zero_invalid(&warped.image)?,
        valid,
    })
}

fn nearest_cell(width: usize, height: usize, u: f64, v: f64) -> Option<usize> {
    let (x, y) = (u.round(), v.round());
    if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
        return None;
    }
    Some(y as usize * width + x as usize)
}

/// Scatters every valid source pixel to its nearest target cell; collisions
/// keep the smallest transformed depth, ties keep the lower source index.
/// Unhit target cells have validity 0.
pub fn forward_warp(
    src: &Raster,
    src_depth: &Raster,
    pose_src_to_tgt: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    forward_warp_impl(src, src_depth, None, pose_src_to_tgt, k)
}

/// [`forward_warp`] restricted to the pixels set in `mask`.
pub fn forward_warp_masked(
    src: &Raster,
    src_depth: &Raster,
    mask: &BinaryMask,
    pose_src_to_tgt: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    check_dims(src.dims(), mask.dims())?;
    forward_warp_impl(src, src_depth, Some(mask), pose_src_to_tgt, k)
}

fn forward_warp_impl(
    src: &Raster,
    src_depth: &Raster,
    mask: Option<&BinaryMask>,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    src_depth.expect_single_channel("source depth")?;
    check_dims(src.dims(), src_depth.dims())?;
    let (w, h, c) = (src.width(), src.height(), src.channels());
    let proj = project_pixels(src_depth, k, pose);

    let mut winner: Vec<Option<(f64, usize)>> = vec![None; w * h];
    for (i, p) in proj.iter().enumerate() {
        if !p.valid || mask.is_some_and(|m| !m.at(i)) {
            continue;
        }
        let Some(cell) = nearest_cell(w, h, p.u, p.v) else {
            continue;
        };
        match winner[cell] {
            Some((z, _)) if z <= p.z => {}
            _ => winner[cell] = Some((p.z, i)),
        }
    }

    let mut image = vec![0.0f32; w * h * c];
    let mut validity = vec![0.0f32; w * h];
    let mut depth = vec![0.0f32; w * h];
    for (cell, win) in winner.iter().enumerate() {
        if let Some((z, i)) = *win {
            image[cell * c..(cell + 1) * c].copy_from_slice(src.pixel(i));
            validity[cell] = 1.0;
            depth[cell] = z as f32;
        }
    }
    Ok(WarpResult {
        image: Raster::new(w, h, c, image)?,
        validity: ValidityMask::new(w, h, validity)?,
        depth: Raster::new(w, h, 1, depth)?,
    })
}

/// Minimum bilinear weight for a mask splat to mark a cell. Keeps exactly
/// integer landings from bleeding into neighbours.
const MASK_SPLAT_EPS: f64 = 1e-6;

/// Forward-warps a binary mask: each set source pixel marks every target
/// cell among its four surrounding integer cells that receives a positive
/// bilinear weight.
pub fn forward_warp_mask(
    mask: &BinaryMask,
    depth: &Raster,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> Result<BinaryMask> {
    depth.expect_single_channel("depth")?;
    check_dims(mask.dims(), depth.dims())?;
    let (w, h) = mask.dims();
    let mut out = BinaryMask::zeros(w, h);
    let idx: Vec<usize> = mask.indices().collect();
    if idx.is_empty() {
        return Ok(out);
    }
    for i in idx {
        let d = depth.data()[i];
        if !is_valid_depth(d) {
            continue;
        }
        let p = pose.transform(&k.backproject((i % w) as f64, (i / w) as f64, d as f64));
        if !(p.z > 0.0) {
            continue;
        }
        let (u, v) = k.project(&p);
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
                if wx * wy <= MASK_SPLAT_EPS {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
                    out.set(x as usize, y as usize, true);
                }
            }
        }
    }
    Ok(out)
}

/// Label of the nearest source pixel for each target pixel under an inverse
/// warp, `None` where the projection is invalid or out of bounds.
pub fn inverse_sample_labels(
    labels: &[InstanceId],
    width: usize,
    height: usize,
    tgt_depth: &Raster,
    pose_tgt_to_src: &RigidPose,
    k: &CameraIntrinsics,
) -> Vec<Option<InstanceId>> {
    project_pixels(tgt_depth, k, pose_tgt_to_src)
        .iter()
        .map(|p| {
            if !p.valid {
                return None;
            }
            nearest_cell(width, height, p.u, p.v).map(|c| labels[c])
        })
        .collect()
}

/// Point of pixel `(u, v)` at `depth` moved by `pose`; convenience for tests
/// and callers that need single-point reprojection.
pub fn reproject_point(
    k: &CameraIntrinsics,
    pose: &RigidPose,
    u: f64,
    v: f64,
    depth: f64,
) -> Option<(f64, f64, f64)> {
    let p: Vector3<f64> = pose.transform(&k.backproject(u, v, depth));
    if !(p.z > 0.0) {
        return None;
    }
    let (pu, pv) = k.project(&p);
    Some((pu, pv, p.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 15.5, 11.5).unwrap()
    }

    fn texture(w: usize, h: usize) -> Raster {
        Raster::from_fn_rgb(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            [
                0.5 + 0.4 * (0.3 * x).sin() * (0.2 * y).cos(),
                0.5 + 0.3 * (0.17 * x + 0.11 * y).sin(),
                (x + 2.0 * y) / 100.0,
            ]
        })
    }

    #[test]
    fn identity_projection() {
        let d = Raster::from_fn(8, 6, |x, y| 1.0 + (x + y) as f32 * 0.25);
        let proj = project_pixels(&d, &k(), &RigidPose::identity());
        for (i, p) in proj.iter().enumerate() {
            assert!(p.valid);
            assert!((p.u - (i % 8) as f64).abs() < 1e-9);
            assert!((p.v - (i / 8) as f64).abs() < 1e-9);
            assert!((p.z - d.data()[i] as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn x_translation_closed_form() {
        let z = 4.0;
        let tx = 0.07;
        let d = Raster::filled(10, 8, 1, z as f32);
        let pose = RigidPose::from_translation(Vector3::new(tx, 0.0, 0.0));
        for (i, p) in project_pixels(&d, &k(), &pose).iter().enumerate() {
            assert!((p.u - ((i % 10) as f64 + 100.0 * tx / z)).abs() < 1e-9);
            assert!((p.v - (i / 10) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn behind_camera_is_invalid() {
        let d = Raster::filled(4, 4, 1, 1.0);
        let pose = RigidPose::from_translation(Vector3::new(0.0, 0.0, -2.0));
        assert!(project_pixels(&d, &k(), &pose).iter().all(|p| !p.valid));
        let d = Raster::new(2, 1, 1, vec![0.0, -1.0]).unwrap();
        assert!(project_pixels(&d, &k(), &RigidPose::identity())
            .iter()
            .all(|p| !p.valid));
    }

    #[test]
    fn inverse_identity_reproduces_source() {
        let src = texture(32, 24);
        let d = Raster::from_fn(32, 24, |x, _| 2.0 + x as f32 * 0.1);
        let out = inverse_warp(&src, &d, &RigidPose::identity(), &k()).unwrap();
        let mut n_valid = 0;
        for i in 0..src.len_pixels() {
            if out.validity.get(i) == 1.0 {
                n_valid += 1;
                for c in 0..3 {
                    assert!((out.image.pixel(i)[c] - src.pixel(i)[c]).abs() < 1e-5);
                }
            }
        }
        // Interior is always valid.
        assert!(n_valid >= 30 * 22);
    }

    #[test]
    fn inverse_constant_image_stays_constant() {
        let src = Raster::filled(20, 16, 3, 0.37);
        let d = Raster::filled(20, 16, 1, 3.0);
        let pose = RigidPose::from_axis_angle(Vector3::new(0.01, -0.02, 0.005), Vector3::new(0.05, 0.02, 0.1));
        let out = inverse_warp(&src, &d, &pose, &k()).unwrap();
        for i in 0..src.len_pixels() {
            if out.validity.get(i) > 0.0 {
                assert!((out.image.pixel(i)[0] - 0.37).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inverse_one_pixel_shift() {
        // Target pixel u samples source at u + fx·tx/Z = u + 1.
        let z = 5.0f32;
        let src = texture(16, 12);
        let d = Raster::filled(16, 12, 1, z);
        let pose = RigidPose::from_translation(Vector3::new(z as f64 / 100.0, 0.0, 0.0));
        let out = inverse_warp(&src, &d, &pose, &k()).unwrap();
        for y in 0..12 {
            for x in 0..16 {
                let i = y * 16 + x;
                if x + 1 < 16 {
                    assert_eq!(out.validity.get(i), 1.0);
                    for c in 0..3 {
                        assert!((out.image.get(x, y, c) - src.get(x + 1, y, c)).abs() < 1e-5);
                    }
                } else {
                    assert_eq!(out.validity.get(i), 0.0);
                }
            }
        }
    }

    #[test]
    fn inverse_shape_mismatch() {
        let src = Raster::filled(4, 4, 1, 0.0);
        let d = Raster::filled(4, 5, 1, 1.0);
        assert!(matches!(
            inverse_warp(&src, &d, &RigidPose::identity(), &k()),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn validity_matches_brute_force() {
        let src = texture(24, 18);
        let d = Raster::from_fn(24, 18, |x, y| if (x * 7 + y) % 11 == 0 { 0.0 } else { 3.0 + 0.05 * y as f32 });
        let pose = RigidPose::from_axis_angle(Vector3::new(0.0, 0.03, 0.01), Vector3::new(0.2, -0.05, 0.1));
        let out = inverse_warp(&src, &d, &pose, &k()).unwrap();
        for y in 0..18 {
            for x in 0..24 {
                let depth = d.get(x, y, 0) as f64;
                let expect_valid = depth > 0.0
                    && reproject_point(&k(), &pose, x as f64, y as f64, depth)
                        .is_some_and(|(u, v, _)| u >= 0.0 && v >= 0.0 && u <= 23.0 && v <= 17.0);
                assert_eq!(out.validity.get(y * 24 + x) > 0.0, expect_valid, "pixel {x},{y}");
            }
        }
    }

    #[test]
    fn forward_identity() {
        let src = texture(12, 9);
        let d = Raster::filled(12, 9, 1, 2.0);
        let out = forward_warp(&src, &d, &RigidPose::identity(), &k()).unwrap();
        assert_eq!(out.image, src);
        assert!(out.validity.weights().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn forward_z_buffer_keeps_nearest() {
        // Two source pixels with depth 2 and 5 aimed at the same cell by
        // choosing a translation that moves the far one onto the near one's
        // landing spot is awkward; instead place them so both round to one cell.
        let k = CameraIntrinsics::new(10.0, 10.0, 1.5, 0.0).unwrap();
        let src = Raster::new(4, 1, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        // Pixel 1 at depth 2.0 and pixel 2 at depth 5.0; translate by tx so
        // pixel 1 moves +0.5 (→1.5 rounds to 2) and pixel 2 moves +0.2 (stays 2).
        let d = Raster::new(4, 1, 1, vec![-1.0, 2.0, 5.0, -1.0]).unwrap();
        let pose = RigidPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let out = forward_warp(&src, &d, &pose, &k).unwrap();
        assert_eq!(out.validity.get(2), 1.0);
        assert_eq!(out.image.get(2, 0, 0), 0.2);
        assert_eq!(out.depth.get(2, 0, 0), 2.0);
        assert_eq!(out.validity.get(0), 0.0);
        assert_eq!(out.validity.get(1), 0.0);
    }

    #[test]
    fn mask_warp_examples() {
        let d = Raster::filled(30, 20, 1, 4.0);
        let m = BinaryMask::rect(30, 20, 5, 5, 10, 10);
        let id = forward_warp_mask(&m, &d, &RigidPose::identity(), &k()).unwrap();
        assert_eq!(id, m);
        let empty = BinaryMask::zeros(30, 20);
        assert!(forward_warp_mask(&empty, &d, &RigidPose::identity(), &k())
            .unwrap()
            .is_empty());
        // fx·tx/Z = 3 pixels.
        let pose = RigidPose::from_translation(Vector3::new(0.12, 0.0, 0.0));
        let shifted = forward_warp_mask(&m, &d, &pose, &k()).unwrap();
        assert_eq!(shifted, BinaryMask::rect(30, 20, 8, 5, 10, 10));
        assert_eq!(shifted.pixel_count(), m.pixel_count());
    }

    #[test]
    fn mask_splat_bounds() {
        let d = Raster::filled(30, 20, 1, 4.0);
        let m = BinaryMask::rect(30, 20, 5, 5, 7, 4);
        let pose = RigidPose::from_axis_angle(Vector3::new(0.0, 0.01, 0.02), Vector3::new(0.05, 0.03, 0.0));
        let out = forward_warp_mask(&m, &d, &pose, &k()).unwrap();
        assert!(out.pixel_count() >= 1);
        assert!(out.pixel_count() <= 4 * m.pixel_count());
    }
}
